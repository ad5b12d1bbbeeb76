#
# Copyright (C) 2026  scene3d_llm_tool developers
#
# This software is distributed under the terms of the MIT License.
#

"""
Procedural scenes made of spheres and boxes, and an analytic RGBD raycaster that also emits
pixel-aligned feature maps (one unit vector per semantic label).
"""

import json
import zlib
from dataclasses import dataclass, field
from logging import getLogger

import numpy as np

from .geometry import Aabb, CameraIntrinsics, CameraPose, pixel_rays


logger = getLogger(__name__)

SHAPE_SPHERE = 'sphere'
SHAPE_BOX = 'box'
SHAPES = SHAPE_SPHERE, SHAPE_BOX

DEFAULT_LABELS = ('chair', 'table', 'sofa', 'bed', 'lamp', 'cabinet', 'plant', 'television', 'desk', 'shelf')

BACKGROUND_ID = -1

# Embedding vectors of distinct labels must stay below this cosine similarity
MAX_LABEL_COSINE = 0.9
MAX_EMBEDDING_ATTEMPTS = 1000

LIGHT_DIRECTION = np.array([0.3, 0.5, 1.0]) / np.linalg.norm([0.3, 0.5, 1.0])
AMBIENT = 0.2

_HIT_EPSILON = 1e-9


class PlacementFailedError(ValueError):
    pass


class OverlappingObjectsError(ValueError):
    pass


class EmbeddingCollisionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SceneObject:
    shape: str
    center: tuple
    size: object        # radius for spheres, half-extents for boxes
    label: str
    aabb: Aabb = field(init=False)

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError('Unknown shape %r' % self.shape)
        if not self.label:
            raise ValueError('Object label must not be empty')
        center = np.asarray(self.center, dtype=np.float64)
        if self.shape == SHAPE_SPHERE:
            size = float(self.size)
            half = np.full(3, size)
        else:
            size = tuple(float(x) for x in self.size)
            half = np.asarray(size)
        if np.any(half <= 0):
            raise ValueError('Object size must be positive, got %r' % (self.size,))
        object.__setattr__(self, 'center', tuple(center.tolist()))
        object.__setattr__(self, 'size', size)
        object.__setattr__(self, 'aabb', Aabb(center - half, center + half))

    def surface_distance(self, points):
        """Unsigned distance from points (N x 3) to the object surface."""
        rel = np.asarray(points, dtype=np.float64) - np.asarray(self.center)
        if self.shape == SHAPE_SPHERE:
            return np.abs(np.linalg.norm(rel, axis=-1) - self.size)
        q = np.abs(rel) - np.asarray(self.size)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return np.abs(outside + inside)

    def to_dict(self):
        return dict(shape=self.shape, center=list(self.center),
                    size=self.size if self.shape == SHAPE_SPHERE else list(self.size),
                    label=self.label, aabb=self.aabb.to_list())

    @staticmethod
    def from_dict(d):
        return SceneObject(shape=d['shape'], center=d['center'], size=d['size'], label=d['label'])


@dataclass(frozen=True, eq=False)
class Scene:
    objects: tuple
    bounds: Aabb
    seed: int

    def __post_init__(self):
        object.__setattr__(self, 'objects', tuple(self.objects))
        for obj in self.objects:
            if not self.bounds.contains(obj.aabb):
                raise ValueError('Object %r at %r is outside the scene bounds' % (obj.label, obj.center))
        for i, a in enumerate(self.objects):
            for b in self.objects[i + 1:]:
                if a.aabb.overlaps(b.aabb):
                    raise OverlappingObjectsError('Objects %r at %r and %r at %r overlap' %
                                                  (a.label, a.center, b.label, b.center))

    @property
    def labels(self):
        return sorted(set(o.label for o in self.objects))

    def surface_distance(self, points):
        """Distance from every point to the nearest object surface; inf for an empty scene."""
        points = np.atleast_2d(points)
        best = np.full(len(points), np.inf)
        for obj in self.objects:
            best = np.minimum(best, obj.surface_distance(points))
        return best

    def to_dict(self):
        return dict(bounds=self.bounds.to_list(), seed=self.seed, objects=[o.to_dict() for o in self.objects])

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @staticmethod
    def from_dict(d):
        return Scene(objects=[SceneObject.from_dict(o) for o in d['objects']],
                     bounds=Aabb.from_list(d['bounds']), seed=int(d['seed']))

    @staticmethod
    def from_json(text):
        return Scene.from_dict(json.loads(text))


class LabelEmbedding:
    """
    Deterministic unit-norm vectors per label; stands in for language-aligned 2D features.
    Label ids are positions in the label list.
    """
    def __init__(self, labels=DEFAULT_LABELS, dim=32, seed=0):
        if len(set(labels)) != len(labels):
            raise ValueError('Duplicate labels in %r' % (labels,))
        self.labels = tuple(labels)
        self.dim = int(dim)
        if self.dim < 2:
            raise ValueError('Embedding dimension must be at least 2, got %r' % (dim,))
        self.seed = seed
        rng = np.random.default_rng(seed)
        vectors = []
        for label in self.labels:
            for _ in range(MAX_EMBEDDING_ATTEMPTS):
                v = rng.standard_normal(self.dim)
                v /= np.linalg.norm(v)
                if all(float(v @ w) < MAX_LABEL_COSINE for w in vectors):
                    break
                logger.debug('Regenerating embedding for %r (cosine collision)', label)
            else:
                raise EmbeddingCollisionError('No %d-dimensional vector for %r below cosine %g against the other %d labels '
                                              'after %d attempts' % (self.dim, label, MAX_LABEL_COSINE, len(vectors),
                                                                     MAX_EMBEDDING_ATTEMPTS))
            vectors.append(v)
        self.table = np.array(vectors).reshape(len(self.labels), self.dim)
        self.table.setflags(write=False)
        self._ids = {label: idx for idx, label in enumerate(self.labels)}

    def __getitem__(self, label):
        return self.table[self.label_id(label)]

    def __len__(self):
        return len(self.labels)

    def label_id(self, label):
        try:
            return self._ids[label]
        except KeyError:
            raise ValueError('Label %r has no embedding' % label) from None

    def to_dict(self):
        return dict(labels=list(self.labels), dim=self.dim, seed=self.seed)

    @staticmethod
    def from_dict(d):
        return LabelEmbedding(labels=tuple(d['labels']), dim=int(d['dim']), seed=d['seed'])


@dataclass(frozen=True, eq=False)
class CameraView:
    rgb: np.ndarray             # H x W x 3 in [0, 1]
    depth: np.ndarray           # H x W, 0 where nothing was hit
    features: np.ndarray        # H x W x D_v
    semantics: np.ndarray       # H x W label ids, -1 for background
    intr: CameraIntrinsics
    pose: CameraPose

    @property
    def feature_dim(self):
        return self.features.shape[-1]

    @property
    def hit_mask(self):
        return self.depth > 0

    @property
    def hit_count(self):
        return int(np.count_nonzero(self.depth > 0))


def label_color(label):
    """Fixed per-label albedo derived from a CRC of the label."""
    crc = zlib.crc32(label.encode('utf-8'))
    rgb = np.array([(crc >> 16) & 0xFF, (crc >> 8) & 0xFF, crc & 0xFF], dtype=np.float64) / 255.0
    return 0.25 + 0.75 * rgb


def make_scene(seed, n_objects, bounds, labels=DEFAULT_LABELS, size_range=(0.3, 0.8)):
    if n_objects < 0:
        raise ValueError('n_objects must be non-negative, got %r' % n_objects)
    if bounds.is_degenerate:
        raise ValueError('Scene bounds %r are degenerate' % bounds)

    rng = np.random.default_rng(seed)
    budget = 10 * n_objects * 100
    attempts = 0
    objects = []
    while len(objects) < n_objects:
        if attempts >= budget:
            raise PlacementFailedError('Placed %d of %d objects in %d attempts (seed %r)' %
                                       (len(objects), n_objects, attempts, seed))
        attempts += 1

        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        label = labels[int(rng.integers(len(labels)))]
        if shape == SHAPE_SPHERE:
            size = float(rng.uniform(*size_range))
            half = np.full(3, size)
        else:
            size = tuple(rng.uniform(*size_range, size=3).tolist())
            half = np.asarray(size)
        lo = bounds.min + half
        hi = bounds.max - half
        if np.any(lo > hi):
            continue
        center = rng.uniform(lo, hi)
        candidate = SceneObject(shape=shape, center=tuple(center.tolist()), size=size, label=label)
        if any(candidate.aabb.intersects(o.aabb) for o in objects):
            continue
        objects.append(candidate)

    logger.debug('Scene seed=%r: %d objects placed in %d attempts', seed, len(objects), attempts)
    return Scene(objects=objects, bounds=bounds, seed=seed)


def _intersect_sphere(origin, dirs, center, radius):
    oc = origin - np.asarray(center)
    b = dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - c
    t = np.full(b.shape, np.inf)
    ok = disc >= 0
    root = np.sqrt(np.where(ok, disc, 0.0))
    near = -b - root
    far = -b + root
    t = np.where(ok & (near > _HIT_EPSILON), near, t)
    t = np.where(ok & (near <= _HIT_EPSILON) & (far > _HIT_EPSILON), far, t)
    return t


def _intersect_box(origin, dirs, lo, hi):
    with np.errstate(divide='ignore', invalid='ignore'):
        inv = 1.0 / dirs
        t0 = (lo - origin) * inv
        t1 = (hi - origin) * inv
    # Rays parallel to a slab: inside the slab means unbounded, outside means miss
    parallel = dirs == 0
    inside_slab = (origin >= lo) & (origin <= hi)
    t_small = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t0, t1))
    t_big = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t0, t1))
    t_enter = np.max(t_small, axis=-1)
    t_exit = np.min(t_big, axis=-1)
    hit = t_enter <= t_exit
    t = np.full(t_enter.shape, np.inf)
    t = np.where(hit & (t_enter > _HIT_EPSILON), t_enter, t)
    t = np.where(hit & (t_enter <= _HIT_EPSILON) & (t_exit > _HIT_EPSILON), t_exit, t)
    return t


def _surface_normals(obj, points):
    rel = points - np.asarray(obj.center)
    if obj.shape == SHAPE_SPHERE:
        return rel / obj.size
    scaled = np.abs(rel) / np.asarray(obj.size)
    axis = np.argmax(scaled, axis=-1)
    normals = np.zeros_like(rel)
    normals[np.arange(len(rel)), axis] = np.sign(rel[np.arange(len(rel)), axis])
    return normals


def render(scene, intr, pose, embed):
    origin, dirs, z_per_unit = pixel_rays(intr, pose)
    flat_dirs = dirs.reshape(-1, 3)
    n_pix = flat_dirs.shape[0]

    best_t = np.full(n_pix, np.inf)
    best_obj = np.full(n_pix, -1, dtype=np.int64)
    for idx, obj in enumerate(scene.objects):
        if obj.shape == SHAPE_SPHERE:
            t = _intersect_sphere(origin, flat_dirs, obj.center, obj.size)
        else:
            t = _intersect_box(origin, flat_dirs, obj.aabb.min, obj.aabb.max)
        closer = t < best_t     # ties keep the earlier object
        best_t = np.where(closer, t, best_t)
        best_obj = np.where(closer, idx, best_obj)

    hit = best_obj >= 0
    depth = np.zeros(n_pix)
    depth[hit] = best_t[hit] * z_per_unit.reshape(-1)[hit]

    rgb = np.zeros((n_pix, 3))
    features = np.zeros((n_pix, embed.dim))
    semantics = np.full(n_pix, BACKGROUND_ID, dtype=np.int64)
    for idx, obj in enumerate(scene.objects):
        sel = best_obj == idx
        if not np.any(sel):
            continue
        points = origin + best_t[sel, None] * flat_dirs[sel]
        lambert = np.clip(_surface_normals(obj, points) @ LIGHT_DIRECTION, 0.0, None)
        shade = AMBIENT + (1.0 - AMBIENT) * lambert
        rgb[sel] = np.clip(label_color(obj.label)[None, :] * shade[:, None], 0.0, 1.0)
        features[sel] = embed[obj.label]
        semantics[sel] = embed.label_id(obj.label)

    h, w = intr.height, intr.width
    view = CameraView(rgb=rgb.reshape(h, w, 3), depth=depth.reshape(h, w),
                      features=features.reshape(h, w, embed.dim), semantics=semantics.reshape(h, w),
                      intr=intr, pose=pose)
    logger.debug('Rendered %dx%d view, %d hit pixels', w, h, view.hit_count)
    return view


def orbit_cameras(scene, n_views, radius, intr=None, elevation=0.0):
    """Cameras evenly spaced on a horizontal circle around the bounds centre, all looking at the centre."""
    if n_views < 1:
        raise ValueError('n_views must be at least 1, got %r' % n_views)
    intr = intr or CameraIntrinsics.from_fov(128, 128, 60.0)
    center = scene.bounds.center
    cameras = []
    for k in range(n_views):
        theta = 2 * np.pi * k / n_views
        eye = center + np.array([radius * np.cos(theta), radius * np.sin(theta), elevation])
        cameras.append((intr, CameraPose.look_at(eye, center)))
    return cameras


def render_orbit(scene, embed, n_views, radius, intr=None, elevation=0.0):
    return [render(scene, i, p, embed) for i, p in orbit_cameras(scene, n_views, radius, intr, elevation)]
