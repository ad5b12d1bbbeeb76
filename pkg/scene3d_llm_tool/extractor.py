#
# Copyright (C) 2026  scene3d_llm_tool developers
#
# This software is distributed under the terms of the MIT License.
#

"""
3D features from multi-view renders: direct reconstruction and weighted-mean feature fusion.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from logging import getLogger

import numpy as np

from .geometry import backproject_pixels, pixel_grid
from .synthworld import BACKGROUND_ID
from . import tensorfile


logger = getLogger(__name__)

OBSERVATION_WEIGHT = 1.0


class DimensionMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PointFeatureCloud:
    positions: np.ndarray       # N x 3
    features: np.ndarray        # N x D_v
    labels: np.ndarray = None   # N, optional

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != positions.shape[0]:
            raise DimensionMismatchError('Positions have %d rows, features have shape %r' %
                                         (positions.shape[0], features.shape))
        object.__setattr__(self, 'positions', positions)
        object.__setattr__(self, 'features', features)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if labels.shape[0] != positions.shape[0]:
                raise DimensionMismatchError('Expected %d labels, got %d' % (positions.shape[0], labels.shape[0]))
            object.__setattr__(self, 'labels', labels)

    def __len__(self):
        return self.positions.shape[0]

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def save(self, path):
        """Writes N x (3 + D_v [+ 1]) rows: xyz, features, then the label column when present."""
        columns = [self.positions, self.features]
        if self.labels is not None:
            columns.append(self.labels[:, None].astype(np.float64))
        tensorfile.write_tensor(path, np.concatenate(columns, axis=1))
        tensorfile.write_sidecar(tensorfile.sidecar_path(path), dict(
            kind='point_cloud', N=len(self), D_v=self.feature_dim, has_labels=self.labels is not None))

    @staticmethod
    def load(path):
        meta = tensorfile.read_sidecar(tensorfile.sidecar_path(path))
        table = tensorfile.read_tensor(path).astype(np.float64)
        d_v = int(meta['D_v'])
        labels = table[:, 3 + d_v].astype(np.int64) if meta.get('has_labels') else None
        return PointFeatureCloud(table[:, :3], table[:, 3:3 + d_v], labels)


def _check_views(views):
    if not views:
        raise ValueError('At least one view is required')
    dims = set(v.feature_dim for v in views)
    if len(dims) != 1:
        raise DimensionMismatchError('Views disagree on feature dimension: %r' % sorted(dims))
    return dims.pop()


def _view_points(view):
    """World points, features, colors and labels of the hit pixels of one view, row-major."""
    v, u = pixel_grid(view.intr)
    hit = view.depth > 0
    points = backproject_pixels(u[hit], v[hit], view.depth[hit], view.intr, view.pose)
    return points, view.features[hit], view.rgb[hit], view.semantics[hit]


def direct_reconstruct(views):
    d_v = _check_views(views)
    positions, features, labels = [], [], []
    for view in views:
        p, f, _, s = _view_points(view)
        positions.append(p)
        features.append(f)
        labels.append(s)
    cloud = PointFeatureCloud(np.concatenate(positions).reshape(-1, 3),
                              np.concatenate(features).reshape(-1, d_v),
                              np.concatenate(labels))
    logger.info('Direct reconstruction: %d points from %d views', len(cloud), len(views))
    return cloud


class FusedVoxelMap:
    """
    Dense voxel map holding per-voxel running means of features and colors.
    Voxel (i, j, k) covers [origin + idx * voxel_size, origin + (idx + 1) * voxel_size).
    """
    def __init__(self, origin, voxel_size, dims, feature_dim, n_labels=0):
        if not voxel_size > 0:
            raise ValueError('voxel_size must be positive, got %r' % voxel_size)
        dims = tuple(int(d) for d in dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError('dims must be three positive counts, got %r' % (dims,))
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.voxel_size = float(voxel_size)
        self.dims = dims
        self.feature = np.zeros(dims + (feature_dim,))
        self.color = np.zeros(dims + (3,))
        self.weight = np.zeros(dims)
        self.label_counts = np.zeros(dims + (n_labels,), dtype=np.int64) if n_labels else None
        self.dropped = 0
        self.integrated = 0

    @property
    def feature_dim(self):
        return self.feature.shape[-1]

    def voxel_index(self, points):
        """Integer voxel indices and an in-grid mask for N x 3 world points."""
        idx = np.floor((points - self.origin) / self.voxel_size).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=1)
        return idx, inside

    def voxel_centers(self, idx):
        return self.origin + (np.asarray(idx, dtype=np.float64) + 0.5) * self.voxel_size

    def integrate_points(self, points, features, colors, labels=None):
        idx, inside = self.voxel_index(points)
        dropped = int(np.count_nonzero(~inside))
        self.dropped += dropped
        idx = idx[inside]
        flat = np.ravel_multi_index(idx.T, self.dims)
        n_vox = int(np.prod(self.dims))

        # Per-voxel sums of this batch, then one weighted-mean update per voxel:
        # value <- (w * value + w0 * sum) / (w + w0 * count)
        count = np.bincount(flat, minlength=n_vox).astype(np.float64)
        f_sum = np.zeros((n_vox, self.feature_dim))
        c_sum = np.zeros((n_vox, 3))
        np.add.at(f_sum, flat, features[inside])
        np.add.at(c_sum, flat, colors[inside])

        touched = count > 0
        w = self.weight.reshape(-1)
        new_w = w[touched] + OBSERVATION_WEIGHT * count[touched]
        feat = self.feature.reshape(n_vox, -1)
        col = self.color.reshape(n_vox, 3)
        feat[touched] = (w[touched, None] * feat[touched] + OBSERVATION_WEIGHT * f_sum[touched]) / new_w[:, None]
        col[touched] = (w[touched, None] * col[touched] + OBSERVATION_WEIGHT * c_sum[touched]) / new_w[:, None]
        w[touched] = new_w

        if self.label_counts is not None and labels is not None:
            labels = labels[inside]
            known = labels != BACKGROUND_ID
            np.add.at(self.label_counts.reshape(n_vox, -1), (flat[known], labels[known]), 1)

        self.integrated += int(np.count_nonzero(inside))
        if dropped:
            logger.debug('Dropped %d out-of-grid points', dropped)

    def integrate(self, view):
        if view.feature_dim != self.feature_dim:
            raise DimensionMismatchError('View feature dimension %d, map expects %d' %
                                         (view.feature_dim, self.feature_dim))
        points, features, colors, labels = _view_points(view)
        self.integrate_points(points, features, colors, labels)

    def merge(self, other):
        """Combine another partial map over the same grid, as if its observations were integrated here."""
        if other.dims != self.dims or other.feature_dim != self.feature_dim:
            raise DimensionMismatchError('Cannot merge maps of different shape')
        total = self.weight + other.weight
        seen = total > 0
        for mine, theirs in ((self.feature, other.feature), (self.color, other.color)):
            mine[seen] = (self.weight[seen, None] * mine[seen] + other.weight[seen, None] * theirs[seen]) / \
                total[seen, None]
        self.weight = total
        if self.label_counts is not None and other.label_counts is not None:
            self.label_counts += other.label_counts
        self.dropped += other.dropped
        self.integrated += other.integrated

    def observed_indices(self):
        return np.argwhere(self.weight > 0)

    def to_point_cloud(self):
        """Observed voxel centres with their fused features; labels from the majority vote when tracked."""
        idx = self.observed_indices()
        sel = tuple(idx.T)
        labels = None
        if self.label_counts is not None:
            counts = self.label_counts[sel]
            labels = np.where(counts.sum(axis=1) > 0, np.argmax(counts, axis=1), BACKGROUND_ID)
        return PointFeatureCloud(self.voxel_centers(idx), self.feature[sel], labels)

    @property
    def n_labels(self):
        return 0 if self.label_counts is None else self.label_counts.shape[-1]

    def meta(self):
        return dict(kind='fused_map', origin=self.origin.tolist(), voxel_size=self.voxel_size,
                    dims=list(self.dims), D_v=self.feature_dim, N=int(np.count_nonzero(self.weight > 0)),
                    n_labels=self.n_labels, dropped=self.dropped, integrated=self.integrated)

    def save(self, path):
        """Writes dims x (D_v + 3 + 1 + n_labels): feature, color, weight and the label votes per voxel."""
        columns = [self.feature, self.color, self.weight[..., None]]
        if self.label_counts is not None:
            columns.append(self.label_counts.astype(np.float64))
        table = np.concatenate(columns, axis=-1)
        tensorfile.write_tensor(path, table)
        tensorfile.write_sidecar(tensorfile.sidecar_path(path), self.meta())

    @staticmethod
    def load(path):
        meta = tensorfile.read_sidecar(tensorfile.sidecar_path(path))
        table = tensorfile.read_tensor(path).astype(np.float64)
        d_v = int(meta['D_v'])
        n_labels = int(meta.get('n_labels', 0))
        m = FusedVoxelMap(meta['origin'], meta['voxel_size'], meta['dims'], d_v, n_labels)
        m.feature = table[..., :d_v].copy()
        m.color = table[..., d_v:d_v + 3].copy()
        m.weight = table[..., d_v + 3].copy()
        if n_labels:
            m.label_counts = np.rint(table[..., d_v + 4:d_v + 4 + n_labels]).astype(np.int64)
        m.dropped = int(meta.get('dropped', 0))
        m.integrated = int(meta.get('integrated', 0))
        return m


def fuse(views, origin, voxel_size, dims, n_labels=0, workers=1):
    """
    Fuses every hit pixel of every view into a voxel map.
    With workers > 1 the views are split into contiguous partitions, each fused into its own map,
    and the partial maps are merged in partition order.
    """
    d_v = _check_views(views)

    def fuse_partition(part):
        m = FusedVoxelMap(origin, voxel_size, dims, d_v, n_labels)
        for view in part:
            m.integrate(view)
        return m

    if workers <= 1 or len(views) < 2:
        fused = fuse_partition(views)
    else:
        bounds = np.linspace(0, len(views), min(workers, len(views)) + 1).astype(int)
        parts = [views[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(fuse_partition, parts))
        fused = partials[0]
        for p in partials[1:]:
            fused.merge(p)

    logger.info('Fused %d views: %d observations, %d dropped, %d voxels observed',
                len(views), fused.integrated, fused.dropped, int(np.count_nonzero(fused.weight > 0)))
    return fused


def classify_points(cloud, embed):
    """Nearest label embedding by cosine similarity; zero-norm features are background."""
    if len(cloud) == 0:
        raise ValueError('Cannot classify an empty point cloud')
    if cloud.feature_dim != embed.dim:
        raise DimensionMismatchError('Cloud features are %d-dim, embedding is %d-dim' %
                                     (cloud.feature_dim, embed.dim))
    norms = np.linalg.norm(cloud.features, axis=1)
    table = embed.table / np.linalg.norm(embed.table, axis=1, keepdims=True)
    with np.errstate(divide='ignore', invalid='ignore'):
        sims = (cloud.features @ table.T) / norms[:, None]
    pred = np.argmax(sims, axis=1)      # first maximum, i.e. smallest label id
    return np.where(norms > 0, pred, BACKGROUND_ID)
