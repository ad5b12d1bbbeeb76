#
# Copyright (C) 2026  scene3d_llm_tool developers
#
# This software is distributed under the terms of the MIT License.
#

"""
Pinhole cameras, backprojection, axis-aligned boxes.

Conventions:
    (u, v) address pixel centres, u runs along the width and v along the height.
    Depth is the camera-frame z coordinate, not the ray length.
    Camera frame: x right, y down, z forward. CameraPose maps camera frame to world frame.
"""

from dataclasses import dataclass
from logging import getLogger

import numpy as np


logger = getLogger(__name__)

ORTHONORMAL_TOLERANCE = 1e-9


class InvalidDepthError(ValueError):
    pass


class OutOfBoundsError(ValueError):
    pass


class BehindCameraError(ValueError):
    pass


def _frozen_vector(value, size=3):
    arr = np.array(value, dtype=np.float64).reshape(size)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError('Focal lengths must be positive, got fx=%r fy=%r' % (self.fx, self.fy))
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError('Principal point (%r, %r) is outside the %dx%d image' %
                             (self.cx, self.cy, self.width, self.height))

    @staticmethod
    def from_fov(width, height, fov_deg):
        """Square-pixel intrinsics with the principal point at the image centre."""
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return CameraIntrinsics(fx=float(f), fy=float(f), cx=(width - 1) / 2, cy=(height - 1) / 2,
                                width=int(width), height=int(height))

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def to_dict(self):
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, width=self.width, height=self.height)

    @staticmethod
    def from_dict(d):
        return CameraIntrinsics(fx=float(d['fx']), fy=float(d['fy']), cx=float(d['cx']), cy=float(d['cy']),
                                width=int(d['width']), height=int(d['height']))


@dataclass(frozen=True, eq=False)
class CameraPose:
    rotation: np.ndarray        # camera-to-world, 3x3
    translation: np.ndarray     # camera centre in world coordinates

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        r.setflags(write=False)
        object.__setattr__(self, 'rotation', r)
        object.__setattr__(self, 'translation', _frozen_vector(self.translation))
        if not np.allclose(r.T @ r, np.eye(3), rtol=0, atol=ORTHONORMAL_TOLERANCE):
            raise ValueError('Rotation is not orthonormal')
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOLERANCE:
            raise ValueError('Rotation determinant is %r, expected +1' % np.linalg.det(r))

    @staticmethod
    def identity():
        return CameraPose(np.eye(3), np.zeros(3))

    @staticmethod
    def look_at(eye, target, up=(0.0, 0.0, 1.0)):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-12:
            # Looking straight along the up axis
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        return CameraPose(np.stack([right, down, forward], axis=1), eye)

    def to_camera(self, points):
        """World points (N x 3) to camera frame."""
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def to_world(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def to_dict(self):
        return dict(rotation=self.rotation.tolist(), translation=self.translation.tolist())

    @staticmethod
    def from_dict(d):
        return CameraPose(np.array(d['rotation']), np.array(d['translation']))


@dataclass(frozen=True, eq=False)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'min', _frozen_vector(self.min))
        object.__setattr__(self, 'max', _frozen_vector(self.max))
        if np.any(self.min > self.max):
            raise ValueError('Invalid AABB: min %s exceeds max %s' % (self.min.tolist(), self.max.tolist()))

    def __eq__(self, other):
        if not isinstance(other, Aabb):
            return NotImplemented
        return bool(np.array_equal(self.min, other.min) and np.array_equal(self.max, other.max))

    def __hash__(self):
        return hash((tuple(self.min), tuple(self.max)))

    def __repr__(self):
        return 'Aabb(%s, %s)' % (self.min.tolist(), self.max.tolist())

    @property
    def center(self):
        return (self.min + self.max) / 2

    @property
    def extent(self):
        return self.max - self.min

    @property
    def volume(self):
        return float(np.prod(self.extent))

    @property
    def is_degenerate(self):
        return bool(np.any(self.extent <= 0))

    def contains(self, other):
        return bool(np.all(self.min <= other.min) and np.all(other.max <= self.max))

    def contains_point(self, point):
        point = np.asarray(point)
        return bool(np.all(self.min <= point) and np.all(point <= self.max))

    def intersects(self, other):
        return bool(np.all(self.min <= other.max) and np.all(other.min <= self.max))

    def overlaps(self, other):
        """True when the boxes share a positive volume; touching faces do not count."""
        return bool(np.all(self.min < other.max) and np.all(other.min < self.max))

    def translated(self, offset):
        offset = np.asarray(offset, dtype=np.float64)
        return Aabb(self.min + offset, self.max + offset)

    def to_list(self):
        return self.min.tolist() + self.max.tolist()

    @staticmethod
    def from_list(values):
        if len(values) != 6:
            raise ValueError('AABB needs 6 values, got %d' % len(values))
        return Aabb(values[:3], values[3:])


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'origin', _frozen_vector(self.origin))
        object.__setattr__(self, 'direction', _frozen_vector(self.direction))
        if abs(np.linalg.norm(self.direction) - 1.0) > ORTHONORMAL_TOLERANCE:
            raise ValueError('Ray direction must be a unit vector')

    @staticmethod
    def towards(origin, direction):
        direction = np.asarray(direction, dtype=np.float64)
        return Ray(origin, direction / np.linalg.norm(direction))

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


def backproject_pixels(u, v, depth, intr, pose):
    """Vectorised backprojection; returns N x 3 world points. No bounds checks."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    cam = np.stack([(u - intr.cx) * depth / intr.fx,
                    (v - intr.cy) * depth / intr.fy,
                    depth], axis=-1)
    return pose.to_world(cam)


def project_points(points, intr, pose):
    """Vectorised projection; returns (u, v, depth) arrays. Points behind the camera get depth <= 0."""
    cam = pose.to_camera(np.atleast_2d(points))
    z = cam[:, 2]
    with np.errstate(divide='ignore', invalid='ignore'):
        u = intr.fx * cam[:, 0] / z + intr.cx
        v = intr.fy * cam[:, 1] / z + intr.cy
    return u, v, z


def backproject(u, v, depth, intr, pose):
    if not depth > 0:
        raise InvalidDepthError('Depth must be positive, got %r' % depth)
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        raise OutOfBoundsError('Pixel (%r, %r) is outside the %dx%d image' % (u, v, intr.width, intr.height))
    return backproject_pixels([u], [v], [depth], intr, pose)[0]


def project(point, intr, pose):
    u, v, z = project_points(np.asarray(point, dtype=np.float64).reshape(1, 3), intr, pose)
    if not z[0] > 0:
        raise BehindCameraError('Point %s is behind the camera (z=%r)' % (list(point), z[0]))
    return float(u[0]), float(v[0]), float(z[0])


def pixel_grid(intr):
    """Pixel-centre coordinates (v, u) for every pixel, each H x W."""
    v, u = np.mgrid[0:intr.height, 0:intr.width]
    return v.astype(np.float64), u.astype(np.float64)


def pixel_rays(intr, pose):
    """
    Unit world-space ray directions through every pixel centre.
    Returns (origin, directions H x W x 3, z_per_unit H x W), where z_per_unit converts ray length to depth.
    """
    v, u = pixel_grid(intr)
    cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)
    norm = np.linalg.norm(cam, axis=-1)
    cam_unit = cam / norm[..., None]
    directions = cam_unit @ pose.rotation.T
    return pose.translation.copy(), directions, 1.0 / norm


def aabb_iou(a, b):
    if a.is_degenerate or b.is_degenerate:
        return 0.0
    overlap = np.clip(np.minimum(a.max, b.max) - np.maximum(a.min, b.min), 0.0, None)
    inter = float(np.prod(overlap))
    union = a.volume + b.volume - inter
    return inter / union


def aabb_center_distance(a, b):
    return float(np.linalg.norm(a.center - b.center))
