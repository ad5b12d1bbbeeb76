#
# Copyright (C) 2026  scene3d_llm_tool developers
#
# This software is distributed under the terms of the MIT License.
#

"""
Dense voxel field with density, color and feature per grid vertex.

Rays are rendered with emission-absorption compositing over evenly spaced samples, values are
read with trilinear interpolation (zero outside the grid), and density is activated by softplus.
Gradients are derived by hand; fit() runs AdamW over seeded ray batches.
"""

import csv
import math
from dataclasses import dataclass
from logging import getLogger

import numpy as np

from .geometry import pixel_rays
from .extractor import PointFeatureCloud
from . import tensorfile


logger = getLogger(__name__)

FEATURE_LOSS_WEIGHT = 1.0
OPACITY_LOSS_WEIGHT = 0.01

SCHEDULE_COSINE = 'cosine'
SCHEDULE_CONSTANT = 'constant'
SCHEDULES = SCHEDULE_COSINE, SCHEDULE_CONSTANT

# Raw density written into a fresh grid; softplus(-5) ~ 0.0067
DEFAULT_INIT_DENSITY = -5.0


class DivergenceError(RuntimeError):
    def __init__(self, step, value):
        super(DivergenceError, self).__init__('Loss became non-finite (%r) at step %d' % (value, step))
        self.step = step


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class RaySampleConfig:
    n_samples: int = 64
    t_near: float = 0.5
    t_far: float = 10.0

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError('n_samples must be at least 2, got %r' % self.n_samples)
        if not (0 <= self.t_near < self.t_far):
            raise ValueError('Expected 0 <= t_near < t_far, got %r, %r' % (self.t_near, self.t_far))

    @property
    def t_values(self):
        return np.linspace(self.t_near, self.t_far, self.n_samples)

    @property
    def delta(self):
        return (self.t_far - self.t_near) / (self.n_samples - 1)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    warmup_steps: int = 1000
    warmup_start_lr: float = 1e-8
    schedule: str = SCHEDULE_COSINE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    grad_clip_norm: float = None
    steps: int = 1000
    batch_rays: int = 512
    seed: int = 0
    feature_weight: float = FEATURE_LOSS_WEIGHT
    opacity_weight: float = OPACITY_LOSS_WEIGHT
    eval_rays: int = 4096
    log_every: int = 100

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError('Unknown schedule %r, expected one of %r' % (self.schedule, SCHEDULES))
        for name in ('learning_rate', 'batch_rays', 'eval_rays', 'log_every'):
            if not getattr(self, name) > 0:
                raise ValueError('%s must be positive, got %r' % (name, getattr(self, name)))
        for name in ('warmup_steps', 'warmup_start_lr', 'weight_decay', 'steps', 'feature_weight',
                     'opacity_weight'):
            if getattr(self, name) < 0:
                raise ValueError('%s must not be negative, got %r' % (name, getattr(self, name)))
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError('Adam betas must lie in (0, 1)')
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0:
            raise ValueError('grad_clip_norm must be positive when set')

    def lr_at(self, step):
        """
        Linear warmup to learning_rate, then cosine decay to 0 or a constant rate.
        The cosine recipe warms up from warmup_start_lr, the constant recipe from 0.
        """
        if step < self.warmup_steps:
            start = 0.0 if self.schedule == SCHEDULE_CONSTANT else self.warmup_start_lr
            return start + (self.learning_rate - start) * step / self.warmup_steps
        if self.schedule == SCHEDULE_CONSTANT:
            return self.learning_rate
        decay_steps = max(self.steps - self.warmup_steps, 1)
        progress = min((step - self.warmup_steps) / decay_steps, 1.0)
        return 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True, eq=False)
class RenderOutput:
    color: np.ndarray
    feature: np.ndarray
    opacity: float


@dataclass(frozen=True, eq=False)
class RayBatch:
    origins: np.ndarray         # R x 3
    directions: np.ndarray      # R x 3, unit

    def __len__(self):
        return self.origins.shape[0]

    @staticmethod
    def of(rays):
        return RayBatch(np.array([r.origin for r in rays]).reshape(-1, 3),
                        np.array([r.direction for r in rays]).reshape(-1, 3))

    def subset(self, idx):
        return RayBatch(self.origins[idx], self.directions[idx])


@dataclass(frozen=True, eq=False)
class RayTargets:
    rgb: np.ndarray             # R x 3
    feature: np.ndarray         # R x D_v
    hit: np.ndarray             # R, 0/1

    def subset(self, idx):
        return RayTargets(self.rgb[idx], self.feature[idx], self.hit[idx])


class VoxelFeatureGrid:
    """
    Parameters live on grid vertices: vertex (i, j, k) sits at origin + (i, j, k) * voxel_size.
    """
    def __init__(self, origin, voxel_size, density, color, feature):
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.voxel_size = float(voxel_size)
        self.density = np.asarray(density, dtype=np.float64)
        self.color = np.asarray(color, dtype=np.float64)
        self.feature = np.asarray(feature, dtype=np.float64)
        if not self.voxel_size > 0:
            raise ValueError('voxel_size must be positive')
        if self.density.ndim != 3 or min(self.density.shape) < 2:
            raise ValueError('Grid needs at least 2 vertices per axis, got %r' % (self.density.shape,))
        if self.color.shape != self.dims + (3,) or self.feature.shape[:3] != self.dims:
            raise ValueError('Parameter arrays disagree on grid dims %r' % (self.dims,))
        if not all(np.all(np.isfinite(a)) for a in self.parameters()):
            raise ValueError('Grid parameters must be finite')

    @staticmethod
    def create(origin, voxel_size, dims, feature_dim, init_density=DEFAULT_INIT_DENSITY):
        dims = tuple(int(d) for d in dims)
        return VoxelFeatureGrid(origin, voxel_size,
                                np.full(dims, float(init_density)),
                                np.zeros(dims + (3,)),
                                np.zeros(dims + (feature_dim,)))

    @staticmethod
    def covering(bounds, resolution, feature_dim, init_density=DEFAULT_INIT_DENSITY):
        """Cubic-voxel grid with `resolution` vertices along the longest side of the bounds."""
        voxel_size = float(np.max(bounds.extent)) / (resolution - 1)
        dims = np.maximum(np.ceil(bounds.extent / voxel_size).astype(int) + 1, 2)
        return VoxelFeatureGrid.create(bounds.min, voxel_size, dims, feature_dim, init_density)

    @property
    def dims(self):
        return self.density.shape

    @property
    def feature_dim(self):
        return self.feature.shape[-1]

    def parameters(self):
        return [self.density, self.color, self.feature]

    def copy(self):
        return VoxelFeatureGrid(self.origin, self.voxel_size, self.density.copy(), self.color.copy(),
                                self.feature.copy())

    def vertex_positions(self):
        idx = np.stack(np.meshgrid(*[np.arange(n) for n in self.dims], indexing='ij'), axis=-1)
        return self.origin + idx * self.voxel_size

    def meta(self):
        return dict(kind='voxel_field', origin=self.origin.tolist(), voxel_size=self.voxel_size,
                    dims=list(self.dims), D_v=self.feature_dim)

    def save(self, path):
        table = np.concatenate([self.density[..., None], self.color, self.feature], axis=-1)
        tensorfile.write_tensor(path, table)
        tensorfile.write_sidecar(tensorfile.sidecar_path(path), self.meta())

    @staticmethod
    def load(path):
        meta = tensorfile.read_sidecar(tensorfile.sidecar_path(path))
        table = tensorfile.read_tensor(path).astype(np.float64)
        return VoxelFeatureGrid(meta['origin'], meta['voxel_size'], table[..., 0].copy(),
                                table[..., 1:4].copy(), table[..., 4:].copy())


@dataclass(frozen=True, eq=False)
class GridGradients:
    density: np.ndarray
    color: np.ndarray
    feature: np.ndarray

    def arrays(self):
        return [self.density, self.color, self.feature]

    def global_norm(self):
        return math.sqrt(sum(float(np.sum(g * g)) for g in self.arrays()))


def _trilinear_setup(grid, points):
    """
    Flat vertex indices (P x 8) and weights (P x 8) for every point; points outside the grid get zero weights.
    """
    dims = np.asarray(grid.dims)
    g = (points - grid.origin) / grid.voxel_size
    inside = np.all((g >= 0) & (g <= dims - 1), axis=1)
    base = np.clip(np.floor(g).astype(np.int64), 0, dims - 2)
    frac = g - base
    corners = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])   # 8 x 3
    idx = base[:, None, :] + corners[None, :, :]
    w = np.prod(np.where(corners[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :]), axis=2)
    w = np.where(inside[:, None], w, 0.0)
    flat = np.ravel_multi_index((idx[..., 0], idx[..., 1], idx[..., 2]), grid.dims)
    return flat, w, inside


def _interpolate(values_flat, flat, w):
    """values_flat: V x C. Returns P x C."""
    return np.einsum('pk,pkc->pc', w, values_flat[flat])


def _forward(grid, rays, cfg):
    n_rays = len(rays)
    t = cfg.t_values
    delta = cfg.delta
    points = (rays.origins[:, None, :] + t[None, :, None] * rays.directions[:, None, :]).reshape(-1, 3)
    flat, w, inside = _trilinear_setup(grid, points)

    raw = _interpolate(grid.density.reshape(-1, 1), flat, w)[:, 0]
    sigma = np.where(inside, softplus(raw), 0.0)
    color = _interpolate(grid.color.reshape(-1, 3), flat, w)
    feature = _interpolate(grid.feature.reshape(-1, grid.feature_dim), flat, w)

    s = (sigma * delta).reshape(n_rays, -1)
    alpha = 1.0 - np.exp(-s)
    # T_i = exp(-sum_{j<i} s_j)
    cum = np.cumsum(s, axis=1)
    trans = np.exp(-(cum - s))
    weights = trans * alpha

    color = color.reshape(n_rays, -1, 3)
    feature = feature.reshape(n_rays, -1, grid.feature_dim)
    out = dict(color=np.einsum('rs,rsc->rc', weights, color),
               feature=np.einsum('rs,rsc->rc', weights, feature),
               opacity=weights.sum(axis=1))
    cache = dict(flat=flat, w=w, inside=inside, raw=raw, s=s, trans=trans, alpha=alpha, weights=weights,
                 color=color, feature=feature, delta=delta)
    return out, cache


def render_rays(grid, rays, cfg):
    out, _ = _forward(grid, rays, cfg)
    return out


def render_ray(grid, ray, cfg):
    out = render_rays(grid, RayBatch.of([ray]), cfg)
    return RenderOutput(color=out['color'][0], feature=out['feature'][0], opacity=float(out['opacity'][0]))


def _loss_terms(out, targets, feature_weight, opacity_weight):
    dc = out['color'] - targets.rgb
    df = out['feature'] - targets.feature
    do = out['opacity'] - targets.hit
    per_ray = np.sum(dc * dc, axis=1) + feature_weight * np.sum(df * df, axis=1) + opacity_weight * do * do
    return per_ray, dc, df, do


def _check_batch(rays):
    if len(rays) == 0:
        raise ValueError('Ray batch must not be empty')


def loss(grid, rays, targets, cfg, feature_weight=FEATURE_LOSS_WEIGHT, opacity_weight=OPACITY_LOSS_WEIGHT):
    _check_batch(rays)
    out, _ = _forward(grid, rays, cfg)
    per_ray, _, _, _ = _loss_terms(out, targets, feature_weight, opacity_weight)
    return float(np.mean(per_ray))


def loss_and_gradients(grid, rays, targets, cfg, feature_weight=FEATURE_LOSS_WEIGHT,
                       opacity_weight=OPACITY_LOSS_WEIGHT):
    _check_batch(rays)
    out, c = _forward(grid, rays, cfg)
    per_ray, dc, df, do = _loss_terms(out, targets, feature_weight, opacity_weight)
    n_rays = len(rays)

    g_color_out = 2.0 * dc / n_rays                                # R x 3
    g_feature_out = 2.0 * feature_weight * df / n_rays             # R x D
    g_opacity_out = 2.0 * opacity_weight * do / n_rays             # R

    weights = c['weights']
    # dL/d(sample values)
    g_color = weights[:, :, None] * g_color_out[:, None, :]
    g_feature = weights[:, :, None] * g_feature_out[:, None, :]

    # dL/dw_i
    g_w = (np.einsum('rsc,rc->rs', c['color'], g_color_out) +
           np.einsum('rsc,rc->rs', c['feature'], g_feature_out) +
           g_opacity_out[:, None])
    # dL/ds_k = g_k * T_{k+1} - sum_{i>k} g_i w_i
    trans_next = c['trans'] * (1.0 - c['alpha'])
    gw = g_w * weights
    suffix = np.cumsum(gw[:, ::-1], axis=1)[:, ::-1] - gw
    g_s = g_w * trans_next - suffix
    g_raw = (g_s * c['delta']).reshape(-1) * np.where(c['inside'], sigmoid(c['raw']), 0.0)

    flat, w = c['flat'], c['w']
    n_vertices = int(np.prod(grid.dims))

    def scatter(per_sample, channels):
        acc = np.zeros((n_vertices, channels))
        contrib = w[:, :, None] * per_sample.reshape(-1, 1, channels)
        np.add.at(acc, flat.reshape(-1), contrib.reshape(-1, channels))
        return acc

    grads = GridGradients(density=scatter(g_raw, 1).reshape(grid.dims),
                          color=scatter(g_color, 3).reshape(grid.dims + (3,)),
                          feature=scatter(g_feature, grid.feature_dim).reshape(grid.dims + (grid.feature_dim,)))
    return float(np.mean(per_ray)), grads


def gradients(grid, rays, targets, cfg, feature_weight=FEATURE_LOSS_WEIGHT, opacity_weight=OPACITY_LOSS_WEIGHT):
    return loss_and_gradients(grid, rays, targets, cfg, feature_weight, opacity_weight)[1]


def rays_from_views(views):
    """Every pixel of every view as a ray with rgb, feature and hit-mask targets."""
    origins, dirs, rgb, feats, hits = [], [], [], [], []
    for view in views:
        origin, d, _ = pixel_rays(view.intr, view.pose)
        d = d.reshape(-1, 3)
        origins.append(np.broadcast_to(origin, d.shape))
        dirs.append(d)
        rgb.append(view.rgb.reshape(-1, 3))
        feats.append(view.features.reshape(-1, view.feature_dim))
        hits.append((view.depth > 0).reshape(-1).astype(np.float64))
    rays = RayBatch(np.concatenate(origins), np.concatenate(dirs))
    targets = RayTargets(np.concatenate(rgb), np.concatenate(feats), np.concatenate(hits))
    return rays, targets


@dataclass(frozen=True, eq=False)
class FitResult:
    grid: VoxelFeatureGrid
    trace: list                 # (step, batch loss)
    initial_loss: float         # on the fixed evaluation subset, before any update
    final_loss: float


class _AdamW:
    def __init__(self, params, cfg):
        self._cfg = cfg
        self._m = [np.zeros_like(p) for p in params]
        self._v = [np.zeros_like(p) for p in params]
        self._t = 0

    def step(self, params, grads, lr):
        cfg = self._cfg
        self._t += 1
        bc1 = 1.0 - cfg.beta1 ** self._t
        bc2 = 1.0 - cfg.beta2 ** self._t
        for p, g, m, v in zip(params, grads, self._m, self._v):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p -= lr * (m / bc1 / (np.sqrt(v / bc2) + cfg.eps) + cfg.weight_decay * p)


def fit(grid, views, cfg, ray_cfg):
    if not views:
        raise ValueError('fit() needs at least one view')
    grid = grid.copy()
    rays, targets = rays_from_views(views)
    n_pool = len(rays)
    rng = np.random.default_rng(cfg.seed)
    eval_idx = rng.choice(n_pool, size=min(cfg.eval_rays, n_pool), replace=False)
    eval_rays, eval_targets = rays.subset(eval_idx), targets.subset(eval_idx)

    def eval_loss():
        return loss(grid, eval_rays, eval_targets, ray_cfg, cfg.feature_weight, cfg.opacity_weight)

    initial = eval_loss() if cfg.steps > 0 else float('nan')
    optimizer = _AdamW(grid.parameters(), cfg)
    trace = []
    for step in range(cfg.steps):
        idx = rng.integers(0, n_pool, size=cfg.batch_rays)
        value, grads = loss_and_gradients(grid, rays.subset(idx), targets.subset(idx), ray_cfg,
                                          cfg.feature_weight, cfg.opacity_weight)
        if not math.isfinite(value):
            raise DivergenceError(step, value)
        trace.append((step, value))

        arrays = grads.arrays()
        if cfg.grad_clip_norm is not None:
            norm = grads.global_norm()
            if norm > cfg.grad_clip_norm:
                arrays = [a * (cfg.grad_clip_norm / norm) for a in arrays]
        optimizer.step(grid.parameters(), arrays, cfg.lr_at(step))

        if step % cfg.log_every == 0:
            logger.info('fit step %d/%d loss %.6f lr %.3g', step, cfg.steps, value, cfg.lr_at(step))

    final = eval_loss() if cfg.steps > 0 else float('nan')
    if cfg.steps > 0:
        if not math.isfinite(final):
            raise DivergenceError(cfg.steps, final)
        logger.info('fit done: eval loss %.6f -> %.6f', initial, final)
    return FitResult(grid=grid, trace=trace, initial_loss=initial, final_loss=final)


def sample_points(grid, threshold=1.0):
    """Vertices whose activated density exceeds the threshold, with their features."""
    keep = softplus(grid.density) > threshold
    return PointFeatureCloud(grid.vertex_positions()[keep], grid.feature[keep])


def write_loss_trace(path, trace):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['step', 'loss'])
        for step, value in trace:
            writer.writerow([step, '%.9g' % value])
