#
# Copyright (C) 2026  scene3d_llm_tool developers
#
# This software is distributed under the terms of the MIT License.
#

"""
3D localization: sinusoidal position embeddings over x/y/z and the location-token codec that turns
box corners into `<loc_k>` vocabulary symbols appended after a backbone vocabulary.
"""

import re
from dataclasses import dataclass
from logging import getLogger

import numpy as np

from .extractor import DimensionMismatchError
from .geometry import Aabb


logger = getLogger(__name__)

COMBINE_ADD = 'add'
COMBINE_CONCAT = 'concat'

DEFAULT_BINS = 256
DEFAULT_BASE_VOCAB = 32000

TOKENS_PER_BOX = 6

_TOKEN_PREFIX = '<loc_'
_TOKEN_RUN = re.compile(r'(?:<loc_\d+>){6}')


class LocationOutOfBoundsError(ValueError):
    pass


class InvalidTokenError(ValueError):
    pass


class LocationParseError(ValueError):
    def __init__(self, message, offset):
        super(LocationParseError, self).__init__('%s at byte offset %d' % (message, offset))
        self.offset = offset


@dataclass(frozen=True)
class PosEmbedConfig:
    d_v: int
    scale_min: float = 0.1
    scale_max: float = 100.0
    combine: str = COMBINE_ADD

    def __post_init__(self):
        if self.per_axis < 2:
            raise ValueError('d_v=%r leaves fewer than 2 embedding components per axis' % self.d_v)
        if not (0 < self.scale_min < self.scale_max):
            raise ValueError('Expected 0 < scale_min < scale_max, got %r, %r' % (self.scale_min, self.scale_max))
        if self.combine not in (COMBINE_ADD, COMBINE_CONCAT):
            raise ValueError('combine must be %r or %r, got %r' % (COMBINE_ADD, COMBINE_CONCAT, self.combine))

    @property
    def per_axis(self):
        """Largest even integer not above d_v / 3."""
        n = self.d_v // 3
        return n - (n % 2)

    @property
    def padding(self):
        return self.d_v - 3 * self.per_axis

    @property
    def frequencies(self):
        n = self.per_axis // 2
        lo, hi = 2 * np.pi / self.scale_max, 2 * np.pi / self.scale_min
        if n == 1:
            return np.array([lo])
        return lo * (hi / lo) ** (np.arange(n) / (n - 1))

    @property
    def output_dim(self):
        return self.d_v if self.combine == COMBINE_ADD else 2 * self.d_v


def position_embeddings(points, cfg):
    """N x 3 points to N x d_v embeddings: per axis interleaved (sin, cos) pairs, then zero padding."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    phase = points[:, :, None] * cfg.frequencies[None, None, :]              # N x 3 x F
    pairs = np.stack([np.sin(phase), np.cos(phase)], axis=-1)               # N x 3 x F x 2
    emb = pairs.reshape(points.shape[0], 3 * cfg.per_axis)
    if cfg.padding:
        emb = np.concatenate([emb, np.zeros((points.shape[0], cfg.padding))], axis=1)
    return emb


def position_embedding(point, cfg):
    return position_embeddings(np.asarray(point).reshape(1, 3), cfg)[0]


def augment_features(features, positions, cfg):
    features = np.asarray(features, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64)
    if features.ndim != 2 or positions.ndim != 2 or features.shape[0] != positions.shape[0]:
        raise DimensionMismatchError('Features %r and positions %r disagree on row count' %
                                     (features.shape, positions.shape))
    if features.shape[1] != cfg.d_v:
        raise DimensionMismatchError('Features are %d-dim, config expects %d' % (features.shape[1], cfg.d_v))
    emb = position_embeddings(positions, cfg)
    if cfg.combine == COMBINE_ADD:
        return features + emb
    return np.concatenate([features, emb], axis=1)


@dataclass(frozen=True, eq=False)
class LocTokenConfig:
    scene_bounds: Aabb
    bins: int = DEFAULT_BINS
    base_vocab: int = DEFAULT_BASE_VOCAB

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError('bins must be at least 2, got %r' % self.bins)
        if self.scene_bounds.is_degenerate:
            raise ValueError('Scene bounds %r are degenerate' % self.scene_bounds)
        if self.base_vocab < 0:
            raise ValueError('base_vocab must not be negative')

    @property
    def bin_width(self):
        return self.scene_bounds.extent / self.bins


@dataclass(frozen=True)
class LocTokenSequence:
    ids: tuple          # <x_min, y_min, z_min, x_max, y_max, z_max>
    base_vocab: int = DEFAULT_BASE_VOCAB
    bins: int = DEFAULT_BINS

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        if len(ids) != TOKENS_PER_BOX:
            raise InvalidTokenError('Expected %d location tokens, got %d' % (TOKENS_PER_BOX, len(ids)))
        for i in ids:
            if not (self.base_vocab <= i < self.base_vocab + self.bins):
                raise InvalidTokenError('Token id %d is outside the location range [%d, %d)' %
                                        (i, self.base_vocab, self.base_vocab + self.bins))
        object.__setattr__(self, 'ids', ids)

    @property
    def bin_indices(self):
        return tuple(i - self.base_vocab for i in self.ids)

    @staticmethod
    def from_bins(bins_, cfg):
        return LocTokenSequence(tuple(cfg.base_vocab + int(b) for b in bins_), cfg.base_vocab, cfg.bins)


def encode_location(aabb, cfg):
    bounds = cfg.scene_bounds
    if not aabb.intersects(bounds):
        raise LocationOutOfBoundsError('Box %r lies outside scene bounds %r' % (aabb, bounds))
    corners = np.concatenate([aabb.min, aabb.max])
    lo = np.tile(bounds.min, 2)
    ext = np.tile(bounds.extent, 2)
    b = np.clip(np.floor((corners - lo) / ext * cfg.bins), 0, cfg.bins - 1).astype(np.int64)
    return LocTokenSequence.from_bins(b.tolist(), cfg)


def decode_location(tokens, cfg):
    for i in tokens.ids:
        if not (cfg.base_vocab <= i < cfg.base_vocab + cfg.bins):
            raise InvalidTokenError('Token id %d is not a location token for this config' % i)
    b = np.array(tokens.ids, dtype=np.float64) - cfg.base_vocab
    lo = np.tile(cfg.scene_bounds.min, 2)
    ext = np.tile(cfg.scene_bounds.extent, 2)
    coords = lo + (b + 0.5) / cfg.bins * ext
    mins, maxs = coords[:3], coords[3:]
    return Aabb(np.minimum(mins, maxs), np.maximum(mins, maxs))


def render_location_text(tokens):
    return ''.join('%s%d>' % (_TOKEN_PREFIX, b) for b in tokens.bin_indices)


def parse_location_text(text, bins=DEFAULT_BINS, base_vocab=DEFAULT_BASE_VOCAB):
    """Exact inverse of render_location_text; errors carry the UTF-8 byte offset of the problem."""
    def fail(message, pos):
        raise LocationParseError(message, len(text[:pos].encode('utf-8')))

    pos = 0
    values = []
    while pos < len(text):
        if len(values) == TOKENS_PER_BOX:
            fail('Trailing text after %d location tokens' % TOKENS_PER_BOX, pos)
        if not text.startswith(_TOKEN_PREFIX, pos):
            fail('Expected %r' % _TOKEN_PREFIX, pos)
        pos += len(_TOKEN_PREFIX)
        start = pos
        while pos < len(text) and text[pos] in '0123456789':
            pos += 1
        if pos == start:
            fail('Expected a decimal bin index', pos)
        value = int(text[start:pos])
        if value >= bins:
            fail('Bin %d is not below %d' % (value, bins), start)
        if pos >= len(text) or text[pos] != '>':
            fail("Expected '>'", pos)
        pos += 1
        values.append(value)
    if len(values) != TOKENS_PER_BOX:
        fail('Expected %d location tokens, got %d' % (TOKENS_PER_BOX, len(values)), pos)
    return LocTokenSequence(tuple(base_vocab + v for v in values), base_vocab, bins)


def find_location_sequences(text, bins=DEFAULT_BINS, base_vocab=DEFAULT_BASE_VOCAB):
    """All six-token runs embedded in free text, in order of appearance."""
    return [parse_location_text(m.group(0), bins, base_vocab) for m in _TOKEN_RUN.finditer(text)]


@dataclass(frozen=True, eq=False)
class VocabAugmentation:
    base_vocab: int
    bins: int

    @property
    def total_vocab(self):
        return self.base_vocab + self.bins

    @property
    def trainable_mask(self):
        mask = np.zeros(self.total_vocab, dtype=bool)
        mask[self.base_vocab:] = True
        return mask

    def token_id(self, bin_index):
        if not 0 <= bin_index < self.bins:
            raise InvalidTokenError('Bin %d out of range' % bin_index)
        return self.base_vocab + bin_index


def augment_vocabulary(cfg):
    return VocabAugmentation(base_vocab=cfg.base_vocab, bins=cfg.bins)


def extend_embeddings(base_matrix, augmentation, seed=0, std=0.02):
    """Appends seeded Gaussian rows for the location tokens to a base_vocab x E embedding matrix."""
    base_matrix = np.asarray(base_matrix, dtype=np.float64)
    if base_matrix.shape[0] != augmentation.base_vocab:
        raise DimensionMismatchError('Embedding matrix has %d rows, base vocabulary is %d' %
                                     (base_matrix.shape[0], augmentation.base_vocab))
    rng = np.random.default_rng(seed)
    extra = rng.normal(0.0, std, size=(augmentation.bins, base_matrix.shape[1]))
    return np.concatenate([base_matrix, extra], axis=0)


def masked_update(matrix, grad, augmentation, lr):
    """Gradient step restricted to the trainable (location-token) rows; base rows stay frozen."""
    mask = augmentation.trainable_mask
    if matrix.shape[0] != mask.shape[0] or grad.shape != matrix.shape:
        raise DimensionMismatchError('Matrix %r / gradient %r do not match vocabulary of %d' %
                                     (matrix.shape, grad.shape, mask.shape[0]))
    return matrix - lr * grad * mask[:, None]
