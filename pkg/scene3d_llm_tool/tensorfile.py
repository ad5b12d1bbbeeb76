#
# Copyright (C) 2026  scene3d_llm_tool developers
#
# This software is distributed under the terms of the MIT License.
#

"""
Minimal tensor container used for every array artifact:

    magic   4 bytes  b'F3DT'
    version u16      little-endian
    rank    u16      little-endian
    dims    rank x u64
    payload product(dims) little-endian float32, row-major
"""

import json
import os
import struct
from logging import getLogger

import numpy as np


logger = getLogger(__name__)

MAGIC = b'F3DT'
VERSION = 1

_HEADER = struct.Struct('<4sHH')
_DIM = struct.Struct('<Q')


class TensorFileError(ValueError):
    pass


def encode_tensor(array):
    array = np.ascontiguousarray(array, dtype='<f4')
    out = bytearray(_HEADER.pack(MAGIC, VERSION, array.ndim))
    for d in array.shape:
        out += _DIM.pack(d)
    out += array.tobytes(order='C')
    return bytes(out)


def decode_tensor(blob):
    if len(blob) < _HEADER.size:
        raise TensorFileError('Tensor blob is too short (%d bytes)' % len(blob))
    magic, version, rank = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise TensorFileError('Bad magic %r' % magic)
    if version != VERSION:
        raise TensorFileError('Unsupported tensor file version %d' % version)
    offset = _HEADER.size
    if len(blob) < offset + rank * _DIM.size:
        raise TensorFileError('Truncated header: rank %d' % rank)
    dims = []
    for _ in range(rank):
        d, = _DIM.unpack_from(blob, offset)
        dims.append(d)
        offset += _DIM.size
    expected = int(np.prod(dims, dtype=np.uint64)) * 4
    if len(blob) - offset != expected:
        raise TensorFileError('Payload is %d bytes, expected %d for dims %r' % (len(blob) - offset, expected, dims))
    return np.frombuffer(blob, dtype='<f4', offset=offset).reshape(dims).copy()


def write_tensor(path, array):
    with open(path, 'wb') as f:
        f.write(encode_tensor(array))
    logger.debug('Wrote tensor %r shape %r', path, np.shape(array))


def read_tensor(path):
    with open(path, 'rb') as f:
        blob = f.read()
    try:
        return decode_tensor(blob)
    except TensorFileError as ex:
        raise TensorFileError('%s: %s' % (path, ex)) from ex


def write_sidecar(path, meta):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write('\n')


def read_sidecar(path):
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def sidecar_path(tensor_path):
    return os.path.splitext(tensor_path)[0] + '.json'


def dump_tensor(path, max_values=64):
    """Human-readable dump of a tensor file header and its first values."""
    array = read_tensor(path)
    lines = ['%s: rank %d dims %s' % (path, array.ndim, list(array.shape))]
    flat = array.reshape(-1)
    shown = flat[:max_values]
    lines.append(' '.join('%.6g' % x for x in shown))
    if flat.size > max_values:
        lines.append('... (%d more)' % (flat.size - max_values))
    return '\n'.join(lines)
