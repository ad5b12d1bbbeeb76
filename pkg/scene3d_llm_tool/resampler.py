#
# Copyright (C) 2026  scene3d_llm_tool developers
#
# This software is distributed under the terms of the MIT License.
#

"""
Latent-bottleneck resampler: a fixed set of learned latents cross-attends to a variable number of
point features and comes out as a K x D array regardless of the input count.

Each layer is pre-norm: latents += W_o . attention(LN(latents) W_q, LN(x) W_k, LN(x) W_v),
then latents += MLP(LN(latents)) with a GELU hidden layer four times wider. Single head.
Rows are vectors, so every projection is x @ W.
"""

import math
from collections import OrderedDict
from dataclasses import dataclass
from logging import getLogger

import numpy as np

from . import tensorfile


logger = getLogger(__name__)

DEFAULT_LATENTS = 32
DEFAULT_LAYERS = 2
INIT_STD = 0.02
LN_EPS = 1e-5

_GELU_C = math.sqrt(2.0 / math.pi)


class EmptyInputError(ValueError):
    pass


class InvalidInputError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, step, value):
        super(DivergenceError, self).__init__('Loss became non-finite (%r) at step %d' % (value, step))
        self.step = step


class ResamplerParams:
    def __init__(self, arrays, n_latents, d_model, n_layers, d_input, seed=None):
        self.arrays = OrderedDict(arrays)
        self.n_latents = n_latents
        self.d_model = d_model
        self.n_layers = n_layers
        self.d_input = d_input
        self.seed = seed
        expected = self._shapes(n_latents, d_model, n_layers, d_input)
        if list(expected.keys()) != list(self.arrays.keys()):
            raise ValueError('Parameter names do not match the architecture')
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ValueError('Parameter %s has shape %r, expected %r' % (name, self.arrays[name].shape, shape))
            if not np.all(np.isfinite(self.arrays[name])):
                raise ValueError('Parameter %s is not finite' % name)

    @staticmethod
    def _shapes(k, d, n_layers, d_input):
        shapes = OrderedDict(latents=(k, d))
        if d_input != d:
            shapes['input_proj.weight'] = (d_input, d)
            shapes['input_proj.bias'] = (d,)
        for i in range(n_layers):
            p = 'layer%d.' % i
            for norm in ('norm_latents', 'norm_inputs'):
                shapes[p + norm + '.weight'] = (d,)
                shapes[p + norm + '.bias'] = (d,)
            for proj in ('q', 'k', 'v', 'o'):
                shapes[p + 'attn.' + proj] = (d, d)
            shapes[p + 'norm_mlp.weight'] = (d,)
            shapes[p + 'norm_mlp.bias'] = (d,)
            shapes[p + 'mlp.fc1.weight'] = (d, 4 * d)
            shapes[p + 'mlp.fc1.bias'] = (4 * d,)
            shapes[p + 'mlp.fc2.weight'] = (4 * d, d)
            shapes[p + 'mlp.fc2.bias'] = (d,)
        return shapes

    @staticmethod
    def init(d_model, n_latents=DEFAULT_LATENTS, n_layers=DEFAULT_LAYERS, d_input=None, seed=0):
        """Latents and projections from a seeded Gaussian (std 0.02); norms start at identity, biases at zero."""
        d_input = d_input or d_model
        rng = np.random.default_rng(seed)
        arrays = OrderedDict()
        for name, shape in ResamplerParams._shapes(n_latents, d_model, n_layers, d_input).items():
            if name.endswith('norm_latents.weight') or name.endswith('norm_inputs.weight') or \
                    name.endswith('norm_mlp.weight'):
                arrays[name] = np.ones(shape)
            elif name.endswith('bias'):
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = rng.normal(0.0, INIT_STD, size=shape)
        return ResamplerParams(arrays, n_latents, d_model, n_layers, d_input, seed)

    def copy(self):
        return ResamplerParams(OrderedDict((k, v.copy()) for k, v in self.arrays.items()),
                               self.n_latents, self.d_model, self.n_layers, self.d_input, self.seed)

    def __getitem__(self, name):
        return self.arrays[name]

    def manifest(self):
        return dict(K=self.n_latents, D=self.d_model, L=self.n_layers, d_input=self.d_input, seed=self.seed,
                    params=[[name, list(a.shape)] for name, a in self.arrays.items()])

    def save(self, path):
        flat = np.concatenate([a.reshape(-1) for a in self.arrays.values()])
        tensorfile.write_tensor(path, flat)
        tensorfile.write_sidecar(tensorfile.sidecar_path(path), self.manifest())

    @staticmethod
    def load(path):
        meta = tensorfile.read_sidecar(tensorfile.sidecar_path(path))
        flat = tensorfile.read_tensor(path).astype(np.float64)
        arrays = OrderedDict()
        offset = 0
        for name, shape in meta['params']:
            size = int(np.prod(shape))
            arrays[name] = flat[offset:offset + size].reshape(shape).copy()
            offset += size
        return ResamplerParams(arrays, meta['K'], meta['D'], meta['L'], meta['d_input'], meta.get('seed'))


@dataclass(frozen=True, eq=False)
class ResamplerOutput:
    values: np.ndarray          # K x D
    attention: list             # per layer, K x N rows summing to 1


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_backward(dy, g, cache):
    xhat, inv = cache
    dg = np.sum(dy * xhat, axis=0)
    db = np.sum(dy, axis=0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) -
                xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    return dx, dg, db


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def _gelu_grad(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def softmax(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_inputs(params, inputs):
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2:
        raise InvalidInputError('Inputs must be N x D, got shape %r' % (inputs.shape,))
    if inputs.shape[0] == 0:
        raise EmptyInputError('Resampler needs at least one input row')
    if inputs.shape[1] != params.d_input:
        raise InvalidInputError('Inputs are %d-dim, resampler expects %d' % (inputs.shape[1], params.d_input))
    if not np.all(np.isfinite(inputs)):
        raise InvalidInputError('Inputs contain non-finite values')
    return inputs


def _forward(params, inputs):
    p = params.arrays
    x = inputs
    if 'input_proj.weight' in p:
        x = inputs @ p['input_proj.weight'] + p['input_proj.bias']
    z = p['latents']
    scale = 1.0 / math.sqrt(params.d_model)
    caches = []
    attention = []
    for i in range(params.n_layers):
        pre = 'layer%d.' % i
        hq, ln_q = _layer_norm(z, p[pre + 'norm_latents.weight'], p[pre + 'norm_latents.bias'])
        hx, ln_x = _layer_norm(x, p[pre + 'norm_inputs.weight'], p[pre + 'norm_inputs.bias'])
        q = hq @ p[pre + 'attn.q']
        k = hx @ p[pre + 'attn.k']
        v = hx @ p[pre + 'attn.v']
        a = softmax(q @ k.T * scale)
        o = a @ v
        z = z + o @ p[pre + 'attn.o']

        hm, ln_m = _layer_norm(z, p[pre + 'norm_mlp.weight'], p[pre + 'norm_mlp.bias'])
        pre_act = hm @ p[pre + 'mlp.fc1.weight'] + p[pre + 'mlp.fc1.bias']
        act = gelu(pre_act)
        z = z + act @ p[pre + 'mlp.fc2.weight'] + p[pre + 'mlp.fc2.bias']

        attention.append(a)
        caches.append(dict(hq=hq, ln_q=ln_q, hx=hx, ln_x=ln_x, q=q, k=k, v=v, a=a, o=o,
                           hm=hm, ln_m=ln_m, pre_act=pre_act, act=act))
    return z, x, attention, caches


def forward(params, inputs):
    inputs = _check_inputs(params, inputs)
    z, _, attention, _ = _forward(params, inputs)
    return ResamplerOutput(values=z, attention=attention)


def backward(params, inputs, upstream):
    """Reverse-mode gradients of sum(upstream * forward(inputs).values). Returns (param grads, input grads)."""
    inputs = _check_inputs(params, inputs)
    p = params.arrays
    _, x, _, caches = _forward(params, inputs)
    scale = 1.0 / math.sqrt(params.d_model)
    grads = OrderedDict((name, np.zeros_like(a)) for name, a in p.items())
    dz = np.array(upstream, dtype=np.float64).reshape(params.n_latents, params.d_model)
    dx = np.zeros_like(x)

    for i in reversed(range(params.n_layers)):
        pre = 'layer%d.' % i
        c = caches[i]

        # MLP sublayer
        grads[pre + 'mlp.fc2.bias'] += dz.sum(axis=0)
        grads[pre + 'mlp.fc2.weight'] += c['act'].T @ dz
        d_act = dz @ p[pre + 'mlp.fc2.weight'].T
        d_pre = d_act * _gelu_grad(c['pre_act'])
        grads[pre + 'mlp.fc1.bias'] += d_pre.sum(axis=0)
        grads[pre + 'mlp.fc1.weight'] += c['hm'].T @ d_pre
        d_hm = d_pre @ p[pre + 'mlp.fc1.weight'].T
        d_z, d_g, d_b = _layer_norm_backward(d_hm, p[pre + 'norm_mlp.weight'], c['ln_m'])
        grads[pre + 'norm_mlp.weight'] += d_g
        grads[pre + 'norm_mlp.bias'] += d_b
        dz = dz + d_z

        # Attention sublayer
        grads[pre + 'attn.o'] += c['o'].T @ dz
        d_o = dz @ p[pre + 'attn.o'].T
        a = c['a']
        d_a = d_o @ c['v'].T
        d_v = a.T @ d_o
        d_s = a * (d_a - np.sum(d_a * a, axis=1, keepdims=True)) * scale
        d_q = d_s @ c['k']
        d_k = d_s.T @ c['q']
        grads[pre + 'attn.q'] += c['hq'].T @ d_q
        grads[pre + 'attn.k'] += c['hx'].T @ d_k
        grads[pre + 'attn.v'] += c['hx'].T @ d_v
        d_hq = d_q @ p[pre + 'attn.q'].T
        d_hx = d_k @ p[pre + 'attn.k'].T + d_v @ p[pre + 'attn.v'].T

        d_zq, d_g, d_b = _layer_norm_backward(d_hq, p[pre + 'norm_latents.weight'], c['ln_q'])
        grads[pre + 'norm_latents.weight'] += d_g
        grads[pre + 'norm_latents.bias'] += d_b
        dz = dz + d_zq

        d_xn, d_g, d_b = _layer_norm_backward(d_hx, p[pre + 'norm_inputs.weight'], c['ln_x'])
        grads[pre + 'norm_inputs.weight'] += d_g
        grads[pre + 'norm_inputs.bias'] += d_b
        dx += d_xn

    grads['latents'] += dz
    if 'input_proj.weight' in p:
        grads['input_proj.weight'] += inputs.T @ dx
        grads['input_proj.bias'] += dx.sum(axis=0)
        d_inputs = dx @ p['input_proj.weight'].T
    else:
        d_inputs = dx
    return grads, d_inputs


def mse_loss_and_gradients(params, dataset):
    """Mean squared error averaged over every output element of every example."""
    total = 0.0
    grads = OrderedDict((name, np.zeros_like(a)) for name, a in params.arrays.items())
    for inputs, target in dataset:
        values = forward(params, inputs).values
        diff = values - target
        total += float(np.mean(diff * diff))
        g, _ = backward(params, inputs, 2.0 * diff / (diff.size * len(dataset)))
        for name in grads:
            grads[name] += g[name]
    return total / len(dataset), grads


def train_probe(params, dataset, steps, lr, seed=0, batch_size=None, clip_norm=None, log_every=200):
    """
    Plain gradient descent on mean squared error. Full-batch by default; with batch_size set, each step
    draws a seeded random batch. Returns (fitted params, [(step, loss)]).
    """
    if not dataset:
        raise ValueError('train_probe needs a non-empty dataset')
    params = params.copy()
    rng = np.random.default_rng(seed)
    trace = []
    for step in range(steps):
        batch = dataset
        if batch_size is not None and batch_size < len(dataset):
            batch = [dataset[i] for i in rng.choice(len(dataset), size=batch_size, replace=False)]
        value, grads = mse_loss_and_gradients(params, batch)
        if not math.isfinite(value):
            raise DivergenceError(step, value)
        trace.append((step, value))
        if clip_norm is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > clip_norm:
                for g in grads.values():
                    g *= clip_norm / norm
        for name, g in grads.items():
            params.arrays[name] -= lr * g
        if step % log_every == 0:
            logger.info('train_probe step %d/%d loss %.6f', step, steps, value)
    return params, trace
