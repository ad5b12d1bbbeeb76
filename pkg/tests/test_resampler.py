#
# Copyright (C) 2026  scene3d_llm_tool developers
#
# This software is distributed under the terms of the MIT License.
#

import math

import numpy as np
import pytest

from scene3d_llm_tool.resampler import ResamplerParams, forward, backward, mse_loss_and_gradients, train_probe, \
    EmptyInputError, InvalidInputError, DivergenceError


def _oracle_forward(params, inputs):
    """Row-by-row reference implementation."""
    p = params.arrays
    d = params.d_model

    def norm_rows(m, g, b):
        out = np.empty_like(m)
        for r, row in enumerate(m):
            mean = sum(row) / len(row)
            var = sum((v - mean) ** 2 for v in row) / len(row)
            out[r] = [(v - mean) / math.sqrt(var + 1e-5) for v in row]
        return out * g + b

    def gelu(v):
        return 0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v ** 3)))

    x = inputs
    if 'input_proj.weight' in p:
        x = inputs @ p['input_proj.weight'] + p['input_proj.bias']
    z = p['latents'].copy()
    for i in range(params.n_layers):
        pre = 'layer%d.' % i
        hq = norm_rows(z, p[pre + 'norm_latents.weight'], p[pre + 'norm_latents.bias'])
        hx = norm_rows(x, p[pre + 'norm_inputs.weight'], p[pre + 'norm_inputs.bias'])
        q, k, v = hq @ p[pre + 'attn.q'], hx @ p[pre + 'attn.k'], hx @ p[pre + 'attn.v']
        attended = np.zeros_like(z)
        for r in range(len(z)):
            scores = [math.exp(float(q[r] @ k[n]) / math.sqrt(d)) for n in range(len(x))]
            total = sum(scores)
            for n in range(len(x)):
                attended[r] += scores[n] / total * v[n]
        z = z + attended @ p[pre + 'attn.o']
        hm = norm_rows(z, p[pre + 'norm_mlp.weight'], p[pre + 'norm_mlp.bias'])
        hidden = np.vectorize(gelu)(hm @ p[pre + 'mlp.fc1.weight'] + p[pre + 'mlp.fc1.bias'])
        z = z + hidden @ p[pre + 'mlp.fc2.weight'] + p[pre + 'mlp.fc2.bias']
    return z


def _perturbed(seed, **kwargs):
    """Initialised params with every array jittered, so norms and biases are not at their identity values."""
    params = ResamplerParams.init(seed=seed, **kwargs)
    rng = np.random.default_rng(seed + 100)
    for a in params.arrays.values():
        a += rng.normal(0, 0.3, size=a.shape)
    return params


@pytest.mark.parametrize('n', [1, 7, 100])
def test_output_shape_independent_of_input_count(n):
    params = ResamplerParams.init(d_model=8, n_latents=4, d_input=5)
    out = forward(params, np.random.default_rng(n).normal(size=(n, 5)))
    assert out.values.shape == (4, 8)
    assert len(out.attention) == 2
    for a in out.attention:
        assert a.shape == (4, n)
        np.testing.assert_allclose(a.sum(axis=1), 1.0)


def test_input_order_does_not_matter():
    params = _perturbed(1, d_model=8, n_latents=4)
    x = np.random.default_rng(2).normal(size=(9, 8))
    perm = np.random.default_rng(3).permutation(9)
    np.testing.assert_allclose(forward(params, x[perm]).values, forward(params, x).values, atol=1e-12)


def test_forward_matches_oracle():
    params = _perturbed(4, d_model=8, n_latents=4, d_input=6)
    x = np.random.default_rng(5).normal(size=(16, 6))
    np.testing.assert_allclose(forward(params, x).values, _oracle_forward(params, x), atol=1e-9)


def test_input_validation():
    params = ResamplerParams.init(d_model=8, n_latents=4)
    with pytest.raises(EmptyInputError):
        forward(params, np.zeros((0, 8)))
    with pytest.raises(InvalidInputError):
        forward(params, np.zeros((3, 7)))
    with pytest.raises(InvalidInputError):
        forward(params, np.full((3, 8), np.nan))
    with pytest.raises(InvalidInputError):
        forward(params, np.zeros(8))


def test_init_layout_and_determinism():
    params = ResamplerParams.init(d_model=8, n_latents=4, n_layers=1, d_input=3, seed=9)
    assert list(params.arrays)[:3] == ['latents', 'input_proj.weight', 'input_proj.bias']
    assert params['layer0.mlp.fc1.weight'].shape == (8, 32)
    np.testing.assert_array_equal(params['layer0.norm_mlp.weight'], 1.0)
    np.testing.assert_array_equal(params['layer0.attn.q'], ResamplerParams.init(8, 4, 1, 3, seed=9)['layer0.attn.q'])
    assert 'input_proj.weight' not in ResamplerParams.init(d_model=8, n_latents=4).arrays


def test_zero_upstream_gives_zero_gradients():
    params = _perturbed(6, d_model=8, n_latents=4)
    x = np.random.default_rng(7).normal(size=(5, 8))
    grads, d_inputs = backward(params, x, np.zeros((4, 8)))
    for g in grads.values():
        assert not np.any(g)
    assert not np.any(d_inputs)


def test_gradients_match_finite_differences():
    params = _perturbed(8, d_model=4, n_latents=3, d_input=5)
    rng = np.random.default_rng(9)
    x = rng.normal(size=(6, 5))
    upstream = rng.normal(size=(3, 4))
    grads, d_inputs = backward(params, x, upstream)

    def objective():
        return float(np.sum(upstream * forward(params, x).values))

    eps = 1e-6
    for name, array in params.arrays.items():
        flat = array.reshape(-1)
        for i in rng.choice(flat.size, size=min(flat.size, 4), replace=False):
            saved = flat[i]
            flat[i] = saved + eps
            plus = objective()
            flat[i] = saved - eps
            minus = objective()
            flat[i] = saved
            assert grads[name].reshape(-1)[i] == pytest.approx((plus - minus) / (2 * eps), rel=1e-4, abs=1e-7), name

    for r, c in [(0, 0), (3, 2), (5, 4)]:
        bumped = x.copy()
        bumped[r, c] += eps
        plus = float(np.sum(upstream * forward(params, bumped).values))
        bumped[r, c] -= 2 * eps
        minus = float(np.sum(upstream * forward(params, bumped).values))
        assert d_inputs[r, c] == pytest.approx((plus - minus) / (2 * eps), rel=1e-4, abs=1e-7)


def test_invariant_to_fifty_row_permutations():
    params = _perturbed(10, d_model=8, n_latents=4, d_input=6)
    rng = np.random.default_rng(11)
    x = rng.normal(size=(24, 6))
    reference = forward(params, x)
    for _ in range(50):
        perm = rng.permutation(len(x))
        out = forward(params, x[perm])
        assert np.max(np.abs(out.values - reference.values)) < 1e-9
        for a, b in zip(out.attention, reference.attention):
            np.testing.assert_allclose(a, b[:, perm], atol=1e-12)


def test_large_input_set():
    params = _perturbed(12, d_model=8, n_latents=4, d_input=3)
    rng = np.random.default_rng(13)
    x = rng.normal(size=(5000, 3))
    out = forward(params, x)
    assert out.values.shape == (4, 8)
    assert np.all(np.isfinite(out.values))
    for a in out.attention:
        assert a.shape == (4, 5000)
        np.testing.assert_allclose(a.sum(axis=1), 1.0)
    perm = rng.permutation(5000)
    assert np.max(np.abs(forward(params, x[perm]).values - out.values)) < 1e-9


def test_duplicate_rows_get_equal_gradients():
    params = _perturbed(14, d_model=4, n_latents=3, d_input=5)
    rng = np.random.default_rng(15)
    x = rng.normal(size=(6, 5))
    x[4] = x[1]
    upstream = rng.normal(size=(3, 4))
    _, d_inputs = backward(params, x, upstream)
    np.testing.assert_allclose(d_inputs[4], d_inputs[1], atol=1e-12)

    eps = 1e-6
    for r in (1, 4):
        for c in range(5):
            bumped = x.copy()
            bumped[r, c] += eps
            plus = float(np.sum(upstream * forward(params, bumped).values))
            bumped[r, c] -= 2 * eps
            minus = float(np.sum(upstream * forward(params, bumped).values))
            assert d_inputs[r, c] == pytest.approx((plus - minus) / (2 * eps), rel=1e-4, abs=1e-7)


def _mean_projection_task(n_examples=20, n_points=16, k=4, d=8, seed=0):
    rng = np.random.default_rng(seed)
    m = rng.normal(0, 1 / math.sqrt(d), size=(d, d))
    dataset = []
    for _ in range(n_examples):
        x = rng.normal(3.0, 1.0, size=(n_points, d))
        dataset.append((x, np.tile(x.mean(axis=0) @ m, (k, 1))))
    return dataset


def test_probe_zero_steps():
    params = ResamplerParams.init(d_model=8, n_latents=4)
    fitted, trace = train_probe(params, _mean_projection_task(n_examples=2), steps=0, lr=0.1)
    assert trace == []
    for name in params.arrays:
        np.testing.assert_array_equal(fitted[name], params[name])


def test_probe_loss_matches_trace():
    params = ResamplerParams.init(d_model=8, n_latents=4)
    dataset = _mean_projection_task(n_examples=3)
    initial, _ = mse_loss_and_gradients(params, dataset)
    _, trace = train_probe(params, dataset, steps=2, lr=0.1)
    assert trace[0] == (0, pytest.approx(initial))
    assert trace[1][1] < trace[0][1]


def test_probe_divergence_names_step():
    params = ResamplerParams.init(d_model=8, n_latents=4)
    dataset = _mean_projection_task(n_examples=2)
    with pytest.raises(DivergenceError) as info:
        train_probe(params, dataset, steps=50, lr=1e200)
    assert info.value.step > 0


@pytest.mark.slow
def test_probe_learns_mean_projection():
    params = ResamplerParams.init(d_model=8, n_latents=4, seed=0)
    _, trace = train_probe(params, _mean_projection_task(), steps=2000, lr=0.2, log_every=500)
    assert trace[-1][1] <= 0.1 * trace[0][1]


def test_params_save_load(tmp_path):
    params = _perturbed(10, d_model=8, n_latents=4, d_input=3)
    path = str(tmp_path / 'resampler.f3dt')
    params.save(path)
    restored = ResamplerParams.load(path)
    assert restored.manifest() == params.manifest()
    for name in params.arrays:
        np.testing.assert_allclose(restored[name], params[name], atol=1e-6)
