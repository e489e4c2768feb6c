"""Aggregated memory -> per-layer KV prefixes for the frozen decoder."""

import numpy as np
import pytest

from cmt import autodiff as ad
from cmt.alignment import align, align_states, init_align_params
from cmt.config import ModelConfig

CFG = ModelConfig()


def _params(seed=0, cfg=CFG):
    return init_align_params(np.random.default_rng(seed), cfg)


def test_prefix_shapes():
    rng = np.random.default_rng(0)
    params = _params()
    mstar = rng.standard_normal((CFG.k, CFG.d_model)).astype(np.float32)
    pfx = align(params, CFG, mstar)
    assert pfx.n_layers == CFG.n_layers and pfx.p == CFG.prefix_len
    for key, value in pfx.layers:
        assert key.shape == (CFG.prefix_len, CFG.n_heads, CFG.head_dim)
        assert value.shape == key.shape and key.dtype == np.float32


def test_layers_and_roles_differ():
    rng = np.random.default_rng(1)
    params = _params()
    pfx = align(params, CFG, rng.standard_normal((CFG.k, CFG.d_model)).astype(np.float32))
    (k0, v0), (k1, v1) = pfx.layers
    assert not np.array_equal(k0, v0)
    assert not np.array_equal(k0, k1)
    assert not np.array_equal(v0, v1)


def test_zero_memory_yields_bias_pattern():
    # with M* = 0 the attention block contributes nothing; head biases remain
    rng = np.random.default_rng(2)
    params = _params()
    pfx = align(params, CFG, np.zeros((CFG.k, CFG.d_model), dtype=np.float32))
    rows = pfx.layers[0][0].reshape(CFG.prefix_len, -1)
    np.testing.assert_array_equal(rows, np.tile(rows[:1], (CFG.prefix_len, 1)))


def test_prefix_longer_than_k_tiles_rows():
    rng = np.random.default_rng(3)
    cfg = ModelConfig(prefix_len=11)  # p > k exercises cyclic row reuse
    params = _params(cfg=cfg)
    mstar = rng.standard_normal((cfg.k, cfg.d_model)).astype(np.float32)
    pfx = align(params, cfg, mstar)
    assert pfx.p == 11
    for key, _ in pfx.layers:
        assert np.array_equal(key[0], key[cfg.k])  # row p reuses row p mod k


def test_input_validation():
    params = _params()
    with pytest.raises(ValueError):
        align(params, CFG, np.zeros((CFG.k + 1, CFG.d_model), dtype=np.float32))
    with pytest.raises(ValueError):
        align(params, CFG, np.zeros((CFG.k, CFG.d_model + 2), dtype=np.float32))


def test_batched_states_match_single():
    rng = np.random.default_rng(4)
    params = _params()
    batch = rng.standard_normal((3, CFG.k, CFG.d_model)).astype(np.float32)
    full = align_states(params, CFG, ad.Tensor(batch))
    for i in range(3):
        single = align_states(params, CFG, ad.Tensor(batch[i : i + 1]))
        for (bk, bv), (sk, sv) in zip(full, single):
            np.testing.assert_array_equal(bk.data[i], sk.data[0])
            np.testing.assert_array_equal(bv.data[i], sv.data[0])


def test_memory_content_reaches_every_layer():
    rng = np.random.default_rng(5)
    params = _params()
    a = align(params, CFG, rng.standard_normal((CFG.k, CFG.d_model)).astype(np.float32))
    b = align(params, CFG, rng.standard_normal((CFG.k, CFG.d_model)).astype(np.float32))
    for (ka, va), (kb, vb) in zip(a.layers, b.layers):
        assert not np.array_equal(ka, kb) and not np.array_equal(va, vb)


@pytest.mark.parametrize("seed", range(5))
def test_gradients_f32_vs_f64_oracle(seed):
    from gradcheck import f32_vs_f64

    rng = np.random.default_rng(seed)
    small = ModelConfig(d_model=8, n_layers=2, n_heads=2, k=3, prefix_len=4)
    params = init_align_params(np.random.default_rng(seed), small)
    arrays = {name: (rng.standard_normal(p.data.shape) * 0.4).astype(np.float32)
              for name, p in params.items()}
    mstar = rng.standard_normal((2, small.k, small.d_model)).astype(np.float32)

    def build(ts):
        dt = ts[next(iter(ts))].data.dtype
        layers = align_states(ts, small, ad.Tensor(mstar.astype(dt)))
        acc = None
        for key, value in layers:
            term = ad.add(ad.reduce_mean(ad.mul(key, key)), ad.reduce_mean(ad.mul(value, value)))
            acc = term if acc is None else ad.add(acc, term)
        return acc

    f32_vs_f64(build, arrays, rng, coords_per_tensor=6)
