import math

import numpy as np
import pytest

from co4 import tensor as T
from co4.baseline import MHSA, VitBlock, VitConfig
from co4.errors import ConfigError, ShapeError
from co4.tensor import Tensor

from gradcheck import check_module


def naive_attention(x, attn):
    """Double loop over query and key tokens, one head at a time."""
    wq, bq = attn.wq.weight.data, attn.wq.bias.data
    wk, bk = attn.wk.weight.data, attn.wk.bias.data
    wv, bv = attn.wv.weight.data, attn.wv.bias.data
    b, n, e = x.shape
    h = attn.heads
    dh = e // h
    out = np.zeros((b, n, e))
    for bi in range(b):
        q, k, v = x[bi] @ wq + bq, x[bi] @ wk + bk, x[bi] @ wv + bv
        for hi in range(h):
            sl = slice(hi * dh, (hi + 1) * dh)
            for i in range(n):
                logits = [sum(q[i, sl] * k[j, sl]) / math.sqrt(dh) for j in range(n)]
                m = max(logits)
                w = [math.exp(l - m) for l in logits]
                z = sum(w)
                out[bi, i, sl] = sum(w[j] / z * v[j, sl] for j in range(n))
    return out @ attn.proj.weight.data + attn.proj.bias.data


def _scaled(cfg, std=0.3, seed=0):
    blk = VitBlock(cfg, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for p in blk.parameters():
        p.data = rng.normal(0, std, p.shape)
    return blk


@pytest.mark.parametrize("heads", [1, 2])
def test_matches_double_loop(heads):
    blk = _scaled(VitConfig(embed_dim=8, num_tokens=5, heads=heads))
    x = np.random.default_rng(1).normal(size=(2, 5, 8))
    got = blk.attn(Tensor(x)).data
    np.testing.assert_allclose(got, naive_attention(x, blk.attn), rtol=1e-10, atol=1e-12)


def test_single_token_returns_value():
    blk = _scaled(VitConfig(embed_dim=4, num_tokens=1))
    x = np.random.default_rng(2).normal(size=(1, 1, 4))
    a = blk.attn
    v = x @ a.wv.weight.data + a.wv.bias.data
    np.testing.assert_allclose(a(Tensor(x)).data, v @ a.proj.weight.data + a.proj.bias.data, rtol=1e-12)


def test_equal_keys_give_uniform_weights():
    blk = _scaled(VitConfig(embed_dim=4, num_tokens=6))
    blk.attn.wk.weight.data[:] = 0.0
    _, w = blk.attn(Tensor(np.random.default_rng(3).normal(size=(1, 6, 4))), return_weights=True)
    np.testing.assert_allclose(w.data, 1 / 6, rtol=1e-12)


def test_permutation_equivariance():
    blk = _scaled(VitConfig(embed_dim=8, num_tokens=7))
    x = np.random.default_rng(4).normal(size=(1, 7, 8))
    perm = np.random.default_rng(5).permutation(7)
    a = blk(Tensor(x)).data[:, perm]
    b = blk(Tensor(x[:, perm])).data
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_block_gradients():
    blk = _scaled(VitConfig(embed_dim=4, num_tokens=3, heads=2, mlp_hidden=6))
    x = Tensor(np.random.default_rng(6).normal(size=(2, 3, 4)))
    assert check_module(blk, lambda m: T.tsum(m(x) ** 2)) < 1e-5


def test_config_and_shape_errors():
    with pytest.raises(ConfigError):
        VitConfig(embed_dim=6, heads=4)
    with pytest.raises(ShapeError):
        VitBlock(VitConfig(embed_dim=4, num_tokens=3))(Tensor(np.ones((1, 3, 5))))
    assert isinstance(VitBlock(VitConfig()).attn, MHSA)
