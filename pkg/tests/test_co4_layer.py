import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from co4 import kernels
from co4 import tensor as T
from co4.co4_layer import (EQ_VARIANTS, BeliefState, Co4Config, Co4Layer, Readout, TokenBatch, Variant,
                           co4_forward, init_latents, modulate_normal_init, modulate_projection_init,
                           prediction_error, sample_latents, token_scores, topk_cost, topk_select, update_belief)
from co4.errors import ConfigError, NumericError, ShapeError
from co4.tensor import Tensor

from gradcheck import check, check_module


def _batch(*arrs):
    ts = [Tensor(np.asarray(a, dtype=float)) for a in arrs]
    return TokenBatch(ts[0], *ts) if len(ts) == 3 else TokenBatch(ts[0], *ts[:3], *ts[3:])


def _rand(rng, *shape):
    return rng.uniform(-2, 2, shape)


# ---------------------------------------------------------------------------
# config and latents


def test_config_validation():
    with pytest.raises(ConfigError):
        Co4Config(num_tokens=16, k=17)
    with pytest.raises(ConfigError):
        Co4Config(num_tokens=16, k=5, strict_k=True)
    Co4Config(num_tokens=16, k=4, strict_k=True)
    with pytest.raises(ConfigError):
        Co4Config(embed_dim=10, heads=3)
    with pytest.raises(ConfigError):
        Co4Config(variant="PROJECTION_INIT", num_tokens=16, num_latents=8)
    with pytest.raises(ConfigError):
        Co4Config(eq_variant="nope")
    assert Co4Config(alpha_mu=0.0).single_step


def test_latents_deterministic_and_aliased():
    cfg = Co4Config(embed_dim=8, num_tokens=4, k=2)
    a, b = sample_latents(cfg, 7), sample_latents(cfg, 7)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    x = Tensor(np.random.default_rng(0).normal(size=(2, 4, 8)))
    proj = init_latents(Co4Config(embed_dim=8, num_tokens=4, k=2, variant="PROJECTION_INIT"), 0,
                        TokenBatch(x, x * 1.0, x * 2.0, x * 3.0))
    assert proj.ql is proj.qx and proj.kl is proj.kx and proj.vl is proj.vx


def test_latent_statistics():
    cfg = Co4Config(embed_dim=1000, num_tokens=1000, k=1)
    ql, _, _ = sample_latents(cfg, 3)
    assert ql.size == 10**6
    assert abs(ql.mean()) < 3 * 0.02 / math.sqrt(ql.size)
    assert abs(ql.std() - 0.02) < 1e-4


# ---------------------------------------------------------------------------
# modulation


def normal_oracle(qx, kx, vx, ql, kl, vl, mu):
    qm = (qx + mu) + ql * (kx + mu)
    km = (kx + mu) + kl * (qx + mu)
    vm = vx**2 + 2 * vx + (qm + mu) * (km + mu) * (1 + np.abs(vl))
    return qm, km, vm


def test_normal_init_examples():
    z = np.zeros(3)
    qm, _, _ = modulate_normal_init(_batch(z, z, z, [5.0, -1.0, 2.0], z, z))
    assert not qm.data.any()
    qm, _, _ = modulate_normal_init(_batch([1.0], [1.0], [0.0], [1.0], [0.0], [0.0]))
    assert qm.item() == 2.0
    _, _, vm = modulate_normal_init(_batch([1.0], [1.0], [1.0], [0.0], [0.0], [0.0]))
    assert vm.item() == 4.0


@pytest.mark.parametrize("backend", ["python", "compiled"])
def test_normal_init_matches_oracle(backend):
    if backend == "compiled" and not kernels.compiled_available():
        pytest.skip("extension not built")
    rng = np.random.default_rng(1)
    arrs = [_rand(rng, 2, 5, 6) for _ in range(3)] + [_rand(rng, 5, 6) for _ in range(3)]
    mu = _rand(rng, 5, 6)
    prev = kernels.backend()
    kernels.use_backend(backend)
    try:
        got = modulate_normal_init(_batch(*arrs), Tensor(mu))
    finally:
        kernels.use_backend(prev)
    for g, want in zip(got, normal_oracle(*arrs, mu)):
        np.testing.assert_allclose(g.data, want, rtol=1e-13, atol=1e-13)


def test_kernel_path_equals_tape_path():
    rng = np.random.default_rng(2)
    arrs = [_rand(rng, 3, 4, 5) for _ in range(6)]
    fast = modulate_normal_init(_batch(*arrs), 0.3)
    ts = [Tensor(a, requires_grad=True) for a in arrs]
    with T.Tape():
        slow = modulate_normal_init(TokenBatch(ts[0], *ts), 0.3)
    for f, s in zip(fast, slow):
        np.testing.assert_allclose(f.data, s.data, rtol=1e-14, atol=1e-14)


def test_pooled_latents():
    rng = np.random.default_rng(3)
    qx, kx, vx = (_rand(rng, 2, 6, 4) for _ in range(3))
    ql, kl, vl = (_rand(rng, 3, 4) for _ in range(3))
    qm, km, vm = modulate_normal_init(_batch(qx, kx, vx, ql, kl, vl))
    assert qm.shape == (2, 3, 4)
    for j in range(3):
        want = [normal_oracle(qx[:, n], kx[:, n], vx[:, n], ql[j], kl[j], vl[j], 0.0) for n in range(6)]
        np.testing.assert_allclose(vm.data[:, j], np.mean([w[2] for w in want], axis=0), rtol=1e-12)


def test_normal_init_shape_mismatch():
    with pytest.raises(ShapeError):
        modulate_normal_init(_batch(np.ones((2, 3)), np.ones((2, 3)), np.ones((2, 3)),
                                    np.ones(4), np.ones(4), np.ones(4)))


def test_projection_init_examples():
    rng = np.random.default_rng(4)
    ql, kl, vl, qx = (_rand(rng, 2, 3) for _ in range(4))
    qm, _, _ = modulate_projection_init(_batch(qx, np.zeros((2, 3)), vl, ql, kl, vl))
    assert np.array_equal(qm.data, ql)
    # Vl=1, Qm=1 (Ql=1, Kx=0), Km=1 (Kl=1, Qx=0)
    one, zero = np.ones(1), np.zeros(1)
    _, _, vm = modulate_projection_init(_batch(zero, zero, one, one, one, one))
    assert vm.item() == 5.0
    # Vl=2, Qm=2, Km=2 -> 4+4+4*3 = 20 -> capped
    _, _, vm = modulate_projection_init(_batch(zero, zero, one, 2 * one, 2 * one, 2 * one))
    assert vm.item() == 6.0
    with pytest.raises(ShapeError):
        modulate_projection_init(_batch(np.ones(3), np.ones(3), np.ones(3), np.ones(2), np.ones(3), np.ones(3)))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (5, 3, 4), elements=st.floats(-1e3, 1e3)))
def test_projection_init_range(stack):
    qx, kx, ql, kl, vl = stack
    _, _, vm = modulate_projection_init(_batch(qx, kx, vl, ql, kl, vl), 6.0)
    assert np.all((vm.data >= 0) & (vm.data <= 6))


def test_context_gated_vs_evidence_anchored_gradients():
    rng = np.random.default_rng(5)
    zero = Tensor(np.zeros((2, 3)))
    ql, kl = (Tensor(rng.uniform(-0.5, 0.5, (2, 3)), requires_grad=True) for _ in range(2))
    vl = Tensor(rng.uniform(0.1, 0.5, (2, 3)), requires_grad=True)
    vx = Tensor(rng.uniform(0.1, 0.5, (2, 3)))
    with T.Tape():
        qm, km, vm = modulate_normal_init(TokenBatch(vx, zero, zero, vx, ql, kl, vl))
        T.backward(T.tsum(qm + km + vm))
    assert ql.grad is None or not ql.grad.any()
    with T.Tape():
        qm, km, vm = modulate_projection_init(TokenBatch(vx, zero, zero, vl, ql, kl, vl))
        T.backward(T.tsum(vm))
    assert np.all(vl.grad != 0)


def test_eq_variants():
    rng = np.random.default_rng(6)
    qx, kx, vx, ql, kl, vl = (_rand(rng, 4) for _ in range(6))
    want = {
        "self_context": (ql + ql * qx, kl + kl * kx),
        "aa_qk": (ql + ql * kx, kl + kl * qx),
        "v_passthrough": (qx + ql * kx, kx + kl * qx),
    }
    for name, (wq, wk) in want.items():
        qm, km, vm = modulate_normal_init(_batch(qx, kx, vx, ql, kl, vl), 0.0, name)
        np.testing.assert_allclose(qm.data, wq)
        np.testing.assert_allclose(km.data, wk)
    _, _, vm = modulate_normal_init(_batch(qx, kx, vx, ql, kl, vl), 0.0, "v_passthrough")
    assert np.array_equal(vm.data, vx)
    qm, km, vm = modulate_normal_init(_batch(qx, kx, vx, ql, kl, vl), 0.0, "v_multiplicative")
    np.testing.assert_allclose(vm.data, vx + vl * qm.data * km.data)
    assert len(EQ_VARIANTS) == 5


# ---------------------------------------------------------------------------
# belief


def test_belief_examples():
    one = Tensor([1.0])
    same = BeliefState(Tensor([0.7]), 0.0)
    assert update_belief(same, one, one, one, Tensor([3.0]), one, one) is same
    b = update_belief(BeliefState(Tensor([1.0]), 0.1), Tensor([2.0]), one, one, Tensor([0.0]), one, one)
    assert b.mu.item() == pytest.approx(1.2, abs=1e-15)
    b = update_belief(BeliefState(Tensor([1.5]), 0.1), one, one, one, one, one, one)
    assert b.mu.item() == 1.5


def test_belief_batch_mean_and_clip():
    mu = BeliefState(Tensor(np.full((3, 2), 2.0)), 1.0)
    qm = Tensor(np.stack([np.full((3, 2), 1.0), np.full((3, 2), 3.0)]))
    z = Tensor(np.zeros((2, 3, 2)))
    out = update_belief(mu, qm, z, z, z, z, z, clip=10.0)
    assert out.mu.shape == (3, 2)
    assert np.all(out.mu.data == 2.0 * (1 + 2.0))
    out = update_belief(mu, qm * 100.0, z, z, z, z, z, clip=10.0)
    assert np.all(out.mu.data == 10.0)


def test_belief_non_finite_error():
    big = Tensor([1e308])
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        update_belief(BeliefState(Tensor([1.0]), 0.1), big, big, big, -big, -big, -big)


def test_prediction_error_zero_when_equal():
    x = Tensor(np.arange(4.0))
    assert not prediction_error(x, x, x, x, x, x).data.any()


# ---------------------------------------------------------------------------
# top-k


def test_topk_examples():
    assert set(topk_select(np.array([3.0, 1.0, 2.0]), 2)[0]) == {0, 2}
    assert topk_select(np.ones(5), 2)[0].tolist() == [0, 1]
    with pytest.raises(ConfigError):
        topk_select(np.ones(3), 4)


@pytest.mark.parametrize("backend", ["python", "compiled"])
def test_topk_sort_oracle(backend):
    if backend == "compiled" and not kernels.compiled_available():
        pytest.skip("extension not built")
    rng = np.random.default_rng(7)
    scores = np.round(rng.normal(size=(1000, 40)), 1)  # plenty of ties
    got = kernels.get("topk_rows", backend)(scores, 6)
    want = np.argsort(-scores, axis=1, kind="stable")[:, :6]
    assert np.array_equal(np.asarray(got), want)


@given(st.lists(st.integers(-100, 100), min_size=12, max_size=12, unique=True), st.integers(1, 12))
def test_topk_monotone_invariance(ints, k):
    scores = np.array(ints, dtype=float)
    a = set(topk_select(scores, k)[0])
    assert a == set(topk_select(np.tanh(scores / 50.0) * 3 + 1, k)[0])
    assert a == set(topk_select(scores**3 + scores, k)[0])


def test_topk_cost():
    assert topk_cost(196, 12) == math.ceil(196 * math.log2(12))
    assert topk_cost(64, 8) == 192
    assert topk_cost(10, 1) == 0


# ---------------------------------------------------------------------------
# layer


def _layer(**kw):
    base = dict(embed_dim=8, num_tokens=6, k=3)
    base.update(kw)
    return Co4Layer(Co4Config(**base), seed=1)


def _x(seed=0, shape=(2, 6, 8), scale=1.0):
    return Tensor(np.random.default_rng(seed).normal(0, scale, shape))


def test_k_equals_n_is_full_attention():
    layer = _layer(k=6)
    _, diag = layer(_x())
    for row in diag["selected"].reshape(-1, 6):
        assert set(row) == set(range(6))


def test_mlp_only_has_no_token_token_intermediate():
    layer = _layer(readout="MLP_ONLY", variant="PROJECTION_INIT", alpha_mu=0.0, num_tokens=48, k=3)
    with T.no_grad(), T.count_macs() as c:
        feats, _ = layer(_x(shape=(2, 48, 8)))
    assert feats.shape == (2, 48, 8)
    assert not any(s[-2:] == (48, 48) for _, s in c.shapes)
    topk = _layer(num_tokens=48, k=48)
    with T.no_grad(), T.count_macs() as c:
        topk(_x(shape=(2, 48, 8)))
    assert any(s[-2:] == (48, 48) for _, s in c.shapes)  # the audit does see full attention


def test_iterations_sensitivity():
    x = _x(3)
    one = _layer(iterations=1, alpha_mu=0.0)(x)[0].data
    three = _layer(iterations=3, alpha_mu=0.0)(x)[0].data
    assert np.array_equal(one, three)
    one = _layer(iterations=1, alpha_mu=0.5)(x)[0].data
    three = _layer(iterations=3, alpha_mu=0.5)(x)[0].data
    assert not np.allclose(one, three)


def test_single_step_ignores_belief():
    layer = _layer(iterations=1, alpha_mu=0.0)
    x = _x(4)
    a = layer(x)[0].data
    b = layer(x, BeliefState(Tensor(np.zeros((6, 8))), 0.0))[0].data
    assert np.array_equal(a, b)


def test_outputs_finite_for_bounded_inputs():
    for variant in Variant:
        for readout in Readout:
            layer = _layer(variant=variant, readout=readout, iterations=3, alpha_mu=0.1)
            feats, diag = layer(_x(5, scale=10.0).__class__(np.clip(_x(5, scale=10.0).data, -10, 10)))
            assert np.all(np.isfinite(feats.data))
            assert diag["regime"] in ("AI_AC", "AA", "AD", "AD_AWAKE")


def test_heads_scores_shape():
    layer = _layer(heads=2, k=2)
    _, diag = layer(_x())
    assert diag["scores"].shape == (2, 2, 6)
    assert diag["selected"].shape == (2, 2, 2)


def test_token_scores_kinds():
    vm = Tensor(np.arange(24.0).reshape(1, 4, 6))
    s = token_scores(vm, vm, vm, 2, "vm_norm")
    np.testing.assert_allclose(s[0, 0], np.linalg.norm(vm.data[0, :, :3], axis=1))
    s = token_scores(vm, vm, vm, 1, "qk")
    np.testing.assert_allclose(s[0, 0], (vm.data[0] ** 2).sum(1))


def test_shape_errors():
    with pytest.raises(ShapeError):
        _layer()(Tensor(np.ones((2, 6, 5))))


def test_co4_forward_functional():
    layer = _layer()
    x = _x(6)
    a, _ = co4_forward(TokenBatch(x, x, x, x), layer.cfg, layer)
    b, _ = layer(x)
    assert np.array_equal(a.data, b.data)


def _scale_params(layer, std, seed=0):
    rng = np.random.default_rng(seed)
    for p in layer.parameters():
        p.data = rng.normal(0, std, p.shape)


@pytest.mark.parametrize("variant,readout,iters", [
    ("NORMAL_INIT", "TOPK_ATTN", 1), ("NORMAL_INIT", "MLP_ONLY", 2),
    ("PROJECTION_INIT", "TOPK_ATTN", 1), ("PROJECTION_INIT", "MLP_ONLY", 1),
])
def test_layer_gradients(variant, readout, iters):
    layer = Co4Layer(Co4Config(embed_dim=4, num_tokens=5, k=5, variant=variant, readout=readout,
                               iterations=iters, alpha_mu=0.1 if iters > 1 else 0.0, mlp_hidden=6), seed=0)
    _scale_params(layer, 0.4)
    x = _x(7, (2, 5, 4))
    assert check_module(layer, lambda m: T.tsum(m(x)[0] ** 2)) < 1e-5
