import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from co4 import tensor as T
from co4.errors import ConfigError, ShapeError
from co4.mod_laws import (BurstParams, ModRegime, SigmoidParams, burst_from_components, burst_prob,
                          classify_regime, mod_aa, mod_ad, mod_ad_awake, mod_fig1c, mod_fig1d, tm_transfer)
from co4.tensor import Tensor

from gradcheck import check

real = st.floats(-50, 50, allow_nan=False)


def _grad_r(fn, r, *rest):
    R = Tensor(r, requires_grad=True)
    with T.Tape():
        T.backward(T.tsum(fn(R, *rest)))
    return R.grad


def test_mod_ad_values():
    assert mod_ad(3.7, 0.0, 0.0).item() == 0.0
    assert mod_ad(0.0, 1.0, 1.0).item() == 4.0
    with pytest.raises(ShapeError):
        mod_ad(Tensor(np.ones(3)), Tensor(np.ones(2)), 0.0)


def test_mod_ad_gate_closed_has_no_evidence_gradient():
    r = np.random.default_rng(0).normal(size=50)
    g = _grad_r(mod_ad, r, Tensor(np.zeros(50)), Tensor(np.zeros(50)))
    assert not g.any()


def test_mod_aa_values():
    assert mod_aa(1.0, 0.0).item() == 1.0
    assert mod_aa(2.0, 0.5).item() == 3.0
    assert mod_aa(0.0, 7.0).item() == 0.0


def test_fig1_surfaces():
    assert mod_fig1d(0.0, 0.0).item() == 0.0
    assert mod_fig1d(1.0, 1.0).item() == 5.0
    assert mod_fig1d(-1.0, 0.0).item() == -1.0
    assert mod_fig1c(0.0, 1.0).item() == 4.0
    assert mod_ad_awake(3.0, -2.0, 0.5).item() == 4.5


def test_fig1d_evidence_anchor():
    r = np.linspace(-3, 3, 601)
    r = r[(np.abs(r + 1) > 1e-9) & (np.abs(r) > 1e-9)]
    assert np.all(_grad_r(mod_fig1d, r, Tensor(np.zeros_like(r))) != 0)


@given(real, real)
def test_fig1d_gradient_grows_linearly(r, c):
    g = _grad_r(mod_fig1d, np.array([r]), Tensor([c]))[0]
    assert abs(g) <= 2 * abs(r) + 2 + abs(c) + 1e-12


def test_law_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    r, c1, c2 = (rng.uniform(-2, 2, 6) for _ in range(3))
    assert check(mod_ad, [r, c1, c2]) < 1e-5
    assert check(mod_aa, [r, c1]) < 1e-5
    assert check(mod_fig1d, [r, c1]) < 1e-5
    for v in ("TM1", "TM2", "TM3", "TM4"):
        assert check(lambda a, b: tm_transfer(v, a, b), [r, c1]) < 1e-5


def test_tm_transfer_values():
    assert tm_transfer("TM2", 1.0, 0.0).item() == 1.0
    assert tm_transfer("TM4", 1.0, 1.0).item() == pytest.approx(2.0, abs=1e-15)
    assert tm_transfer("TM1", 1.0, 0.0).item() == 1.0
    assert tm_transfer("TM3", 2.0, 0.0).item() == 2.0
    with pytest.raises(ConfigError):
        tm_transfer("TM9", 1.0, 1.0)


def test_tm_saturation_warns_and_stays_finite():
    with pytest.warns(RuntimeWarning, match="saturated"):
        out = tm_transfer("TM1", 100.0, 100.0)
    assert math.isfinite(out.item())
    with pytest.warns(RuntimeWarning):
        assert math.isfinite(tm_transfer("TM4", -40.0, 40.0).item())


def test_burst_components_pinned_at_half():
    got = [burst_from_components(code, 0.5, 0.5, 0.5, 0.5) for code in ("LL", "HL", "LH", "HH")]
    assert got == [0.25, 0.375, 0.625, 0.6875]


def test_burst_saturation():
    assert burst_from_components(ModRegime.AD_AWAKE, 1.0, 1.0, 1.0, 1.0) == 1.0


def test_sigmoid_matches_logistic():
    s = SigmoidParams(0.3, 0.7)
    x = np.linspace(-5, 5, 41)
    np.testing.assert_allclose(s(x), 1 / (1 + np.exp(-(x - 0.3) / 0.7)), rtol=1e-12)
    assert 0 < s(-1e6) and s(1e6) < 1
    with pytest.raises(ConfigError):
        SigmoidParams(0.0, 0.0)


def test_burst_monotone_grid():
    b, a = np.meshgrid(np.linspace(-2, 5, 50), np.linspace(-2, 5, 50))
    p = {code: burst_prob(code, b, a) for code in ("LL", "HL", "LH", "HH")}
    assert np.all(p["LL"] <= p["HL"]) and np.all(p["HL"] <= p["HH"])
    assert np.all(p["LL"] <= p["LH"]) and np.all(p["LH"] <= p["HH"])


def test_burst_prob_range_random_params():
    rng = np.random.default_rng(2)
    for _ in range(10_000 // 100):
        params = BurstParams(*(SigmoidParams(rng.normal(0, 2), rng.uniform(0.05, 3)) for _ in range(4)))
        b, a = rng.normal(0, 3, 100), rng.normal(0, 3, 100)
        for code in ("LL", "HL", "LH", "HH"):
            p = burst_prob(code, b, a, params)
            assert np.all((0 <= p) & (p <= 1))


def test_classify_regime():
    small, big = np.full(4, 0.01), np.full(4, 2.0)
    assert classify_regime(small, small) is ModRegime.AI_AC
    assert classify_regime(big, small) is ModRegime.AA
    assert classify_regime(small, big) is ModRegime.AD
    assert classify_regime(big, big) is ModRegime.AD_AWAKE
    with pytest.raises(ConfigError):
        classify_regime(small, small, (1.0, 0.5))


def test_regime_codes_roundtrip():
    for r in ModRegime:
        assert ModRegime.from_code(r.code) is r
    with pytest.raises(ConfigError):
        ModRegime.from_code("XY")
