"""Cooperation (MOD) laws between evidence ``R`` and context ``C``.

All functions are pure and accept tensors or plain numbers; tensor inputs
keep their gradient tracking.  Burst-probability laws operate on floats or
numpy arrays.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

EXP_LIMIT = 700.0
_TINY = np.finfo(np.float64).tiny
_ONE_MINUS = 1.0 - np.finfo(np.float64).epsneg


class ModRegime(str, enum.Enum):
    """Operating regime of a two-point unit, keyed by (|R| band, |C| band)."""

    AI_AC = "AI_AC"  # low R, low C  (LL)
    AA = "AA"  # high R, low C  (HL)
    AD = "AD"  # low R, high C  (LH)
    AD_AWAKE = "AD_AWAKE"  # high R, high C  (HH)

    @property
    def code(self) -> str:
        return _CODES[self]

    @classmethod
    def from_code(cls, code: str) -> "ModRegime":
        for regime, c in _CODES.items():
            if c == code.upper():
                return regime
        raise ConfigError(f"unknown regime code {code!r}; expected one of LL, HL, LH, HH")


_CODES = {
    ModRegime.AI_AC: "LL",
    ModRegime.AA: "HL",
    ModRegime.AD: "LH",
    ModRegime.AD_AWAKE: "HH",
}


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else T._as_tensor(x)


def mod_ad(R, C1, C2) -> Tensor:
    """Context-driven law: ``C1**2 + 2*C1 + C2*(1 + |R|)``.

    Evidence reaches the output only through the ``C2`` gate, so with both
    contexts at zero the output and its R-gradient vanish.
    """
    R, C1, C2 = _t(R), _t(C1), _t(C2)
    T.broadcast_shape(T.broadcast_shape(R.shape, C1.shape), C2.shape)
    return C1 * C1 + 2.0 * C1 + C2 * (1.0 + abs(R))


def mod_aa(R, C) -> Tensor:
    """Evidence-driven additive law: ``R + R*C``."""
    R, C = _t(R), _t(C)
    T.broadcast_shape(R.shape, C.shape)
    return R + R * C


def mod_ad_awake(R1, R2, C) -> Tensor:
    """``R1 + C*(1 + |R2|)``; the unilateral context drive is left to the caller."""
    R1, R2, C = _t(R1), _t(R2), _t(C)
    T.broadcast_shape(T.broadcast_shape(R1.shape, R2.shape), C.shape)
    return R1 + C * (1.0 + abs(R2))


def mod_fig1d(R, C) -> Tensor:
    """Single-channel AD+Awake surface ``R**2 + 2R + C*(1 + |R|)``."""
    R = _t(R)
    return mod_ad_awake(R * R + 2.0 * R, R, C)


def mod_fig1c(R, C) -> Tensor:
    """Single-channel AD surface ``C**2 + 2C + C*(1 + |R|)``."""
    return mod_ad(R, C, C)


TM_VARIANTS = ("TM1", "TM2", "TM3", "TM4")


def _saturate(x: Tensor, name: str) -> Tensor:
    if np.any(np.abs(x.data) > EXP_LIMIT):
        warnings.warn(f"{name}: exponent saturated at +-{EXP_LIMIT:g}", RuntimeWarning, stacklevel=3)
        return T.clip(x, -EXP_LIMIT, EXP_LIMIT)
    return x


def tm_transfer(variant: str, R, C) -> Tensor:
    """Classic asynchronous modulatory transfer functions TM1..TM4."""
    R, C = _t(R), _t(C)
    T.broadcast_shape(R.shape, C.shape)
    rc = R * C
    v = variant.upper()
    if v == "TM1":
        return 0.5 * R * (1.0 + T.exp(_saturate(rc, v)))
    if v == "TM2":
        return R + rc
    if v == "TM3":
        return R * (1.0 + T.tanh(rc))
    if v == "TM4":
        return R * T.exp(_saturate(rc, v) * math.log(2.0))
    raise ConfigError(f"unknown transfer variant {variant!r}; expected one of {TM_VARIANTS}")


# ---------------------------------------------------------------------------
# burst probabilities


@dataclass(frozen=True)
class SigmoidParams:
    theta: float = 0.0
    s: float = 1.0

    def __post_init__(self):
        if not self.s > 0:
            raise ConfigError(f"sigmoid slope scale must be positive, got {self.s}")
        if not math.isfinite(self.theta):
            raise ConfigError("sigmoid threshold must be finite")

    def __call__(self, x):
        z = (np.asarray(x, dtype=np.float64) - self.theta) / self.s
        # two-branch logistic: exp only ever sees -|z|, so nothing overflows
        e = np.exp(-np.abs(z))
        p = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        # keep the open interval even where float64 runs out of digits
        return np.clip(p, _TINY, _ONE_MINUS)


@dataclass(frozen=True)
class BurstParams:
    """Sigmoids for the four component probabilities.

    ``p1b``: first somatic spike from basal input; ``p2a``: apical
    contribution to a second spike; ``p2b``: basal-alone burst;
    ``ph2a``: apical-alone spike under high apical drive.
    """

    p1b: SigmoidParams = SigmoidParams(1.0, 0.5)
    p2a: SigmoidParams = SigmoidParams(1.0, 0.5)
    p2b: SigmoidParams = SigmoidParams(2.0, 0.5)
    ph2a: SigmoidParams = SigmoidParams(2.0, 0.5)


def burst_from_components(regime, p1b, p2a, p2b, ph2a):
    """Compose component probabilities according to ``regime``."""
    regime = _regime(regime)
    ll = p1b * p2a
    if regime is ModRegime.AI_AC:
        return ll
    if regime is ModRegime.AA:
        return p1b * p2b + ll * (1.0 - p2b)
    if regime is ModRegime.AD:
        return ph2a + ll * (1.0 - ph2a)
    hl = p1b * p2b + ll * (1.0 - p2b)
    return ph2a + hl * (1.0 - ph2a)


def burst_prob(regime, b, a, params: BurstParams = BurstParams()):
    """Burst probability for basal amplitude ``b`` and apical amplitude ``a``."""
    return burst_from_components(
        regime, params.p1b(b), params.p2a(a), params.p2b(b), params.ph2a(a)
    )


def _regime(regime) -> ModRegime:
    if isinstance(regime, ModRegime):
        return regime
    try:
        return ModRegime(regime)
    except ValueError:
        return ModRegime.from_code(str(regime))


# ---------------------------------------------------------------------------
# regime classification


def _band(value: float, low: float, high: float) -> str:
    if value >= high:
        return "high"
    if value <= low:
        return "low"
    # between the thresholds: nearer band in log space
    return "high" if value >= math.sqrt(low * high) else "low"


def classify_regime(R, C, thresholds: tuple[float, float] = (0.1, 1.0)) -> ModRegime:
    low, high = thresholds
    if not (0 < low < high):
        raise ConfigError(f"thresholds must satisfy 0 < low < high, got {thresholds}")
    r = float(np.mean(np.abs(R.data if isinstance(R, Tensor) else np.asarray(R, dtype=float))))
    c = float(np.mean(np.abs(C.data if isinstance(C, Tensor) else np.asarray(C, dtype=float))))
    key = (_band(r, low, high), _band(c, low, high))
    return {
        ("low", "low"): ModRegime.AI_AC,
        ("high", "low"): ModRegime.AA,
        ("low", "high"): ModRegime.AD,
        ("high", "high"): ModRegime.AD_AWAKE,
    }[key]
