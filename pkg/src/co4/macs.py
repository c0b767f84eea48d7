"""Closed-form multiply-accumulate counts and the instrumented comparison."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .co4_layer import Co4Config, Co4Layer, Readout, topk_cost
from .errors import ConfigError
from .tensor import Tensor

MODELS = ("standard", "co4", "basic")

# per-term multiplicity of the instrumented layer relative to the formula
TERM_SCALE = {"projection": 3, "modulation": 6, "selection": 1, "attention": 2}


def macs_estimate(model: str, L: int, N: int, E: int, k: int | None = None, l: int | None = None) -> int:
    """``standard``: L(N E^2 + N^2 E); ``co4``: L(N E^2 + N E + ceil(N log2 k) + k^2 E);
    ``basic``: L(l E^2 + N E^2 + l N E) for ``l`` latent queries."""
    if min(L, N, E) < 1:
        raise ConfigError("L, N and E must be positive")
    if model == "standard":
        return L * (N * E * E + N * N * E)
    if model == "co4":
        if k is None or not 1 <= k <= N:
            raise ConfigError(f"co4 needs 1 <= k <= N, got k={k}")
        return L * (N * E * E + N * E + topk_cost(N, k) + k * k * E)
    if model == "basic":
        lq = N if l is None else l
        if lq < 1:
            raise ConfigError("l must be positive")
        return L * (lq * E * E + N * E * E + lq * N * E)
    raise ConfigError(f"unknown model {model!r}; expected one of {MODELS}")


def formula_terms(N: int, E: int, k: int) -> dict[str, int]:
    return {"projection": N * E * E, "modulation": N * E, "selection": topk_cost(N, k), "attention": k * k * E}


def instrumented_terms(N: int, E: int, k: int, seed: int = 0, heads: int = 1) -> dict[str, int]:
    """Run one no-grad forward pass of a top-k Co4 layer and return MACs per section."""
    cfg = Co4Config(embed_dim=E, num_tokens=N, k=k, heads=heads, readout=Readout.TOPK_ATTN, alpha_mu=0.0)
    layer = Co4Layer(cfg, seed=seed)
    x = Tensor(np.random.default_rng(seed).normal(size=(1, N, E)))
    with T.no_grad(), T.count_macs() as counter:
        layer(x)
    return dict(counter.by_section)


def compare_terms(N: int, E: int, k: int, seed: int = 0) -> list[dict]:
    """Per-term rows: formula value, instrumented value divided by its structural constant, ratio."""
    got = instrumented_terms(N, E, k, seed)
    rows = []
    for term, want in formula_terms(N, E, k).items():
        measured = got.get(term, 0) / TERM_SCALE[term]
        rows.append({"term": term, "formula": want, "instrumented": measured,
                     "ratio": measured / want if want else float(measured == 0)})
    return rows
