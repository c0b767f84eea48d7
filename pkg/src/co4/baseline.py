"""Pre-LN ViT block used as the quadratic-attention reference."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import MLP, LayerNorm, Linear, Module
from .tensor import Tensor, mac_section


@dataclass
class VitConfig:
    embed_dim: int = 128
    num_tokens: int = 64
    heads: int = 1
    layers: int = 1
    mlp_hidden: int | None = None

    def __post_init__(self):
        if self.embed_dim < 1 or self.num_tokens < 1 or self.layers < 1:
            raise ConfigError("embed_dim, num_tokens and layers must be positive")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"heads={self.heads} must divide embed_dim={self.embed_dim}")

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or 4 * self.embed_dim

    def to_dict(self) -> dict:
        return asdict(self)


class MHSA(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        self.heads = heads
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.proj = Linear(rng, dim, dim)

    def __call__(self, x: Tensor, return_weights: bool = False):
        b, n, e = x.shape
        h = self.heads
        dh = e // h

        def split(t):
            return t.reshape(b, n, h, dh).transpose(0, 2, 1, 3)

        with mac_section("projection"):
            q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        with mac_section("attention"):
            logits = T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(dh))
            w = T.softmax_rows(logits)
            ctx = T.matmul(w, v).transpose(0, 2, 1, 3).reshape(b, n, e)
        with mac_section("readout"):
            out = self.proj(ctx)
        return (out, w) if return_weights else out


class VitBlock(Module):
    """``x + MHSA(LN(x))`` followed by ``x + MLP(LN(x))``."""

    def __init__(self, cfg: VitConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.ln1 = LayerNorm(cfg.embed_dim)
        self.attn = MHSA(rng, cfg.embed_dim, cfg.heads)
        self.ln2 = LayerNorm(cfg.embed_dim)
        self.mlp = MLP(rng, cfg.embed_dim, cfg.hidden)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.cfg.embed_dim:
            raise ShapeError(f"expected (B, N, {self.cfg.embed_dim}) tokens, got {x.shape}")
        with mac_section("norm"):
            h = self.ln1(x)
        x = x + self.attn(h)
        with mac_section("norm"):
            h = self.ln2(x)
        with mac_section("mlp"):
            return x + self.mlp(h)


def mhsa_forward(x: Tensor, params: VitBlock) -> Tensor:
    return params(x)
