"""Patch classifier built from Co4 and/or ViT blocks."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .baseline import VitBlock, VitConfig
from .co4_layer import Co4Config, Co4Layer, Readout
from .errors import ConfigError
from .nn import LayerNorm, Linear, Module, param
from .tensor import Tensor, mac_section

BLOCK_KINDS = ("co4", "vit")


@dataclass
class ModelConfig:
    model: str = "co4"
    layers: int = 1
    blocks: list[str] | None = None
    embed_dim: int = 128
    heads: int = 1
    mlp_hidden: int | None = None
    num_classes: int = 10
    # co4 block options
    variant: str = "PROJECTION_INIT"
    readout: str = "MLP_ONLY"
    k: int = 8
    alpha_mu: float = 0.0
    iterations: int = 1
    num_latents: int | None = None
    eq_variant: str = "canonical"
    score: str = "vm_norm"
    co4_residual: bool = False

    def __post_init__(self):
        if self.blocks is None:
            if self.model not in BLOCK_KINDS:
                raise ConfigError(f"unknown model {self.model!r}; expected co4, vit or an explicit block list")
            self.blocks = [self.model] * self.layers
        self.blocks = list(self.blocks)
        bad = [b for b in self.blocks if b not in BLOCK_KINDS]
        if bad or not self.blocks:
            raise ConfigError(f"block list {self.blocks} must be non-empty and drawn from {BLOCK_KINDS}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")

    def co4_config(self, num_tokens: int) -> Co4Config:
        return Co4Config(
            embed_dim=self.embed_dim, num_tokens=num_tokens, num_latents=self.num_latents,
            variant=self.variant, readout=self.readout, k=min(self.k, num_tokens),
            alpha_mu=self.alpha_mu, iterations=self.iterations, heads=self.heads,
            mlp_hidden=self.mlp_hidden, eq_variant=self.eq_variant, score=self.score,
        )

    def to_dict(self) -> dict:
        return asdict(self)


class Classifier(Module):
    def __init__(self, cfg: ModelConfig, num_tokens: int, token_dim: int, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        e = cfg.embed_dim
        self.embed = Linear(rng, token_dim, e)
        self.pos = param(rng.normal(0.0, 0.02, (num_tokens, e)))
        self.blocks = []
        n = num_tokens
        for i, kind in enumerate(cfg.blocks):
            sub = int(rng.integers(2**63))
            if kind == "co4":
                c = cfg.co4_config(n)
                self.blocks.append(Co4Layer(c, seed=sub))
                if c.readout is Readout.TOPK_ATTN:
                    n = c.k
            else:
                vc = VitConfig(embed_dim=e, num_tokens=n, heads=cfg.heads, mlp_hidden=cfg.mlp_hidden)
                self.blocks.append(VitBlock(vc, seed=sub))
        self.norm = LayerNorm(e)
        self.head = Linear(rng, e, cfg.num_classes)

    def __call__(self, tokens) -> tuple[Tensor, list[dict]]:
        x = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
        with mac_section("embed"):
            x = self.embed(x) + self.pos
        diags = []
        for blk in self.blocks:
            if isinstance(blk, Co4Layer):
                y, d = blk(x)
                x = x + y if self.cfg.co4_residual and y.shape == x.shape else y
                diags.append(d)
            else:
                x = blk(x)
        with mac_section("head"):
            x = T.mean_pool(self.norm(x), axis=1)
            return self.head(x), diags


def regime_report(diags: list[dict]) -> dict:
    """Summary of the last Co4 block's regime diagnostic, or empty."""
    if not diags:
        return {}
    d = diags[-1]
    return {k: d[k] for k in ("mean_abs_R", "mean_abs_C", "regime")}
