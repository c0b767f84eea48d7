"""Triadic modulation block.

Latent queries, keys and values act as evidence; input projections and the
belief state act as context.  The modulated ``(Qm, Km, Vm)`` then go to one
of two readouts: attention restricted to the top-k tokens, or an MLP over
``Vm`` rows alone (no token-token interaction at all).
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from . import tensor as T
from .errors import ConfigError, NumericError, ShapeError
from .mod_laws import classify_regime
from .nn import MLP, LayerNorm, Linear, Module, param
from .tensor import Tensor, mac_section, record_macs

LATENT_STD = 0.02


class Variant(str, enum.Enum):
    NORMAL_INIT = "NORMAL_INIT"
    PROJECTION_INIT = "PROJECTION_INIT"


class Readout(str, enum.Enum):
    TOPK_ATTN = "TOPK_ATTN"
    MLP_ONLY = "MLP_ONLY"


# Q/K/V equation sets used for the regime-collapse ablation.
EQ_VARIANTS = ("canonical", "self_context", "aa_qk", "v_passthrough", "v_multiplicative")


@dataclass
class Co4Config:
    embed_dim: int = 128
    num_tokens: int = 64
    num_latents: int | None = None
    variant: Variant = Variant.NORMAL_INIT
    readout: Readout = Readout.TOPK_ATTN
    k: int = 8
    alpha_mu: float = 0.1
    iterations: int = 1
    relu_cap: float = 6.0
    heads: int = 1
    strict_k: bool = False
    mu_init: float = 0.01
    mu_clip: float = 10.0
    score: str = "vm_norm"
    mlp_hidden: int | None = None
    eq_variant: str = "canonical"
    regime_thresholds: tuple[float, float] = (0.1, 1.0)

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.readout = Readout(self.readout)
        self.regime_thresholds = tuple(self.regime_thresholds)
        self.validate()

    @property
    def latents(self) -> int:
        return self.num_tokens if self.num_latents is None else self.num_latents

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or 4 * self.embed_dim

    @property
    def single_step(self) -> bool:
        return self.iterations == 1 and self.alpha_mu == 0

    def validate(self) -> None:
        n = self.num_tokens
        if self.embed_dim < 1 or n < 1:
            raise ConfigError("embed_dim and num_tokens must be positive")
        if self.k < 1 or self.k > n:
            raise ConfigError(f"k={self.k} must lie in [1, N={n}]")
        if self.strict_k and self.k > math.ceil(math.sqrt(n)):
            raise ConfigError(f"strict_k: k={self.k} exceeds ceil(sqrt(N))={math.ceil(math.sqrt(n))}")
        if not 1 <= self.latents <= n:
            raise ConfigError(f"num_latents={self.latents} must lie in [1, N={n}]")
        if self.variant is Variant.PROJECTION_INIT and self.latents != n:
            raise ConfigError("PROJECTION_INIT aliases latents to projections, so num_latents must equal N")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.alpha_mu < 0:
            raise ConfigError("alpha_mu must be >= 0")
        if not self.relu_cap > 0:
            raise ConfigError("relu_cap must be positive")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"heads={self.heads} must divide embed_dim={self.embed_dim}")
        if self.score not in ("vm_norm", "qk"):
            raise ConfigError(f"unknown score {self.score!r}")
        if self.eq_variant not in EQ_VARIANTS:
            raise ConfigError(f"unknown eq_variant {self.eq_variant!r}; expected one of {EQ_VARIANTS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["readout"] = self.readout.value
        d["regime_thresholds"] = list(self.regime_thresholds)
        return d


@dataclass
class TokenBatch:
    x: Tensor
    qx: Tensor
    kx: Tensor
    vx: Tensor
    ql: Tensor | None = None
    kl: Tensor | None = None
    vl: Tensor | None = None


@dataclass
class BeliefState:
    mu: Tensor
    alpha: float


# ---------------------------------------------------------------------------
# latents


def sample_latents(cfg: Co4Config, rng_seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(rng_seed)
    shape = (cfg.latents, cfg.embed_dim)
    return tuple(rng.normal(0.0, LATENT_STD, shape) for _ in range(3))


def init_latents(cfg: Co4Config, rng_seed: int, batch: TokenBatch) -> TokenBatch:
    """Attach latents to ``batch``.

    NORMAL_INIT draws ``(l, E)`` latents from N(0, 0.02^2), shared across the
    batch axis by broadcasting.  PROJECTION_INIT aliases them to the input
    projections.
    """
    if cfg.variant is Variant.PROJECTION_INIT:
        return TokenBatch(batch.x, batch.qx, batch.kx, batch.vx, batch.qx, batch.kx, batch.vx)
    ql, kl, vl = (Tensor(a) for a in sample_latents(cfg, rng_seed))
    return TokenBatch(batch.x, batch.qx, batch.kx, batch.vx, ql, kl, vl)


# ---------------------------------------------------------------------------
# modulation


def _use_kernel(*ts: Tensor) -> bool:
    return not (T.grad_enabled() and any(t.requires_grad for t in ts))


def modulate_normal_init(batch: TokenBatch, mu: Tensor | float = 0.0, eq_variant: str = "canonical"):
    """Context-driven modulation with normally initialised latents.

    When there are fewer latents than tokens each latent is modulated
    against every token and the result averaged over the token axis.
    """
    qx, kx, vx, ql, kl, vl = batch.qx, batch.kx, batch.vx, batch.ql, batch.kl, batch.vl
    mu = T._as_tensor(mu)
    if ql.ndim >= 2 and qx.ndim >= 3 and ql.shape[-2] != qx.shape[-2]:
        return _modulate_pooled(batch, mu, eq_variant)
    for t in (ql, kl, vl, mu):
        T.broadcast_shape(qx.shape, t.shape)
    if eq_variant == "canonical" and _use_kernel(qx, kx, vx, ql, kl, vl, mu) and _tiles(qx.shape, ql, kl, vl, mu):
        return _normal_kernel(qx, kx, vx, ql, kl, vl, mu)
    return _normal_equations(qx, kx, vx, ql, kl, vl, mu, eq_variant)


def _tiles(full, *ts) -> bool:
    # a trailing-suffix shape repeats cyclically over the flat token array
    return all(t.shape == full[len(full) - t.ndim:] for t in ts)


def _normal_equations(qx, kx, vx, ql, kl, vl, mu, eq_variant):
    if eq_variant == "canonical":
        qxm = qx + mu
        kxm = kx + mu
        qm = qxm + ql * kxm
        km = kxm + kl * qxm
        vm = vx * vx + 2.0 * vx + (qm + mu) * (km + mu) * (1.0 + abs(vl))
        return qm, km, vm
    if eq_variant == "self_context":
        qm = ql + ql * qx
        km = kl + kl * kx
    elif eq_variant == "aa_qk":
        qm = ql + ql * kx
        km = kl + kl * qx
    else:
        qm = qx + ql * kx
        km = kx + kl * qx
    if eq_variant == "v_passthrough":
        vm = vx
    elif eq_variant == "v_multiplicative":
        vm = vx + vl * qm * km
    else:
        vm = vx * vx + 2.0 * vx + qm * km * (1.0 + abs(vl))
    return qm, km, vm


def _flat(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64).reshape(-1)


def _normal_kernel(qx, kx, vx, ql, kl, vl, mu):
    record_macs(6 * qx.size)
    fn = kernels.get("modulate_normal")
    ts = (ql, kl, vl, qx, kx, vx, mu)
    if kernels.backend() == "python":
        out = fn(*(t.data for t in ts))
    else:
        out = fn(*(_flat(t.data) for t in ts))
    return tuple(Tensor._wrap(np.asarray(o).reshape(qx.shape)) for o in out)


def _modulate_pooled(batch: TokenBatch, mu: Tensor, eq_variant: str):
    b, n, e = batch.qx.shape
    l = batch.ql.shape[-2]

    def tok(t):  # (B, N, E) -> (B, 1, N, E)
        return t.reshape(b, 1, n, e)

    def lat(t):  # (l, E) or (B, l, E) -> (..., l, 1, E)
        return t.reshape(t.shape[:-1] + (1, e))

    m = lat(mu) if mu.ndim >= 2 else mu
    qm, km, vm = _normal_equations(
        tok(batch.qx), tok(batch.kx), tok(batch.vx), lat(batch.ql), lat(batch.kl), lat(batch.vl), m, eq_variant
    )
    reduce = lambda t: T.tmean(t, axis=2)  # noqa: E731
    out = tuple(reduce(t) for t in (qm, km, vm))
    if out[0].shape != (b, l, e):
        raise ShapeError(f"pooled modulation produced {out[0].shape}, expected {(b, l, e)}")
    return out


def modulate_projection_init(batch: TokenBatch, relu_cap: float = 6.0):
    """Evidence-driven modulation with latents taken from the input projections."""
    ql, kl, vl, qx, kx = batch.ql, batch.kl, batch.vl, batch.qx, batch.kx
    for t in (ql, kl, vl, kx):
        if t.shape != qx.shape:
            raise ShapeError(f"projection-init operands must share a shape, got {t.shape} vs {qx.shape}")
    if _use_kernel(ql, kl, vl, qx, kx):
        record_macs(6 * qx.size)
        fn = kernels.get("modulate_projection")
        ts = (ql, kl, vl, qx, kx)
        arrs = [t.data for t in ts] if kernels.backend() == "python" else [_flat(t.data) for t in ts]
        out = fn(*arrs, float(relu_cap))
        return tuple(Tensor._wrap(np.asarray(o).reshape(qx.shape)) for o in out)
    qm = ql + ql * kx
    km = kl + kl * qx
    vm = T.relu_alpha(vl * vl + 2.0 * vl + qm * km * (1.0 + abs(vl)), relu_cap)
    return qm, km, vm


def prediction_error(qm, km, vm, ql, kl, vl) -> Tensor:
    return abs(qm - ql) + abs(km - kl) + abs(vm - vl)


def update_belief(belief: BeliefState, qm, km, vm, ql, kl, vl, clip: float = 10.0) -> BeliefState:
    """``mu <- mu * (1 + alpha * E)`` with E the summed absolute prediction errors."""
    err = prediction_error(qm, km, vm, ql, kl, vl)
    if not np.all(np.isfinite(err.data)):
        raise NumericError("non-finite prediction error in belief update")
    if belief.alpha == 0:
        return belief
    extra = err.ndim - belief.mu.ndim
    if extra > 0:
        # one belief per latent slot, shared by the batch
        err = T.tmean(err, axis=tuple(range(extra)))
    mu = belief.mu * (1.0 + belief.alpha * err)
    if clip is not None:
        mu = T.clip(mu, -clip, clip)
    return BeliefState(mu, belief.alpha)


# ---------------------------------------------------------------------------
# readout


def topk_cost(n: int, k: int) -> int:
    """``ceil(n * log2 k)`` comparisons for heap selection; zero when k == 1."""
    if k <= 1:
        return 0
    exact = n * math.log2(k)
    # guard float noise when k is a power of two
    r = round(exact)
    return int(r) if abs(exact - r) < 1e-9 else math.ceil(exact)


def topk_select(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores per row, best first; ties go to the lower index."""
    arr = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    n = arr.shape[-1]
    if not 1 <= k <= n:
        raise ConfigError(f"k={k} must lie in [1, {n}]")
    rows = np.ascontiguousarray(arr.reshape(-1, n), dtype=np.float64)
    record_macs(rows.shape[0] * topk_cost(n, k))
    idx = kernels.get("topk_rows")(rows, int(k))
    return np.asarray(idx).reshape(arr.shape[:-1] + (k,))


def token_scores(qm: Tensor, km: Tensor, vm: Tensor, heads: int, kind: str = "vm_norm") -> np.ndarray:
    """Per-head token salience, shape (B, H, N).  Not differentiated."""
    b, n, e = vm.shape
    dh = e // heads
    if kind == "vm_norm":
        v = vm.data.reshape(b, n, heads, dh)
        record_macs(v.size)
        s = np.sqrt((v * v).sum(-1))
    else:
        prod = (qm.data * km.data).reshape(b, n, heads, dh)
        record_macs(prod.size)
        s = np.abs(prod).sum(-1)
    return s.transpose(0, 2, 1)


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, e = x.shape
    return x.reshape(b, n, heads, e // heads).transpose(0, 2, 1, 3).reshape(b * heads, n, e // heads)


def merge_heads(x: Tensor, batch: int, heads: int) -> Tensor:
    bh, n, dh = x.shape
    return x.reshape(batch, heads, n, dh).transpose(0, 2, 1, 3).reshape(batch, n, heads * dh)


def attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention on (B, n, d) operands."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    logits = T.matmul(q, T.swap_last(k)) * scale
    w = T.softmax_rows(logits)
    return T.matmul(w, v), w


# ---------------------------------------------------------------------------
# layer


class Co4Layer(Module):
    def __init__(self, cfg: Co4Config, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        e = cfg.embed_dim
        self.norm = LayerNorm(e)
        self.wq = Linear(rng, e, e)
        self.wk = Linear(rng, e, e)
        self.wv = Linear(rng, e, e)
        if cfg.variant is Variant.NORMAL_INIT:
            ql, kl, vl = sample_latents(cfg, int(rng.integers(2**63)))
            self.ql, self.kl, self.vl = param(ql), param(kl), param(vl)
        if cfg.readout is Readout.TOPK_ATTN:
            self.out = Linear(rng, e, e)
        else:
            self.mlp = MLP(rng, e, cfg.hidden)

    def project(self, x: Tensor) -> TokenBatch:
        if x.ndim != 3 or x.shape[-1] != self.cfg.embed_dim:
            raise ShapeError(f"expected (B, N, {self.cfg.embed_dim}) tokens, got {x.shape}")
        with mac_section("norm"):
            h = self.norm(x)
        with mac_section("projection"):
            batch = TokenBatch(x, self.wq(h), self.wk(h), self.wv(h))
        if self.cfg.variant is Variant.PROJECTION_INIT:
            batch.ql, batch.kl, batch.vl = batch.qx, batch.kx, batch.vx
        else:
            batch.ql, batch.kl, batch.vl = self.ql, self.kl, self.vl
        return batch

    def initial_belief(self) -> BeliefState:
        cfg = self.cfg
        # a zero belief is a fixed point of the multiplicative update, so it
        # only starts off zero when alpha_mu can actually move it
        fill = 0.0 if cfg.alpha_mu == 0 else cfg.mu_init
        return BeliefState(Tensor(np.full((cfg.latents, cfg.embed_dim), fill)), cfg.alpha_mu)

    def modulate(self, batch: TokenBatch, mu: Tensor):
        cfg = self.cfg
        with mac_section("modulation"):
            if cfg.variant is Variant.PROJECTION_INIT:
                return modulate_projection_init(batch, cfg.relu_cap)
            return modulate_normal_init(batch, mu, cfg.eq_variant)

    def forward(self, x: Tensor, belief: BeliefState | None = None):
        cfg = self.cfg
        batch = self.project(x)
        belief = belief or self.initial_belief()
        for _ in range(cfg.iterations):
            qm, km, vm = self.modulate(batch, belief.mu)
            if not cfg.single_step:
                with mac_section("belief"):
                    belief = update_belief(belief, qm, km, vm, batch.ql, batch.kl, batch.vl, cfg.mu_clip)
        diag = {
            "mean_abs_R": float(np.mean(np.abs(batch.vl.data))),
            "mean_abs_C": float(np.mean(np.abs(qm.data * km.data))),
            "regime": classify_regime(batch.vl, qm.data * km.data, cfg.regime_thresholds).value,
            "mu": belief.mu,
        }
        if cfg.readout is Readout.MLP_ONLY:
            with mac_section("readout"):
                feats = self.mlp(vm)
            return feats, diag
        feats, sel, scores = self._topk_readout(qm, km, vm)
        diag["scores"] = scores
        diag["selected"] = sel
        return feats, diag

    __call__ = forward

    def _topk_readout(self, qm: Tensor, km: Tensor, vm: Tensor):
        cfg = self.cfg
        b = vm.shape[0]
        h = cfg.heads
        with mac_section("scoring"):
            scores = token_scores(qm, km, vm, h, cfg.score)  # (B, H, N)
        with mac_section("selection"):
            sel = topk_select(scores.reshape(b * h, -1), cfg.k)  # (B*H, k)
        with mac_section("attention"):
            q = T.gather_rows(split_heads(qm, h), sel)
            k = T.gather_rows(split_heads(km, h), sel)
            v = T.gather_rows(split_heads(vm, h), sel)
            ctx, _ = attention(q, k, v)
            ctx = merge_heads(ctx, b, h)
        with mac_section("readout"):
            feats = self.out(ctx)
        return feats, sel.reshape(b, h, cfg.k), scores


def co4_forward(batch: TokenBatch, cfg: Co4Config, params: Co4Layer):
    """Functional entry point: run ``params`` (a :class:`Co4Layer`) on ``batch.x``."""
    if params.cfg is not cfg:
        cfg.validate()
    return params.forward(batch.x)
