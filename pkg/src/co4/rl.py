"""Permutation-invariant sensory policies on a built-in cart-pole.

Each observation channel is one sensor.  A shared network turns a sensor's
current reading, its rate of change and the previous action into the
evidence ``K``; a second shared network turns the current reading into
``V``.  A learned query bank supplies context through ``C = Q * V``, so the
observation never reaches ``Q``.  The modulated message is averaged over
sensors, which makes the policy invariant to the sensor order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _fallback as F
from . import kernels
from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

PHYSICAL = ("x", "x_dot", "cos_theta", "sin_theta", "theta_dot")
MAX_STEPS = 500
DT = 0.02


def sensor_labels(n_noise: int = 2) -> list[str]:
    h = n_noise // 2
    return [f"noise{i}" for i in range(h)] + list(PHYSICAL) + [f"noise{i}" for i in range(h, n_noise)]


def sensory_message(R, C, cap: float = 6.0) -> Tensor:
    """``relu_cap(R**2 + 2R + C*(1 + |R|))`` on tensors."""
    R = T._as_tensor(R)
    C = T._as_tensor(C)
    T.broadcast_shape(R.shape, C.shape)
    return T.relu_alpha(R * R + 2.0 * R + C * (1.0 + abs(R)), cap)


# ---------------------------------------------------------------------------
# policies


@dataclass(frozen=True)
class SensoryLayer:
    """Shapes of the Co4 sensory policy: hidden width, feature dim, queries."""

    hidden: int = 16
    dim: int = 4
    queries: int = 4

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.hidden, self.dim, self.queries)

    def num_params(self, n_sensors: int | None = None) -> int:
        return F.co4_param_count(*self.dims)

    def init(self, rng: np.random.Generator, scale: float = 0.5, n_sensors: int | None = None) -> np.ndarray:
        return rng.normal(0.0, scale, self.num_params())

    def unpack(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        h, d, m = self.dims
        off = F._co4_offsets(h, d, m)
        shapes = {"wk1": (3, h), "bk1": (h,), "wk2": (h, d), "wv1": (1, h), "bv1": (h,),
                  "wv2": (h, d), "q": (m, d), "wo": (m * d,), "bo": ()}
        return {k: theta[off[k]:off[k] + int(np.prod(s))].reshape(s) for k, s in shapes.items()}


@dataclass(frozen=True)
class MlpPolicy:
    """Order-dependent baseline: one tanh hidden layer on the raw observation."""

    hidden: int = 16

    @property
    def dims(self) -> tuple[int]:
        return (self.hidden,)

    def num_params(self, n_sensors: int) -> int:
        return F.mlp_param_count(n_sensors, self.hidden)

    def init(self, rng: np.random.Generator, scale: float = 0.5, n_sensors: int = 7) -> np.ndarray:
        return rng.normal(0.0, scale, self.num_params(n_sensors))


def make_policy(kind: str):
    if kind == "co4":
        return SensoryLayer()
    if kind in ("baseline", "mlp"):
        return MlpPolicy()
    raise ConfigError(f"unknown policy {kind!r}; expected co4 or baseline")


def _kind(policy) -> str:
    return "co4" if isinstance(policy, SensoryLayer) else "mlp"


def sensory_forward(obs, prev_action: float, layer: SensoryLayer, theta: np.ndarray, prev_obs=None,
                    per_sensor: bool = False, dt: float = DT) -> np.ndarray:
    """Message ``m_t`` of shape (queries, dim), or (queries, sensors, dim) with ``per_sensor``."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim != 1 or obs.size == 0:
        raise ShapeError(f"observation must be a non-empty vector, got shape {obs.shape}")
    prev = obs if prev_obs is None else np.asarray(prev_obs, dtype=np.float64)
    if prev.shape != obs.shape:
        raise ShapeError(f"previous observation {prev.shape} does not match {obs.shape}")
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (layer.num_params(),):
        raise ShapeError(f"theta has {theta.size} entries, policy needs {layer.num_params()}")
    out = F.co4_policy_message(theta[None], layer.dims, obs[None], prev[None], np.array([prev_action]),
                               dt, per_sensor=per_sensor)
    return out[0]


# ---------------------------------------------------------------------------
# environment


def cartpole_step(state, action: float, dt: float = DT, t: int = 0):
    """One Euler step.  Returns ``(state', reward, done)``; ``t`` counts steps taken before this one."""
    s = np.ascontiguousarray(np.asarray(state, dtype=np.float64).reshape(1, 4))
    nxt = kernels.get("cartpole_step")(s, np.array([float(action)]), float(dt))[0]
    done = bool(abs(nxt[2]) > F.THETA_LIMIT or abs(nxt[0]) > F.X_LIMIT or t + 1 >= MAX_STEPS)
    return np.asarray(nxt), 1.0, done


@dataclass
class EpisodeSet:
    init_states: np.ndarray  # (E, 4)
    noise: np.ndarray  # (E, T, n_noise)

    @classmethod
    def draw(cls, rng: np.random.Generator, episodes: int, n_noise: int = 2, max_steps: int = MAX_STEPS):
        init = rng.uniform(-0.05, 0.05, (episodes, 4))
        noise = rng.normal(0.0, 1.0, (episodes, max_steps, n_noise))
        return cls(init, noise)

    @property
    def n_sensors(self) -> int:
        return 5 + self.noise.shape[2]


def rollout(policy, thetas: np.ndarray, episodes: EpisodeSet, perm=None, max_steps: int = MAX_STEPS) -> np.ndarray:
    """Returns (P, E) episode lengths for a population ``thetas`` (P, n)."""
    thetas = np.ascontiguousarray(np.atleast_2d(thetas), dtype=np.float64)
    ns = episodes.n_sensors
    perm = np.arange(ns, dtype=np.int64) if perm is None else np.ascontiguousarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(ns)):
        raise ShapeError(f"perm must be a permutation of {ns} sensors")
    fn = kernels.get("rollout_population")
    return np.asarray(fn(_kind(policy), thetas, policy.dims, np.ascontiguousarray(episodes.init_states),
                         np.ascontiguousarray(episodes.noise), perm, int(max_steps), DT))


# ---------------------------------------------------------------------------
# evolution strategies


@dataclass
class EsConfig:
    pop_size: int = 64
    generations: int = 300
    sigma: float = 0.1
    lr: float = 0.1
    episodes: int = 2
    eval_episodes: int = 5
    init_scale: float = 0.1
    n_noise: int = 2
    shuffle: bool = False
    elitism: bool = False
    target: float | None = None

    def __post_init__(self):
        if self.pop_size < 2 or self.pop_size % 2:
            raise ConfigError(f"pop_size must be even and >= 2, got {self.pop_size}")
        if self.generations < 0 or self.episodes < 1 or self.eval_episodes < 1:
            raise ConfigError("generations >= 0, episodes >= 1 and eval_episodes >= 1 are required")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")


@dataclass
class EsResult:
    theta: np.ndarray
    history: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def final(self) -> float:
        return self.history[-1]["center"] if self.history else float("nan")


def centered_ranks(x: np.ndarray) -> np.ndarray:
    """Ranks scaled to [-0.5, 0.5]; tied fitnesses share their average rank,
    so an antithetic pair with equal returns contributes no gradient."""
    x = np.asarray(x)
    _, inv, counts = np.unique(x, return_inverse=True, return_counts=True)
    first = np.concatenate([[0], np.cumsum(counts)[:-1]])
    r = (first + (counts - 1) / 2.0)[inv]
    return r / max(len(x) - 1, 1) - 0.5


def train_es(policy, cfg: EsConfig, seed: int = 0, log=None) -> EsResult:
    """Antithetic ES with centred ranks and an Adam step.

    The centre is scored on a fixed held-out episode set every generation.
    With ``elitism`` the returned parameters and the ``best`` history column
    track the best centre seen so far, so that column never decreases.
    """
    rng = np.random.default_rng(seed)
    ns = 5 + cfg.n_noise
    theta = policy.init(rng, cfg.init_scale, n_sensors=ns)
    n = theta.size
    m = np.zeros(n)
    v = np.zeros(n)
    eval_set = EpisodeSet.draw(np.random.default_rng([seed, 7]), cfg.eval_episodes, cfg.n_noise)
    elite, elite_fit = theta.copy(), -math.inf
    history = []
    half = cfg.pop_size // 2
    for g in range(cfg.generations):
        eps = rng.normal(size=(half, n))
        eps = np.concatenate([eps, -eps])
        eps_set = EpisodeSet.draw(rng, cfg.episodes, cfg.n_noise)
        perm = rng.permutation(ns) if cfg.shuffle else None
        fit = rollout(policy, theta + cfg.sigma * eps, eps_set, perm).mean(axis=1)
        if cfg.sigma > 0:
            grad = centered_ranks(fit) @ eps / (cfg.pop_size * cfg.sigma)
            m = 0.9 * m + 0.1 * grad
            v = 0.999 * v + 0.001 * grad * grad
            c1 = 1 - 0.9 ** (g + 1)
            c2 = 1 - 0.999 ** (g + 1)
            theta = theta + cfg.lr * (m / c1) / (np.sqrt(v / c2) + 1e-8)
        center = float(rollout(policy, theta, eval_set, perm).mean())
        if center > elite_fit:
            elite, elite_fit = theta.copy(), center
        row = {"generation": g, "pop_best": float(fit.max()), "pop_mean": float(fit.mean()), "center": center,
               "best": elite_fit if cfg.elitism else max(center, float(fit.max()))}
        history.append(row)
        if log is not None:
            log(row)
        if cfg.target is not None and center >= cfg.target:
            break
    return EsResult(elite if cfg.elitism else theta, history, asdict(cfg))


def evaluate_policy(policy, theta, seed: int, episodes: int = 10, n_noise: int = 2, shuffle: bool = False,
                    max_steps: int = MAX_STEPS) -> float:
    """Mean episode length; with ``shuffle`` every episode gets its own sensor permutation."""
    rng = np.random.default_rng([seed, 11])
    eps = EpisodeSet.draw(rng, episodes, n_noise, max_steps)
    if not shuffle:
        return float(rollout(policy, theta, eps, None, max_steps).mean())
    total = 0.0
    for e in range(episodes):
        one = EpisodeSet(eps.init_states[e:e + 1], eps.noise[e:e + 1])
        total += float(rollout(policy, theta, one, rng.permutation(eps.n_sensors), max_steps)[0, 0])
    return total / episodes


# ---------------------------------------------------------------------------
# relevance


def run_episode(layer: SensoryLayer, theta: np.ndarray, episodes: EpisodeSet, index: int = 0, perm=None,
                max_steps: int = MAX_STEPS) -> tuple[int, np.ndarray]:
    """Replay one episode in Python, returning its length and per-step,
    per-sensor modulation magnitude (steps, sensors)."""
    ns = episodes.n_sensors
    perm = np.arange(ns) if perm is None else np.asarray(perm)
    state = episodes.init_states[index].copy()
    prev = None
    act = 0.0
    rel = []
    for t in range(max_steps):
        obs = F.observe(state[None], episodes.noise[index, t], episodes.noise.shape[2])[0][perm]
        prev = obs if prev is None else prev
        z = sensory_forward(obs, act, layer, theta, prev, per_sensor=True)  # (M, S, D)
        mag = np.abs(z).mean(axis=(0, 2))
        rel.append(mag[np.argsort(perm)])  # back to canonical sensor order
        msg = z.mean(axis=1).reshape(-1)
        p = layer.unpack(theta)
        act = 1.0 if float(msg @ p["wo"] + p["bo"]) > 0 else -1.0
        prev = obs
        state, _, done = cartpole_step(state, act, DT, t)
        if done:
            break
    return len(rel), np.asarray(rel)


HEATMAP_COLUMNS = ("episode", "step", "sensor", "relevance")


def attention_heatmap(layer: SensoryLayer, theta: np.ndarray, episodes: int = 3, seed: int = 0,
                      n_noise: int = 2, max_steps: int = MAX_STEPS) -> tuple[np.ndarray, list[dict]]:
    """Time-averaged per-sensor relevance (episodes, sensors) and long-format rows."""
    eps = EpisodeSet.draw(np.random.default_rng([seed, 13]), episodes, n_noise, max_steps)
    labels = sensor_labels(n_noise)
    mat = np.zeros((episodes, eps.n_sensors))
    rows = []
    for e in range(episodes):
        _, rel = run_episode(layer, theta, eps, e, max_steps=max_steps)
        mat[e] = rel.mean(axis=0)
        for t, r in enumerate(rel):
            rows.extend({"episode": e, "step": t, "sensor": labels[i], "relevance": float(r[i])}
                        for i in range(len(labels)))
    return mat, rows
