"""Adaptive LIF somata driven by a context-sensitive modulation current.

Units: mV, ms, pF, pA.  Input currents are given in nA and scaled to pA
before they reach the membrane.  The leak is restoring,
``dV/dt = -(V - E_L)/tau_s + Mod/C_s - w/C_s``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from . import tensor as T
from .errors import ConfigError
from .manifest import write_csv
from .tensor import Tensor

MAX_DT = 0.1
REGIMES = ("LL", "LH", "HL", "HH")
RASTER_COLUMNS = ("neuron_id", "time_ms", "is_burst")


@dataclass(frozen=True)
class NeuronParams:
    tau_s: float = 16.0
    c_s: float = 370.0
    e_l: float = -70.0
    b: float = 200.0
    v_th: float = -50.0
    th_inc: float = 2.0
    th_tau: float = 27.0
    v_reset: float = -70.0
    tau_ws: float = 100.0
    current_scale: float = 1000.0  # nA -> pA
    leak_sign: float = -1.0

    def __post_init__(self):
        for name in ("tau_s", "c_s", "th_tau", "tau_ws"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")


def mod_current(i_s, i_c, i_u):
    """``I_s + I_c(0.1 + |I_s|) + I_c I_u (2 + |I_s|)``; tensors keep their tape."""
    if any(isinstance(v, Tensor) for v in (i_s, i_c, i_u)):
        i_s, i_c, i_u = (T._as_tensor(v) for v in (i_s, i_c, i_u))
        a = abs(i_s)
        return i_s + i_c * (0.1 + a) + i_c * i_u * (2.0 + a)
    i_s, i_c, i_u = (np.asarray(v, dtype=np.float64) for v in (i_s, i_c, i_u))
    a = np.abs(i_s)
    out = i_s + i_c * (0.1 + a) + i_c * i_u * (2.0 + a)
    return float(out) if out.ndim == 0 else out


@dataclass
class NeuronState:
    v: np.ndarray
    w: np.ndarray
    th: np.ndarray

    @classmethod
    def rest(cls, n: int, p: NeuronParams = NeuronParams()) -> "NeuronState":
        return cls(np.full(n, p.e_l), np.zeros(n), np.full(n, p.v_th))


def _check_dt(dt: float) -> None:
    if not 0 < dt <= MAX_DT:
        raise ConfigError(f"dt={dt} ms outside (0, {MAX_DT}]; forward Euler needs a small step")


def step_neuron(state: NeuronState, inputs, dt: float, p: NeuronParams = NeuronParams()):
    """One forward-Euler step.  ``inputs`` is ``(I_s, I_c, I_u)`` in nA.

    Returns ``(state', spiked)``.
    """
    _check_dt(dt)
    drive = p.current_scale * mod_current(*inputs) / p.c_s
    v = state.v + dt * (p.leak_sign * (state.v - p.e_l) / p.tau_s + drive - state.w / p.c_s)
    w = state.w - dt * state.w / p.tau_ws
    th = state.th - dt * (state.th - p.v_th) / p.th_tau
    fired = v >= th
    v = np.where(fired, p.v_reset, v)
    th = np.where(fired, th + p.th_inc, th)
    w = np.where(fired, w + p.b, w)
    return NeuronState(v, w, th), fired


@dataclass
class SpikeTrain:
    neuron: int
    times: np.ndarray
    burst: np.ndarray


def burst_flags(times: np.ndarray, window: float) -> np.ndarray:
    """A spike is part of a burst when a neighbouring spike lies within ``window`` ms."""
    if window <= 0:
        raise ConfigError("burst window must be positive")
    flags = np.zeros(len(times), dtype=bool)
    if len(times) > 1:
        close = np.diff(times) < window
        flags[1:] |= close
        flags[:-1] |= close
    return flags


@dataclass
class SimResult:
    spike_neuron: np.ndarray
    spike_time: np.ndarray
    vmin: np.ndarray
    overshoot: np.ndarray  # max over time of V - threshold
    final: NeuronState
    n_neurons: int

    def trains(self, window: float = 16.0) -> list[SpikeTrain]:
        order = np.lexsort((self.spike_time, self.spike_neuron))
        sn, st = self.spike_neuron[order], self.spike_time[order]
        out = []
        bounds = np.searchsorted(sn, np.arange(self.n_neurons + 1))
        for i in range(self.n_neurons):
            t = st[bounds[i]:bounds[i + 1]]
            out.append(SpikeTrain(i, t, burst_flags(t, window)))
        return out

    @property
    def n_spikes(self) -> int:
        return int(self.spike_neuron.size)


def simulate(i_s: np.ndarray, i_c: np.ndarray, i_u: np.ndarray, duration_ms: float, dt: float = 0.05,
             bin_ms: float = 1.0, p: NeuronParams = NeuronParams()) -> SimResult:
    """Integrate a population whose inputs (neurons, bins) in nA are constant within ``bin_ms`` bins."""
    _check_dt(dt)
    i_s, i_c, i_u = (np.ascontiguousarray(np.atleast_2d(a), dtype=np.float64) for a in (i_s, i_c, i_u))
    bin_steps = int(round(bin_ms / dt))
    n_steps = int(round(duration_ms / dt))
    if bin_steps < 1 or abs(bin_steps * dt - bin_ms) > 1e-9:
        raise ConfigError(f"bin_ms={bin_ms} must be a whole number of dt={dt} steps")
    need = -(-n_steps // bin_steps)
    if i_s.shape[1] < need or i_c.shape != i_s.shape or i_u.shape != i_s.shape:
        raise ConfigError(f"inputs must share a shape with at least {need} bins")
    fn = kernels.get("lif_simulate")
    sn, st, vmin, over, v, w, th = fn(i_s, i_c, i_u, bin_steps, n_steps, dt, p.tau_s, p.c_s, p.e_l, p.b, p.v_th,
                                      p.th_inc, p.th_tau, p.v_reset, p.tau_ws, p.current_scale, p.leak_sign)
    return SimResult(np.asarray(sn, dtype=np.int64), np.asarray(st), np.asarray(vmin), np.asarray(over),
                     NeuronState(np.asarray(v), np.asarray(w), np.asarray(th)), i_s.shape[0])


def burst_probability(res: SimResult, window: float = 16.0) -> float:
    """Fraction of spikes that belong to bursts; 0 for a silent population."""
    if res.n_spikes == 0:
        return 0.0
    flagged = sum(int(t.burst.sum()) for t in res.trains(window))
    return flagged / res.n_spikes


# ---------------------------------------------------------------------------
# regime grid


@dataclass
class RegimeLevels:
    """Mean input amplitudes in nA.  The first regime letter is the
    somatic (evidence) level, the second the apical (context) level."""

    s_low: float = 0.3
    s_high: float = 1.0
    c_low: float = 0.05
    c_high: float = 0.8
    u: float = 0.2
    noise: float = 0.3  # std of the per-bin somatic fluctuation

    def means(self, regime: str) -> tuple[float, float, float]:
        code = regime.upper()
        if code not in REGIMES:
            raise ConfigError(f"unknown regime {regime!r}; expected one of {REGIMES}")
        s = self.s_high if code[0] == "H" else self.s_low
        c = self.c_high if code[1] == "H" else self.c_low
        return s, c, self.u


@dataclass
class GridConfig:
    population: int = 150
    duration_ms: float = 10_000.0
    dt: float = 0.05
    bin_ms: float = 1.0
    burst_window: float = 16.0
    levels: RegimeLevels = field(default_factory=RegimeLevels)
    params: NeuronParams = field(default_factory=NeuronParams)


def regime_inputs(regime: str, cfg: GridConfig, rng: np.random.Generator):
    s, c, u = cfg.levels.means(regime)
    bins = int(np.ceil(cfg.duration_ms / cfg.bin_ms))
    shape = (cfg.population, bins)
    i_s = s + cfg.levels.noise * rng.standard_normal(shape)
    return i_s, np.full(shape, c), np.full(shape, u)


def run_regime_grid(cfg: GridConfig = GridConfig(), regimes=REGIMES, seed: int = 0,
                    out_dir: Path | None = None, deterministic: bool = True) -> dict:
    """Simulate each regime on its own population; returns the summary dict."""
    summary = {"seed": seed, "config": asdict(cfg), "regimes": {}}
    for k, regime in enumerate(regimes):
        rng = np.random.default_rng([seed, k])
        res = simulate(*regime_inputs(regime, cfg, rng), cfg.duration_ms, cfg.dt, cfg.bin_ms, cfg.params)
        trains = res.trains(cfg.burst_window)
        p_burst = burst_probability(res, cfg.burst_window)
        summary["regimes"][regime] = {
            "p_burst": p_burst,
            "spikes": res.n_spikes,
            "rate_hz": res.n_spikes / cfg.population / (cfg.duration_ms / 1000.0),
            "mean_inputs_nA": list(cfg.levels.means(regime)),
        }
        if out_dir is not None:
            rows = [{"neuron_id": t.neuron, "time_ms": round(float(x), 6), "is_burst": int(f)}
                    for t in trains for x, f in zip(t.times, t.burst)]
            write_csv(Path(out_dir) / f"raster_{regime}.csv", RASTER_COLUMNS, rows, deterministic)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "regimes.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
