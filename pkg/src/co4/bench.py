"""Runtime scaling, kernel comparison and report emission."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _fallback, kernels
from . import tensor as T
from .baseline import VitBlock, VitConfig
from .co4_layer import Co4Config, Co4Layer
from .errors import ConfigError, FormatError
from .manifest import METRIC_COLUMNS, RunManifest, read_csv, write_csv
from .tensor import Tensor

BENCH_MODELS = ("co4_topk", "co4_mlp", "vit")
RUNTIME_COLUMNS = ("model", "N", "E", "k", "median_ms", "p10", "p90", "inner", "macs")
KERNEL_COLUMNS = ("kernel", "backend", "size", "median_ms", "speedup")
MIN_SAMPLE_S = 0.005


@dataclass
class BenchConfig:
    models: list[str] = field(default_factory=lambda: list(BENCH_MODELS))
    ns: list[int] = field(default_factory=lambda: [256, 512, 1024, 2048, 4096])
    embed_dim: int = 128
    k_rule: str = "sqrt"
    repetitions: int = 5
    warmup: int = 1
    batch: int = 1
    seed: int = 0

    def __post_init__(self):
        bad = [m for m in self.models if m not in BENCH_MODELS]
        if bad:
            raise ConfigError(f"unknown bench models {bad}; expected a subset of {BENCH_MODELS}")
        if list(self.ns) != sorted(self.ns) or len(set(self.ns)) != len(self.ns) or min(self.ns) < 1:
            raise ConfigError(f"N sweep must be strictly ascending positive integers, got {self.ns}")
        if self.repetitions < 5:
            raise ConfigError("repetitions must be >= 5")
        self.k_for(max(self.ns))

    def k_for(self, n: int) -> int:
        if self.k_rule == "sqrt":
            return math.ceil(math.sqrt(n))
        try:
            k = int(self.k_rule)
        except ValueError:
            raise ConfigError(f"k_rule must be 'sqrt' or an integer, got {self.k_rule!r}") from None
        if not 1 <= k:
            raise ConfigError("fixed k must be positive")
        return min(k, n)


def build_model(model: str, n: int, e: int, k: int, seed: int = 0):
    if model == "vit":
        return VitBlock(VitConfig(embed_dim=e, num_tokens=n), seed=seed)
    readout = "TOPK_ATTN" if model == "co4_topk" else "MLP_ONLY"
    return Co4Layer(Co4Config(embed_dim=e, num_tokens=n, k=k, readout=readout, variant="PROJECTION_INIT",
                              alpha_mu=0.0), seed=seed)


def time_call(fn, repetitions: int, warmup: int) -> tuple[list[float], int]:
    """Per-call wall times in ms.  The inner loop count doubles until one
    sample lasts at least ``MIN_SAMPLE_S`` so coarse timers stay accurate."""
    for _ in range(warmup):
        fn()
    inner = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        if time.perf_counter() - t0 >= MIN_SAMPLE_S or inner >= 1 << 16:
            break
        inner *= 2
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        samples.append((time.perf_counter() - t0) * 1e3 / inner)
    return samples, inner


def loglog_slope(ns, times) -> float:
    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(np.asarray(times, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def bench_runtime(cfg: BenchConfig, log=None) -> tuple[list[dict], dict[str, float]]:
    """Inference timing per (model, N).  Returns CSV rows and the log-log slope per model."""
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for model in cfg.models:
        for n in cfg.ns:
            k = cfg.k_for(n)
            layer = build_model(model, n, cfg.embed_dim, k, cfg.seed)
            x = Tensor(rng.normal(size=(cfg.batch, n, cfg.embed_dim)))
            with T.no_grad():
                with T.count_macs() as counter:
                    layer(x)
                samples, inner = time_call(lambda: layer(x), cfg.repetitions, cfg.warmup)
            row = {"model": model, "N": n, "E": cfg.embed_dim, "k": k if model == "co4_topk" else 0,
                   "median_ms": float(np.median(samples)), "p10": float(np.percentile(samples, 10)),
                   "p90": float(np.percentile(samples, 90)), "inner": inner, "macs": counter.total}
            rows.append(row)
            if log is not None:
                log(row)
    slopes = {m: loglog_slope([r["N"] for r in rows if r["model"] == m],
                              [r["median_ms"] for r in rows if r["model"] == m])
              for m in cfg.models if len(cfg.ns) > 1}
    return rows, slopes


# ---------------------------------------------------------------------------
# compiled vs python kernels


def _kernel_cases(rng: np.random.Generator) -> dict:
    n = 4096 * 128
    a = [rng.normal(size=n) for _ in range(6)]
    pop = rng.normal(0, 0.1, (16, _fallback.co4_param_count(16, 4, 4)))
    init = rng.uniform(-0.05, 0.05, (2, 4))
    noise = rng.normal(size=(2, 200, 2))
    return {
        "topk_rows": ((rng.normal(size=(64, 4096)), 64), 64 * 4096),
        "modulate_projection": ((*a[:5], 6.0), n),
        "modulate_normal": ((*a, np.zeros(1)), n),
        "lif_simulate": ((rng.normal(0.8, 0.3, (50, 100)), np.full((50, 100), 0.5), np.full((50, 100), 0.2),
                          20, 2000, 0.05, 16.0, 370.0, -70.0, 200.0, -50.0, 2.0, 27.0, -70.0, 100.0, 1000.0, -1.0),
                         50 * 2000),
        "rollout_population": (("co4", pop, (16, 4, 4), init, noise, np.arange(7, dtype=np.int64), 200, 0.02),
                               16 * 2 * 200),
    }


def bench_kernels(repetitions: int = 5, seed: int = 0) -> list[dict]:
    """Median time of each hot kernel on both backends (compiled rows only when built)."""
    cases = _kernel_cases(np.random.default_rng(seed))
    backends = ["python"] + (["compiled"] if kernels.compiled_available() else [])
    rows = []
    for name, (args, size) in cases.items():
        med = {}
        for be in backends:
            fn = kernels.get(name, be)
            samples, _ = time_call(lambda: fn(*args), repetitions, 1)
            med[be] = float(np.median(samples))
        for be in backends:
            rows.append({"kernel": name, "backend": be, "size": size, "median_ms": med[be],
                         "speedup": med["python"] / med[be]})
    return rows


# ---------------------------------------------------------------------------
# report


ACCURACY_COLUMNS = ("run", "seed") + METRIC_COLUMNS
SWEEP_REPORT_COLUMNS = ("param", "value", "seed", "val_acc", "val_loss")
REGIME_COLUMNS = ("seed", "regime", "p_burst", "spikes", "rate_hz")
REPORT_FILES = {
    "accuracy_vs_epoch.csv": ACCURACY_COLUMNS,
    "runtime_vs_n.csv": RUNTIME_COLUMNS,
    "k_sweep.csv": SWEEP_REPORT_COLUMNS,
    "regime_grid.csv": REGIME_COLUMNS,
}


def _check(rows: list[dict], columns, what: str) -> None:
    for r in rows:
        missing = [c for c in columns if c not in r]
        if missing:
            raise FormatError(f"{what}: row lacks columns {missing}")


def emit_report(out_dir: Path, manifests=(), benches=(), sweeps=(), regimes=(), deterministic: bool = False) -> dict:
    """Write one CSV per plot.  Inputs are manifests (objects,
    dicts or paths), runtime rows, sweep rows and regime summaries."""
    out_dir = Path(out_dir)
    acc = []
    for i, m in enumerate(manifests):
        if isinstance(m, (str, Path)):
            m = RunManifest.read(m)
        elif isinstance(m, dict):
            try:
                m = RunManifest(m["config"], m["seed"], m.get("epochs", []))
            except KeyError as e:
                raise FormatError(f"manifest {i} lacks {e}") from None
        run = m.config.get("model", {}).get("blocks", ["?"]) if isinstance(m.config.get("model"), dict) else ["?"]
        for r in m.metric_rows():
            acc.append({"run": f"{i}:{'+'.join(run)}", "seed": m.seed, **r})
    benches = list(benches)
    _check(benches, RUNTIME_COLUMNS, "runtime rows")
    ksweep = [r for r in sweeps if r.get("param") == "k"]
    _check(ksweep, SWEEP_REPORT_COLUMNS, "sweep rows")
    reg = []
    for s in regimes:
        if "regimes" not in s:
            raise FormatError("regime summary lacks 'regimes'")
        for name, v in s["regimes"].items():
            reg.append({"seed": s.get("seed", 0), "regime": name, **v})
    _check(reg, REGIME_COLUMNS, "regime summaries")
    out = {}
    for fname, rows in (("accuracy_vs_epoch.csv", acc), ("runtime_vs_n.csv", benches),
                        ("k_sweep.csv", ksweep), ("regime_grid.csv", reg)):
        out[fname] = write_csv(out_dir / fname, REPORT_FILES[fname], rows, deterministic)
    return out


def collect(dirs) -> dict:
    """Find manifests, runtime CSVs, sweep CSVs and regime summaries under ``dirs``."""
    found = {"manifests": [], "benches": [], "sweeps": [], "regimes": []}
    for d in dirs:
        d = Path(d)
        if not d.exists():
            raise FormatError(f"{d}: no such directory")
        for p in sorted(d.rglob("*")):
            if p.name == "manifest.json":
                found["manifests"].append(p)
            elif p.name == "runtime.csv":
                found["benches"].extend(read_csv(p, RUNTIME_COLUMNS))
            elif p.name == "sweep.csv":
                found["sweeps"].extend(read_csv(p, SWEEP_REPORT_COLUMNS))
            elif p.name == "regimes.json":
                found["regimes"].append(json.loads(p.read_text()))
    return found


def write_runtime(out_dir: Path, rows, slopes, deterministic: bool = False, kernel_rows=()) -> None:
    out_dir = Path(out_dir)
    write_csv(out_dir / "runtime.csv", RUNTIME_COLUMNS, rows, deterministic)
    summary = {"slopes": {} if deterministic else slopes,
               "macs": {f"{r['model']}@{r['N']}": r["macs"] for r in rows}}
    if kernel_rows:
        write_csv(out_dir / "kernels.csv", KERNEL_COLUMNS, kernel_rows, deterministic)
    if deterministic:
        timings = {"slopes": slopes, "rows": rows, "kernels": list(kernel_rows)}
        (out_dir / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True))
    (out_dir / "bench.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
