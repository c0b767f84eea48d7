"""``co4`` command line: train, bench, macs, ablate, rl, spiking, report.

Exit codes: 0 ok, 2 config error, 3 data/format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import bench, macs, rl, spiking, train
from .data import DatasetSpec, Source
from .errors import Co4Error, ConfigError
from .manifest import write_csv
from .model import ModelConfig
from .tensor import save_tensor

log = logging.getLogger("co4")

DATA_SOURCES = {"cifar10": Source.CIFAR10_BIN, "synthetic": Source.SYNTHETIC_BLOBS}


# ---------------------------------------------------------------------------
# config files


def _parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        pass
    if "," in raw:
        return [_parse_value(x) for x in raw.split(",") if x.strip()]
    return raw


def load_config(path: str | None) -> dict:
    """JSON object, or ``key = value`` lines with ``#`` comments."""
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    if text.lstrip().startswith("{"):
        try:
            out = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return _flatten(out)
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


class Overrides:
    """Routes flat config keys (``field`` or ``section.field``) to dataclasses
    and complains about anything left unused."""

    def __init__(self, values: dict):
        self.values = dict(values)
        self.used: set[str] = set()

    def build(self, cls, section: str, **explicit):
        names = {f.name for f in dataclasses.fields(cls)}
        kw = {}
        for key, value in self.values.items():
            name = key.split(".", 1)[1] if key.startswith(section + ".") else key
            if "." in name or name not in names:
                continue
            if "." not in key and f"{section}.{name}" in self.values:
                continue
            kw[name] = value
            self.used.add(key)
        kw.update({k: v for k, v in explicit.items() if v is not None})
        try:
            return cls(**kw)
        except TypeError as e:
            raise ConfigError(f"bad {section} config: {e}") from None

    def check(self) -> None:
        unused = sorted(set(self.values) - self.used)
        if unused:
            raise ConfigError(f"unknown config keys {unused}")


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# verbs


def _data_spec(args, ov: Overrides) -> DatasetSpec:
    src = DATA_SOURCES[args.data] if args.data else None
    return ov.build(DatasetSpec, "data", source=src, root=args.data_root)


def cmd_train(args, ov: Overrides) -> int:
    spec = _data_spec(args, ov)
    model_cfg = ov.build(ModelConfig, "model", model=args.model, heads=args.heads, k=args.k)
    opt = ov.build(train.OptConfig, "opt", epochs=args.epochs)
    ov.check()
    seeds = _ints(args.seeds) if args.seeds else [args.seed]
    out = Path(args.out)
    if args.sweep:
        param, _, values = args.sweep.partition("=")
        vals = _parse_value(values)
        vals = vals if isinstance(vals, list) else [vals]
        rows = train.sweep(model_cfg, param, vals, spec, opt, seeds, out / "sweep.csv", args.deterministic)
        for r in rows:
            print(f"{r['param']}={r['value']} seed={r['seed']} val_acc={r['val_acc']:.4f}")
        return 0
    for s in seeds:
        m = train.train(model_cfg, spec, opt, seed=s, out_dir=out / f"seed{s}", deterministic=args.deterministic)
        last = m.epochs[-1]
        print(f"seed={s} epochs={len(m.epochs)} val_acc={last['val_acc']:.4f} val_loss={last['val_loss']:.4f}")
    return 0


def cmd_ablate(args, ov: Overrides) -> int:
    spec = _data_spec(args, ov)
    base = ov.build(ModelConfig, "model", model="co4")
    if "variant" not in ov.used and "model.variant" not in ov.used:
        base = dataclasses.replace(base, variant="NORMAL_INIT", readout="TOPK_ATTN")
    opt = ov.build(train.OptConfig, "opt", epochs=args.epochs)
    ov.check()
    seeds = _ints(args.seeds) if args.seeds else [args.seed]
    rows = train.ablate(args.variants.split(","), spec, opt, seeds, base, Path(args.out) / "ablation.csv",
                        args.deterministic)
    for r in rows:
        print(f"{r['variant']:<18} seed={r['seed']} val_acc={r['val_acc']:.4f}")
    return 0


def cmd_bench(args, ov: Overrides) -> int:
    cfg = ov.build(bench.BenchConfig, "bench", models=args.models.split(",") if args.models else None,
                   ns=_ints(args.ns) if args.ns else None, embed_dim=args.embed_dim, k_rule=args.k_rule,
                   repetitions=args.repetitions, seed=args.seed)
    ov.check()
    rows, slopes = bench.bench_runtime(cfg, log=lambda r: log.info("%s N=%d median %.3f ms", r["model"], r["N"],
                                                                   r["median_ms"]))
    krows = bench.bench_kernels(cfg.repetitions, cfg.seed) if args.kernels else []
    bench.write_runtime(Path(args.out), rows, slopes, args.deterministic, krows)
    for m, s in slopes.items():
        print(f"{m:<9} log-log slope {s:.3f}")
    for r in krows:
        print(f"{r['kernel']:<20} {r['backend']:<9} {r['median_ms']:9.3f} ms  x{r['speedup']:.1f}")
    return 0


def cmd_macs(args, ov: Overrides) -> int:
    ov.check()
    total = macs.macs_estimate(args.model, args.layers, args.n, args.embed_dim, args.k, args.latents)
    print(f"{args.model} MACs: {total}")
    rows = [{"model": args.model, "L": args.layers, "N": args.n, "E": args.embed_dim, "k": args.k or "",
             "l": args.latents or "", "macs": total}]
    write_csv(Path(args.out) / "macs.csv", ("model", "L", "N", "E", "k", "l", "macs"), rows, args.deterministic)
    if args.compare:
        if args.k is None:
            raise ConfigError("--compare needs --k")
        cmp_rows = macs.compare_terms(args.n, args.embed_dim, args.k, args.seed)
        for r in cmp_rows:
            print(f"{r['term']:<11} formula {r['formula']:>12} instrumented {r['instrumented']:>14.1f}"
                  f"  ratio {r['ratio']:.4f}")
        write_csv(Path(args.out) / "macs_terms.csv", ("term", "formula", "instrumented", "ratio"), cmp_rows,
                  args.deterministic)
    return 0


def cmd_rl(args, ov: Overrides) -> int:
    policy = rl.make_policy(args.model)
    cfg = ov.build(rl.EsConfig, "es", shuffle=args.shuffle, generations=args.generations, n_noise=args.noise)
    ov.check()
    res = rl.train_es(policy, cfg, seed=args.seed,
                      log=lambda r: log.info("gen %d center %.1f best %.1f", r["generation"], r["center"], r["best"]))
    out = Path(args.out)
    write_csv(out / "fitness.csv", ("generation", "pop_best", "pop_mean", "center", "best"), res.history,
              args.deterministic)
    plain = rl.evaluate_policy(policy, res.theta, args.seed, n_noise=cfg.n_noise, shuffle=False)
    shuffled = rl.evaluate_policy(policy, res.theta, args.seed, n_noise=cfg.n_noise, shuffle=True)
    summary = {"model": args.model, "seed": args.seed, "config": res.config, "final_center": res.final,
               "eval_unshuffled": plain, "eval_shuffled": shuffled, "shuffle_drop": plain - shuffled}
    if isinstance(policy, rl.SensoryLayer):
        _, rows = rl.attention_heatmap(policy, res.theta, seed=args.seed, n_noise=cfg.n_noise)
        write_csv(out / "heatmap.csv", rl.HEATMAP_COLUMNS, rows, args.deterministic)
    save_tensor(out / "theta.co4t", res.theta)
    (out / "rl.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(f"{args.model}: unshuffled {plain:.1f}  shuffled {shuffled:.1f}  drop {plain - shuffled:.1f}")
    return 0


def cmd_spiking(args, ov: Overrides) -> int:
    levels = ov.build(spiking.RegimeLevels, "levels")
    params = ov.build(spiking.NeuronParams, "neuron")
    grid = ov.build(spiking.GridConfig, "grid", population=args.population, duration_ms=args.duration,
                    dt=args.dt, levels=levels, params=params)
    ov.check()
    regimes = [r.strip().upper() for r in args.regimes.split(",") if r.strip()]
    summary = spiking.run_regime_grid(grid, regimes, args.seed, Path(args.out), args.deterministic)
    rows = [{"seed": args.seed, "regime": k, **v} for k, v in summary["regimes"].items()]
    write_csv(Path(args.out) / "regime_grid.csv", bench.REGIME_COLUMNS, rows, args.deterministic)
    for r in rows:
        print(f"{r['regime']}: P_burst {r['p_burst']:.3f}  spikes {r['spikes']}  rate {r['rate_hz']:.2f} Hz")
    return 0


def cmd_report(args, ov: Overrides) -> int:
    ov.check()
    found = bench.collect(args.inputs)
    written = bench.emit_report(Path(args.out), found["manifests"], found["benches"], found["sweeps"],
                                found["regimes"], args.deterministic)
    for name, path in written.items():
        print(f"{name}: {path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--deterministic", action="store_true",
                        help="zero wall-clock CSV columns so repeated runs are byte-identical")
    common.add_argument("--config", help="JSON or key=value file")
    common.add_argument("--out", help="output directory (default runs/<verb>)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="co4", description="Co4 layers, baselines and experiment harnesses.")
    sub = p.add_subparsers(dest="verb", required=True)

    def data_args(sp):
        sp.add_argument("--data", choices=sorted(DATA_SOURCES))
        sp.add_argument("--data-root", help="CIFAR-10 binary directory (else $CO4_CIFAR10_ROOT)")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--seeds", help="comma-separated seeds; overrides --seed")

    sp = sub.add_parser("train", parents=[common], help="train a patch classifier")
    sp.add_argument("--model", choices=["co4", "vit"])
    sp.add_argument("--heads", type=int)
    sp.add_argument("--k", type=int)
    sp.add_argument("--sweep", help="param=v1,v2 sweep over one model parameter")
    data_args(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("ablate", parents=[common], help="compare Q/K/V equation variants")
    sp.add_argument("--variants", default="canonical,self_context,aa_qk,v_passthrough,v_multiplicative")
    data_args(sp)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("bench", parents=[common], help="runtime versus sequence length")
    sp.add_argument("--models", help=f"subset of {','.join(bench.BENCH_MODELS)}")
    sp.add_argument("--ns", help="comma-separated sequence lengths")
    sp.add_argument("--embed-dim", type=int)
    sp.add_argument("--k-rule", help="'sqrt' or a fixed integer")
    sp.add_argument("--repetitions", type=int)
    sp.add_argument("--kernels", action="store_true", help="also time compiled vs python kernels")
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("macs", parents=[common], help="closed-form MAC counts")
    sp.add_argument("--model", choices=macs.MODELS, default="co4")
    sp.add_argument("--layers", type=int, default=1)
    sp.add_argument("--n", type=int, default=196)
    sp.add_argument("--embed-dim", type=int, default=384)
    sp.add_argument("--k", type=int)
    sp.add_argument("--latents", type=int)
    sp.add_argument("--compare", action="store_true", help="compare against the instrumented counter")
    sp.set_defaults(fn=cmd_macs)

    sp = sub.add_parser("rl", parents=[common], help="evolve a cart-pole policy")
    sp.add_argument("--env", choices=["cartpole"], default="cartpole")
    sp.add_argument("--model", choices=["co4", "baseline"], default="co4")
    sp.add_argument("--shuffle", action="store_true", help="permute sensors every generation while training")
    sp.add_argument("--generations", type=int)
    sp.add_argument("--noise", type=int, help="number of injected noise channels")
    sp.set_defaults(fn=cmd_rl)

    sp = sub.add_parser("spiking", parents=[common], help="burst regimes of the two-compartment neuron")
    sp.add_argument("--regimes", default="LL,LH,HL,HH")
    sp.add_argument("--population", type=int)
    sp.add_argument("--duration", type=float, help="simulated ms")
    sp.add_argument("--dt", type=float)
    sp.set_defaults(fn=cmd_spiking)

    sp = sub.add_parser("report", parents=[common], help="collect run outputs into plot-ready CSVs")
    sp.add_argument("inputs", nargs="*", default=["runs"])
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.out is None:
        args.out = str(Path("runs") / args.verb)
    try:
        ov = Overrides(load_config(args.config))
        return args.fn(args, ov)
    except Co4Error as e:
        print(f"co4 {args.verb}: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
