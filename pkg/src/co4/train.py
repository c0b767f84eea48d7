"""Training loop, ablations and sweeps for the patch classifier."""

from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .co4_layer import EQ_VARIANTS
from .data import DatasetSpec, Split, batch_order, iterate_batches, load_dataset
from .errors import ConfigError, NumericError
from .manifest import METRIC_COLUMNS, RunManifest, save_checkpoint, write_csv
from .model import Classifier, ModelConfig, regime_report
from .nn import AdamW, cosine_lr
from .tensor import Tensor


@dataclass
class OptConfig:
    lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    warmup_steps: int = 20
    epochs: int = 5
    batch_size: int = 64
    flip: bool = False
    prefetch: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 1 or self.batch_size < 1 or self.warmup_steps < 0:
            raise ConfigError("lr >= 0, epochs >= 1, batch_size >= 1 and warmup_steps >= 0 are required")


def evaluate(model: Classifier, split: Split, patch: int, batch_size: int = 256) -> tuple[float, float]:
    order = batch_order(len(split), batch_size, np.random.default_rng(0), shuffle=False)
    loss = correct = 0.0
    with T.no_grad():
        for tokens, labels in iterate_batches(split, order, patch):
            logits, _ = model(tokens)
            loss += T.cross_entropy(logits, labels).item() * len(labels)
            correct += int((logits.data.argmax(1) == labels).sum())
    return loss / len(split), correct / len(split)


def train(model_cfg: ModelConfig, data: DatasetSpec | tuple[Split, Split], opt: OptConfig, seed: int = 0,
          out_dir: Path | None = None, deterministic: bool = True, spec: DatasetSpec | None = None) -> RunManifest:
    """Train one classifier and return its manifest.

    ``data`` is a dataset spec or preloaded ``(train, val)`` splits (then
    ``spec`` supplies the patch size).  The batch stream depends only on
    ``seed``, so two models trained with the same seed see identical tokens.
    """
    if isinstance(data, DatasetSpec):
        spec = data
        train_split, val_split = load_dataset(spec)
    else:
        train_split, val_split = data
        if spec is None:
            raise ConfigError("pass the DatasetSpec alongside preloaded splits")
    patch = spec.patch_size
    model = Classifier(model_cfg, spec.num_tokens, spec.token_dim, seed=seed)
    params = model.parameters()
    optim = AdamW(params, lr=opt.lr, betas=(opt.beta1, opt.beta2), weight_decay=opt.weight_decay)
    data_rng = np.random.default_rng([seed, 1])
    steps_per_epoch = -(-len(train_split) // opt.batch_size)
    total = steps_per_epoch * opt.epochs
    manifest = RunManifest(
        config={"model": model_cfg.to_dict(), "data": spec.to_dict(), "opt": asdict(opt),
                "num_parameters": model.num_parameters()},
        seed=seed,
    )
    stream = hashlib.sha256()
    step = 0
    for epoch in range(1, opt.epochs + 1):
        t0 = time.perf_counter()
        order = batch_order(len(train_split), opt.batch_size, data_rng)
        flips = [data_rng.random(len(ix)) < 0.5 for ix in order] if opt.flip else None
        run_loss = run_correct = 0.0
        for tokens, labels in iterate_batches(train_split, order, patch, flips, opt.prefetch):
            stream.update(tokens.tobytes())
            stream.update(labels.tobytes())
            for p in params:
                p.grad = None
            with T.Tape():
                logits, diags = model(Tensor(tokens))
                loss = T.cross_entropy(logits, labels)
                if not np.isfinite(loss.item()):
                    raise NumericError(f"non-finite loss at step {step}; regime diagnostic {regime_report(diags)}")
                T.backward(loss)
            optim.step(cosine_lr(step, total, opt.lr, opt.warmup_steps))
            step += 1
            run_loss += loss.item() * len(labels)
            run_correct += int((logits.data.argmax(1) == labels).sum())
        val_loss, val_acc = evaluate(model, val_split, patch)
        manifest.log_epoch(
            epoch=epoch,
            train_loss=run_loss / len(train_split),
            train_acc=run_correct / len(train_split),
            val_loss=val_loss,
            val_acc=val_acc,
            wall_ms=(time.perf_counter() - t0) * 1e3,
        )
    manifest.notes["token_stream_sha256"] = stream.hexdigest()
    manifest.notes["steps"] = step
    manifest.notes["belief_scope"] = "per_layer"  # each Co4 block keeps its own mu
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_csv(out_dir / "metrics.csv", METRIC_COLUMNS, manifest.metric_rows(), deterministic)
        manifest.write(out_dir / "manifest.json")
        save_checkpoint(out_dir / "checkpoint", model.state_dict(), {"seed": seed, "step": step})
    return manifest


# ---------------------------------------------------------------------------
# sweeps


SWEEP_COLUMNS = ("param", "value", "seed", "val_acc", "val_loss")


def sweep(model_cfg: ModelConfig, param: str, values, spec: DatasetSpec, opt: OptConfig, seeds,
          out_csv: Path | None = None, deterministic: bool = True) -> list[dict]:
    """Train once per (value, seed) with ``param`` overridden; data loads once."""
    if not hasattr(model_cfg, param):
        raise ConfigError(f"unknown model parameter {param!r}")
    splits = load_dataset(spec)
    rows = []
    for v in values:
        cfg = replace(model_cfg, **{param: v})
        for s in seeds:
            m = train(cfg, splits, opt, seed=s, spec=spec)
            last = m.epochs[-1]
            rows.append({"param": param, "value": v, "seed": s, "val_acc": last["val_acc"],
                         "val_loss": last["val_loss"]})
    if out_csv is not None:
        write_csv(out_csv, SWEEP_COLUMNS, rows, deterministic)
    return rows


ABLATION_COLUMNS = ("variant", "seed", "val_acc", "val_loss")


def ablate(variants, spec: DatasetSpec, opt: OptConfig, seeds, model_cfg: ModelConfig | None = None,
           out_csv: Path | None = None, deterministic: bool = True) -> list[dict]:
    """Compare the Q/K/V equation sets under one shared config and seed set."""
    variants = list(variants)
    unknown = [v for v in variants if v not in EQ_VARIANTS]
    if unknown:
        raise ConfigError(f"unknown ablation variants {unknown}; expected a subset of {EQ_VARIANTS}")
    base = model_cfg or ModelConfig(model="co4", variant="NORMAL_INIT", readout="TOPK_ATTN")
    rows = sweep(base, "eq_variant", variants, spec, opt, seeds)
    rows = [{"variant": r["value"], "seed": r["seed"], "val_acc": r["val_acc"], "val_loss": r["val_loss"]}
            for r in rows]
    if out_csv is not None:
        write_csv(out_csv, ABLATION_COLUMNS, rows, deterministic)
    return rows
