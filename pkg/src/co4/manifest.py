"""Run manifests, CSV writing and checkpoints."""

from __future__ import annotations

import csv
import json
import platform
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import FormatError
from .tensor import load_tensor, save_tensor

METRIC_COLUMNS = ("epoch", "split", "loss", "acc", "wall_ms")


def fingerprint() -> dict:
    return {
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "platform": platform.platform(),
        "kernels": kernels.backend(),
    }


@dataclass
class RunManifest:
    config: dict
    seed: int
    epochs: list[dict] = field(default_factory=list)
    environment: dict = field(default_factory=fingerprint)
    notes: dict = field(default_factory=dict)

    def log_epoch(self, **row) -> None:
        self.epochs.append(dict(row))

    def metric_rows(self) -> list[dict]:
        rows = []
        for e in self.epochs:
            rows.append({"epoch": e["epoch"], "split": "train", "loss": e["train_loss"],
                         "acc": e["train_acc"], "wall_ms": e["wall_ms"]})
            rows.append({"epoch": e["epoch"], "split": "val", "loss": e["val_loss"],
                         "acc": e["val_acc"], "wall_ms": e["wall_ms"]})
        return rows

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_jsonable))

    @classmethod
    def read(cls, path: Path) -> "RunManifest":
        try:
            d = json.loads(Path(path).read_text())
            return cls(d["config"], d["seed"], d.get("epochs", []), d.get("environment", {}), d.get("notes", {}))
        except (KeyError, TypeError, json.JSONDecodeError) as e:
            raise FormatError(f"{path}: not a run manifest ({e})") from None


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "value"):
        return o.value
    raise TypeError(f"cannot serialise {type(o).__name__}")


def fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, columns, rows, deterministic: bool = False) -> Path:
    """Write rows with a fixed header.  In deterministic mode timing-derived
    columns (``*_ms``, percentiles, loop counts, speedups) are zeroed; the
    caller keeps real timings elsewhere."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            missing = [c for c in columns if c not in r]
            if missing:
                raise FormatError(f"{path.name}: row lacks columns {missing}")
            w.writerow([fmt(0.0 if deterministic and _is_timing(c) else r[c]) for c in columns])
    return path


def _is_timing(col: str) -> bool:
    return col.endswith("_ms") or col in ("p10", "p90", "inner", "speedup")


def read_csv(path: Path, columns=None) -> list[dict]:
    with Path(path).open(newline="") as f:
        r = csv.DictReader(f)
        if columns is not None and tuple(r.fieldnames or ()) != tuple(columns):
            raise FormatError(f"{path}: columns {r.fieldnames} != expected {list(columns)}")
        return list(r)


def save_checkpoint(directory: Path, state: dict[str, np.ndarray], meta: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = sorted(state)
    for name in names:
        save_tensor(directory / f"{name}.co4t", state[name])
    (directory / "checkpoint.json").write_text(
        json.dumps({**meta, "tensors": names}, indent=2, sort_keys=True, default=_jsonable)
    )


def load_checkpoint(directory: Path) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    meta = json.loads((directory / "checkpoint.json").read_text())
    state = {n: load_tensor(directory / f"{n}.co4t").data for n in meta["tensors"]}
    return state, meta
