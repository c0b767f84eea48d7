"""Image sources, patch tokenisation and batching."""

from __future__ import annotations

import enum
import os
import queue
import threading
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .tensor import Tensor

RECORD_BYTES = 3073
IMAGE_BYTES = 3072
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"
DEFAULT_CIFAR_ROOT = "data/cifar-10-batches-bin"


class Source(str, enum.Enum):
    CIFAR10_BIN = "CIFAR10_BIN"
    SYNTHETIC_BLOBS = "SYNTHETIC_BLOBS"


@dataclass
class DatasetSpec:
    source: Source = Source.CIFAR10_BIN
    root: str | None = None
    train_limit: int = 5000
    val_limit: int = 1000
    patch_size: int = 4
    image_size: int = 32
    num_classes: int = 10
    channels: int = 3
    blob_noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.source = Source(self.source)
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(f"image_size={self.image_size} is not divisible by patch_size={self.patch_size}")
        if self.train_limit < 1 or self.val_limit < 1:
            raise ConfigError("train_limit and val_limit must be positive")
        if self.source is Source.CIFAR10_BIN and (self.image_size != 32 or self.channels != 3 or self.num_classes != 10):
            raise ConfigError("CIFAR-10 images are 3x32x32 with 10 classes")

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def token_dim(self) -> int:
        return self.channels * self.patch_size**2

    def resolved_root(self) -> Path:
        return Path(self.root or os.environ.get("CO4_CIFAR10_ROOT") or DEFAULT_CIFAR_ROOT)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["source"] = self.source.value
        return d


@dataclass
class Split:
    images: np.ndarray  # (n, C, H, W), normalised
    labels: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return len(self.labels)


# ---------------------------------------------------------------------------
# CIFAR-10 binary


def read_cifar_records(path: Path, limit: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Raw uint8 images (n, 3, 32, 32) and labels from one binary batch file."""
    raw = Path(path).read_bytes()
    if len(raw) % RECORD_BYTES:
        whole = len(raw) // RECORD_BYTES
        raise FormatError(
            f"{path}: truncated record at byte offset {whole * RECORD_BYTES} "
            f"({len(raw) - whole * RECORD_BYTES} of {RECORD_BYTES} bytes)"
        )
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    if limit is not None:
        recs = recs[:limit]
    labels = recs[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{path}: label {labels[bad[0]]} out of range at byte offset {bad[0] * RECORD_BYTES}")
    return recs[:, 1:].reshape(-1, 3, 32, 32), labels


def normalise(raw: np.ndarray) -> np.ndarray:
    x = raw.astype(np.float64) / 255.0
    mean = np.asarray(CIFAR_MEAN).reshape(1, 3, 1, 1)
    std = np.asarray(CIFAR_STD).reshape(1, 3, 1, 1)
    return (x - mean) / std


def load_cifar10(spec: DatasetSpec) -> tuple[Split, Split]:
    root = spec.resolved_root()
    missing = [f for f in TRAIN_FILES + (TEST_FILE,) if not (root / f).is_file()]
    if missing:
        raise FormatError(f"CIFAR-10 binaries not found under {root} (missing {', '.join(missing)})")
    imgs, labs = [], []
    need = spec.train_limit
    for name in TRAIN_FILES:
        if need <= 0:
            break
        x, y = read_cifar_records(root / name, need)
        imgs.append(x)
        labs.append(y)
        need -= len(y)
    vx, vy = read_cifar_records(root / TEST_FILE, spec.val_limit)
    train = Split(normalise(np.concatenate(imgs)), np.concatenate(labs))
    return train, Split(normalise(vx), vy)


def write_cifar_records(path: Path, images: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of :func:`read_cifar_records`; used to build fixture files."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), IMAGE_BYTES)
    recs = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    Path(path).write_bytes(recs.tobytes())


# ---------------------------------------------------------------------------
# synthetic


def make_blobs(spec: DatasetSpec) -> tuple[Split, Split]:
    """Class prototypes plus isotropic Gaussian noise; linearly separable at low noise."""
    rng = np.random.default_rng(spec.seed)
    shape = (spec.channels, spec.image_size, spec.image_size)
    protos = rng.normal(0.0, 1.0, (spec.num_classes,) + shape)

    def draw(n):
        y = rng.integers(0, spec.num_classes, n)
        x = protos[y] + spec.blob_noise * rng.normal(0.0, 1.0, (n,) + shape)
        return Split(x, y.astype(np.int64))

    return draw(spec.train_limit), draw(spec.val_limit)


def load_dataset(spec: DatasetSpec) -> tuple[Split, Split]:
    if spec.source is Source.CIFAR10_BIN:
        return load_cifar10(spec)
    return make_blobs(spec)


# ---------------------------------------------------------------------------
# patches


def patchify(images, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, N, C*patch*patch), patches in row-major order."""
    x = images.data if isinstance(images, Tensor) else np.asarray(images)
    if x.ndim != 4:
        raise ShapeError(f"patchify needs (B, C, H, W), got {x.shape}")
    b, c, h, w = x.shape
    if patch < 1 or h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} is not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    t = x.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return t.reshape(b, gh * gw, c * patch * patch)


def unpatchify(tokens, patch: int, channels: int, height: int, width: int) -> np.ndarray:
    t = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
    b = t.shape[0]
    gh, gw = height // patch, width // patch
    if t.shape[1:] != (gh * gw, channels * patch * patch):
        raise ShapeError(f"tokens {t.shape} do not match a {channels}x{height}x{width} image with patch {patch}")
    x = t.reshape(b, gh, gw, channels, patch, patch).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(b, channels, height, width)


# ---------------------------------------------------------------------------
# batching


def batch_order(n: int, batch_size: int, rng: np.random.Generator, shuffle: bool = True) -> list[np.ndarray]:
    idx = rng.permutation(n) if shuffle else np.arange(n)
    return [idx[i:i + batch_size] for i in range(0, n, batch_size)]


def iterate_batches(split: Split, order: list[np.ndarray], patch: int, flip: np.ndarray | None = None,
                    prefetch: int = 0):
    """Yield ``(tokens, labels)``.  With ``prefetch > 0`` batches are built on a
    worker thread through a bounded queue; the order is fixed either way."""

    def build(i, ix):
        x = split.images[ix]
        if flip is not None and flip[i].any():
            x = x.copy()
            x[flip[i]] = x[flip[i], :, :, ::-1]
        return patchify(x, patch), split.labels[ix]

    if prefetch <= 0:
        for i, ix in enumerate(order):
            yield build(i, ix)
        return
    q: queue.Queue = queue.Queue(maxsize=prefetch)
    done = object()

    def worker():
        for i, ix in enumerate(order):
            q.put(build(i, ix))
        q.put(done)

    th = threading.Thread(target=worker, daemon=True)
    th.start()
    while (item := q.get()) is not done:
        yield item
    th.join()
