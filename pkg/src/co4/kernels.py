"""Kernel backend selection.

The compiled extension is used when it imports cleanly; ``CO4_PURE=1``
forces the numpy fallback.  :func:`use_backend` switches at runtime, which
the benchmark uses to time both paths in one process.
"""

from __future__ import annotations

import os

from . import _fallback

try:
    if os.environ.get("CO4_PURE") == "1":
        raise ImportError("pure backend requested")
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

_active = _compiled if _compiled is not None else _fallback

KERNEL_NAMES = (
    "topk_rows",
    "modulate_projection",
    "modulate_normal",
    "lif_simulate",
    "cartpole_step",
    "rollout_population",
)


def compiled_available() -> bool:
    return _compiled is not None


def backend() -> str:
    return "compiled" if _active is _compiled else "python"


def use_backend(name: str) -> None:
    global _active
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built")
        _active = _compiled
    elif name == "python":
        _active = _fallback
    else:
        raise ValueError(f"unknown backend {name!r}")


def get(name: str, which: str | None = None):
    mod = _active if which is None else (_compiled if which == "compiled" else _fallback)
    if mod is None:
        raise RuntimeError("compiled kernels are not built")
    return getattr(mod, name)
