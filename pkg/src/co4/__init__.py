"""Triadic-modulation (Co4) layers with the tooling to check them at desk scale.

Submodules: ``tensor`` (reverse-mode autodiff), ``mod_laws``, ``co4_layer``,
``baseline``, ``model``/``train``/``data``, ``rl``, ``spiking``, ``macs``,
``bench`` and ``cli``.
"""

from .co4_layer import Co4Config, Co4Layer, Readout, Variant, co4_forward
from .errors import Co4Error, ConfigError, FormatError, NumericError, ShapeError
from .kernels import backend, compiled_available
from .macs import macs_estimate
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "Co4Config",
    "Co4Error",
    "Co4Layer",
    "ConfigError",
    "FormatError",
    "NumericError",
    "Readout",
    "ShapeError",
    "Tensor",
    "Variant",
    "backend",
    "backward",
    "co4_forward",
    "compiled_available",
    "macs_estimate",
    "no_grad",
]
