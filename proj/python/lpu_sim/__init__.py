"""Python bindings for the LPU toolchain and simulator."""

import os as _os

_presets = _os.path.join(_os.path.dirname(__file__), "presets")
if _os.path.isdir(_presets):
    _os.environ.setdefault("LPU_PRESET_DIR", _presets)

from ._core import (
    LpuError,
    arch_config,
    arch_presets,
    compile,
    derive_mac_trees,
    disassemble,
    generate,
    kv_bytes,
    model_bytes,
    model_config,
    model_presets,
    param_count,
    run,
    sweep,
    sxe_peak_bandwidth,
)

__all__ = [
    "LpuError",
    "arch_config",
    "arch_presets",
    "compile",
    "derive_mac_trees",
    "disassemble",
    "generate",
    "kv_bytes",
    "model_bytes",
    "model_config",
    "model_presets",
    "param_count",
    "run",
    "sweep",
    "sxe_peak_bandwidth",
]
