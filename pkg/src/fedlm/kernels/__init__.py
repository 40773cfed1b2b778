"""Quantization kernel dispatch: compiled extension if built, numpy fallback.

Both implementations are bit-identical (same operation order, extension
compiled with -ffp-contract=off), so which one loads never changes results,
only speed.  `benchmarks/bench_kernels.py` compares them.
"""

from __future__ import annotations

import numpy as np

try:  # pragma: no cover - which branch runs depends on the build
    from . import _qcore as _impl

    COMPILED = True
except ImportError:  # pragma: no cover
    from . import _qcore_py as _impl

    COMPILED = False


def implementation_name() -> str:
    return "compiled" if COMPILED else "numpy"


def stoch_quantize(values: np.ndarray, lo: float, step: float, k: int, uniforms: np.ndarray) -> np.ndarray:
    values = np.ascontiguousarray(values, dtype=np.float64)
    uniforms = np.ascontiguousarray(uniforms, dtype=np.float64)
    if values.shape != uniforms.shape:
        raise ValueError("values and uniforms must have equal length")
    out = np.empty(values.shape[0], dtype=np.uint32)
    _impl.stoch_quantize(values, float(lo), float(step), int(k), uniforms, out)
    return out


def dequantize_levels(idx: np.ndarray, lo: float, step: float, offset: float) -> np.ndarray:
    idx = np.ascontiguousarray(idx, dtype=np.uint32)
    out = np.empty(idx.shape[0], dtype=np.float64)
    _impl.dequantize_levels(idx, float(lo), float(step), float(offset), out)
    return out


def ternary_quantize(values: np.ndarray, s: float, uniforms: np.ndarray) -> np.ndarray:
    values = np.ascontiguousarray(values, dtype=np.float64)
    uniforms = np.ascontiguousarray(uniforms, dtype=np.float64)
    if values.shape != uniforms.shape:
        raise ValueError("values and uniforms must have equal length")
    out = np.empty(values.shape[0], dtype=np.int8)
    _impl.ternary_quantize(values, float(s), uniforms, out)
    return out


def pack_bits(idx: np.ndarray, bits: int) -> bytes:
    if not 1 <= bits <= 32:
        raise ValueError("packed bit width must be in [1, 32]")
    idx = np.ascontiguousarray(idx, dtype=np.uint32)
    out = np.zeros((idx.shape[0] * bits + 7) // 8, dtype=np.uint8)
    _impl.pack_bits(idx, int(bits), out)
    return out.tobytes()


def unpack_bits(buf: bytes, n: int, bits: int) -> np.ndarray:
    if not 1 <= bits <= 32:
        raise ValueError("packed bit width must be in [1, 32]")
    need = (n * bits + 7) // 8
    if len(buf) < need:
        raise ValueError(f"packed buffer too short: {len(buf)} < {need}")
    out = np.empty(n, dtype=np.uint32)
    _impl.unpack_bits(np.frombuffer(buf, dtype=np.uint8), int(n), int(bits), out)
    return out
