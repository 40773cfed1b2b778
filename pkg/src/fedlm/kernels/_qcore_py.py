"""Pure-numpy quantization kernels, semantics bit-identical to _qcore.pyx.

Every formula here must match the compiled version operation for operation
(the extension is built with -ffp-contract=off for exactly this reason);
the parity test enforces it whenever the extension is importable.
"""

from __future__ import annotations

import numpy as np


def stoch_quantize(v, lo, step, k, u, out):
    """Stochastic level assignment: out[i] in [0, k-1], E[level] = value."""
    if step == 0.0:
        out[:] = 0
        return
    x = (np.asarray(v) - lo) / step
    f = np.floor(x)
    idx = f.astype(np.int64) + (np.asarray(u) < (x - f))
    np.clip(idx, 0, k - 1, out=idx)
    out[:] = idx


def dequantize_levels(idx, lo, step, offset, out):
    out[:] = (lo + np.asarray(idx).astype(np.float64) * step) + offset


def ternary_quantize(v, s, u, out):
    """out[i] = sign(v[i]) if u[i] < |v[i]|/s else 0."""
    if s == 0.0:
        out[:] = 0
        return
    v = np.asarray(v)
    hit = np.asarray(u) < (np.abs(v) / s)
    out[:] = np.sign(v).astype(np.int8) * hit


def pack_bits(idx, bits, out):
    """Little-endian bit packing: value i occupies bits [i*bits, (i+1)*bits)."""
    idx = np.asarray(idx, dtype=np.uint32)
    cols = ((idx[:, None] >> np.arange(bits, dtype=np.uint32)) & 1).astype(np.uint8)
    packed = np.packbits(cols.ravel(), bitorder="little")
    out[: len(packed)] = packed


def unpack_bits(buf, n, bits, out):
    raw = np.asarray(buf, dtype=np.uint8)
    cols = np.unpackbits(raw, bitorder="little", count=n * bits).reshape(n, bits)
    weights = (np.uint64(1) << np.arange(bits, dtype=np.uint64))
    out[:] = (cols.astype(np.uint64) * weights).sum(axis=1).astype(np.uint32)
