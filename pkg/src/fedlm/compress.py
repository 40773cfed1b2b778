"""Lossy transfer codecs and exact communication-cost accounting.

Uniform stochastic quantization per tensor ("layer"): optionally subtract
the mean (transmitted as side info), optionally clamp to mean +- c*std,
then place k evenly spaced levels between the observed min and max and
assign each value to a bracketing level with probability proportional to
proximity, which makes the codec unbiased.  TernGrad sends sign(v) * s with
probability |v|/s (s = max |v| after optional clipping) and 0 otherwise, at
an ideal rate of log2(3) bits per value.

Range statistics travel as float32 (directed-rounded so every value stays
inside the recorded range); level indices are bit-packed little-endian.
Scheme "none" is the uncompressed 32-bit baseline: the in-memory record
keeps raw float32 values and the simulator's round loop never routes live
weights through it (it passes float64 through and charges 32 bits/param).

Ledger arithmetic is exact and ideal (fractional bits allowed):
cost_bytes(n, b, rounds) = n * b / 8 * rounds, gigabyte = 1e9 bytes.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .prng import Prng
from .tensor import NonFiniteError

__all__ = [
    "GIGABYTE",
    "LOG2_3",
    "Payload",
    "QuantConfig",
    "TensorRecord",
    "compress_tensors",
    "cost_bytes",
    "cost_gb",
    "decode_payload",
    "dequantize",
    "dequantize_uniform",
    "deternarize",
    "encode_payload",
    "ideal_bits_per_value",
    "quantize_none",
    "quantize_uniform",
    "restore_tensors",
    "ternarize",
]

LOG2_3 = math.log2(3.0)
GIGABYTE = 1e9

_SCHEMES = ("none", "uniform", "terngrad")
_SCHEME_CODE = {name: i for i, name in enumerate(_SCHEMES)}
_PAYLOAD_MAGIC = b"FQP1"
_FLAG_HAS_MEAN = 1


@dataclass(frozen=True)
class QuantConfig:
    scheme: str = "none"
    bits: float = 32.0
    zero_center: bool = False
    linf_clip: bool = False
    clip_std: float = 2.5

    def validate(self, direction: str | None = None) -> "QuantConfig":
        if self.scheme not in _SCHEMES:
            raise ValueError(f"unknown quantization scheme {self.scheme!r}")
        if self.clip_std <= 0:
            raise ValueError("clip_std must be positive")
        if self.scheme == "uniform":
            lo, hi = (8, 28) if direction == "download" else (1, 28)
            if abs(self.bits - round(self.bits)) > 1e-9:
                raise ValueError(
                    f"uniform quantization needs whole bits (2^b levels), got {self.bits}"
                )
            if not lo <= round(self.bits) <= hi:
                raise ValueError(f"uniform bits must be in [{lo}, {hi}], got {self.bits}")
        elif self.scheme == "terngrad":
            if direction == "download":
                raise ValueError("terngrad applies to uploaded deltas, not downloads")
            if not 0 < self.bits <= 32:
                raise ValueError(f"bits out of range: {self.bits}")
        return self

    def levels(self) -> int:
        return int(round(2.0 ** float(self.bits)))


def ideal_bits_per_value(scheme: str, bits: float = 32.0) -> float:
    """Ledger rate: exact fractional bits, before whole-bit wire packing."""
    if scheme == "none":
        return 32.0
    if scheme == "uniform":
        return float(round(bits))
    if scheme == "terngrad":
        return LOG2_3
    raise ValueError(f"unknown quantization scheme {scheme!r}")


def _packed_bits(scheme: str, bits: float) -> int:
    if scheme == "none":
        return 32
    if scheme == "uniform":
        return int(round(bits))
    return 2  # terngrad: 3 levels fit in 2 wire bits


@dataclass
class TensorRecord:
    """One quantized tensor: level indices plus the stats to invert them."""

    name: str
    scheme: str
    count: int
    bits: float  # ideal bits per value
    lo: float  # uniform: level 0; terngrad: -s; none: unused (0)
    hi: float  # uniform: level k-1; terngrad: +s
    mean: float | None  # transmitted offset when zero-centering, else None
    data: np.ndarray  # uint32 level indices, or float32 raw for scheme none

    def __eq__(self, other):
        if not isinstance(other, TensorRecord):
            return NotImplemented
        return (
            self.name == other.name
            and self.scheme == other.scheme
            and self.count == other.count
            and self.bits == other.bits
            and self.lo == other.lo
            and self.hi == other.hi
            and self.mean == other.mean
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )


@dataclass
class Payload:
    """Ordered tensor records; one simulated transfer."""

    records: list = field(default_factory=list)

    @property
    def ideal_bits(self) -> float:
        return float(sum(rec.count * rec.bits for rec in self.records))

    @property
    def ideal_bytes(self) -> float:
        return self.ideal_bits / 8.0

    def __eq__(self, other):
        if not isinstance(other, Payload):
            return NotImplemented
        return self.records == other.records


# ---- float32 range handling ------------------------------------------------------


def _f32_down(x: float) -> float:
    with np.errstate(over="ignore"):
        y = np.float32(x)
    if not np.isfinite(y):
        raise NonFiniteError(f"range stat {x!r} not representable as float32")
    if float(y) > x:
        y = np.nextafter(y, np.float32(-np.inf))
    return float(y)


def _f32_up(x: float) -> float:
    with np.errstate(over="ignore"):
        y = np.float32(x)
    if not np.isfinite(y):
        raise NonFiniteError(f"range stat {x!r} not representable as float32")
    if float(y) < x:
        y = np.nextafter(y, np.float32(np.inf))
    return float(y)


def _f32_near(x: float) -> float:
    with np.errstate(over="ignore"):
        y = np.float32(x)
    if not np.isfinite(y):
        raise NonFiniteError(f"offset {x!r} not representable as float32")
    return float(y)


def _uniforms(rng, n: int) -> np.ndarray:
    gen = rng.generator() if isinstance(rng, Prng) else rng
    return gen.random(n)


def _prepare(values: np.ndarray, cfg: QuantConfig):
    """Flatten, center, clip; returns (work, mean_or_None)."""
    flat = np.ascontiguousarray(values, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    if not np.all(np.isfinite(flat)):
        raise NonFiniteError("cannot quantize non-finite values")
    mean = None
    work = flat
    if cfg.zero_center:
        mean = _f32_near(float(flat.mean()))
        work = flat - mean
    if cfg.linf_clip:
        mu = float(work.mean())
        sd = float(work.std())
        work = np.clip(work, mu - cfg.clip_std * sd, mu + cfg.clip_std * sd)
    return work, mean


# ---- codecs ------------------------------------------------------------------------


def quantize_uniform(values: np.ndarray, cfg: QuantConfig, rng, name: str = "") -> TensorRecord:
    """Stochastic k-level uniform quantization of one tensor."""
    if cfg.scheme != "uniform":
        raise ValueError(f"quantize_uniform called with scheme {cfg.scheme!r}")
    k = cfg.levels()
    if k < 2:
        raise ValueError("uniform quantization needs at least 2 levels")
    work, mean = _prepare(values, cfg)
    lo = _f32_down(float(work.min()))
    hi = _f32_up(float(work.max()))
    step = (hi - lo) / (k - 1)
    idx = kernels.stoch_quantize(work, lo, step, k, _uniforms(rng, work.size))
    return TensorRecord(name, "uniform", work.size, float(round(cfg.bits)), lo, hi, mean, idx)


def dequantize_uniform(rec: TensorRecord) -> np.ndarray:
    if rec.scheme != "uniform":
        raise ValueError(f"dequantize_uniform called with scheme {rec.scheme!r}")
    k = int(round(2.0**rec.bits))
    step = (rec.hi - rec.lo) / (k - 1)
    return kernels.dequantize_levels(rec.data, rec.lo, step, rec.mean or 0.0)


def ternarize(values: np.ndarray, cfg: QuantConfig, rng, name: str = "") -> TensorRecord:
    """TernGrad: emit sign(v)*s with probability |v|/s, else 0."""
    if cfg.scheme != "terngrad":
        raise ValueError(f"ternarize called with scheme {cfg.scheme!r}")
    work, mean = _prepare(values, cfg)
    s = _f32_up(float(np.abs(work).max()))
    signs = kernels.ternary_quantize(work, s, _uniforms(rng, work.size))
    idx = (signs.astype(np.int64) + 1).astype(np.uint32)  # {-1,0,1} -> {0,1,2}
    return TensorRecord(name, "terngrad", work.size, LOG2_3, -s, s, mean, idx)


def deternarize(rec: TensorRecord) -> np.ndarray:
    if rec.scheme != "terngrad":
        raise ValueError(f"deternarize called with scheme {rec.scheme!r}")
    s = rec.hi
    # levels {-s, 0, +s}: lo + idx*step with lo=-s, step=s is exact
    return kernels.dequantize_levels(rec.data, -s, s, rec.mean or 0.0)


def quantize_none(values: np.ndarray, name: str = "") -> TensorRecord:
    """Raw 32-bit record (lossy only down to float32, exact on the wire)."""
    flat = np.ascontiguousarray(values, dtype=np.float64).ravel()
    if not np.all(np.isfinite(flat)):
        raise NonFiniteError("cannot encode non-finite values")
    with np.errstate(over="ignore"):
        cast = flat.astype(np.float32)
    if not np.all(np.isfinite(cast)):
        raise NonFiniteError("values overflow float32")
    return TensorRecord(name, "none", flat.size, 32.0, 0.0, 0.0, None, cast)


def dequantize(rec: TensorRecord) -> np.ndarray:
    if rec.scheme == "uniform":
        return dequantize_uniform(rec)
    if rec.scheme == "terngrad":
        return deternarize(rec)
    return rec.data.astype(np.float64)


def compress_tensors(tensors: dict[str, np.ndarray], cfg: QuantConfig, rng: Prng) -> Payload:
    """Quantize a name -> array map tensor by tensor (sorted order).

    Each tensor draws from its own rng child, so results do not depend on
    visit order.
    """
    records = []
    for name in sorted(tensors):
        values = tensors[name]
        if cfg.scheme == "uniform":
            rec = quantize_uniform(values, cfg, rng.child(name), name)
        elif cfg.scheme == "terngrad":
            rec = ternarize(values, cfg, rng.child(name), name)
        else:
            rec = quantize_none(values, name)
        records.append(rec)
    return Payload(records)


def restore_tensors(payload: Payload, shapes: dict[str, tuple]) -> dict[str, np.ndarray]:
    out = {}
    for rec in payload.records:
        shape = shapes[rec.name]
        if rec.count != int(np.prod(shape, dtype=np.int64)):
            raise ValueError(f"record {rec.name!r} holds {rec.count} values, shape {shape} wants more")
        out[rec.name] = dequantize(rec).reshape(shape)
    return out


# ---- cost model --------------------------------------------------------------------


def cost_bytes(n_params: float, bits_per_param: float, rounds: float) -> float:
    """Exact ideal transfer cost: n * b / 8 * rounds."""
    return n_params * bits_per_param / 8.0 * rounds


def cost_gb(n_params: float, bits_per_param: float, rounds: float) -> float:
    return cost_bytes(n_params, bits_per_param, rounds) / GIGABYTE


# ---- wire format -------------------------------------------------------------------


def encode_payload(payload: Payload) -> bytes:
    """FQP1 framing; level indices packed at ceil(bits) per value."""
    parts = [_PAYLOAD_MAGIC, struct.pack("<I", len(payload.records))]
    for rec in payload.records:
        raw_name = rec.name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ValueError(f"tensor name too long: {rec.name!r}")
        flags = _FLAG_HAS_MEAN if rec.mean is not None else 0
        packed_bits = _packed_bits(rec.scheme, rec.bits)
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BBBQ", _SCHEME_CODE[rec.scheme], flags, packed_bits, rec.count))
        if rec.scheme == "uniform":
            parts.append(struct.pack("<ff", rec.lo, rec.hi))
        elif rec.scheme == "terngrad":
            parts.append(struct.pack("<f", rec.hi))
        if rec.mean is not None:
            parts.append(struct.pack("<f", rec.mean))
        if rec.scheme == "none":
            parts.append(np.ascontiguousarray(rec.data, dtype="<f4").tobytes())
        else:
            parts.append(kernels.pack_bits(rec.data, packed_bits))
    return b"".join(parts)


def decode_payload(buf: bytes) -> Payload:
    try:
        return _decode_payload(buf)
    except struct.error as exc:
        raise ValueError(f"truncated payload: {exc}") from exc


def _decode_payload(buf: bytes) -> Payload:
    view = memoryview(buf)
    if bytes(view[:4]) != _PAYLOAD_MAGIC:
        raise ValueError("bad payload magic")
    pos = 4
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    records = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos : pos + nlen]).decode("utf-8")
        pos += nlen
        code, flags, packed_bits, n = struct.unpack_from("<BBBQ", view, pos)
        pos += 11
        if code >= len(_SCHEMES):
            raise ValueError(f"unknown scheme code {code}")
        scheme = _SCHEMES[code]
        lo = hi = 0.0
        if scheme == "uniform":
            lo, hi = struct.unpack_from("<ff", view, pos)
            pos += 8
            lo, hi = float(np.float32(lo)), float(np.float32(hi))
        elif scheme == "terngrad":
            (s,) = struct.unpack_from("<f", view, pos)
            pos += 4
            hi = float(np.float32(s))
            lo = -hi
        mean = None
        if flags & _FLAG_HAS_MEAN:
            (mean_raw,) = struct.unpack_from("<f", view, pos)
            pos += 4
            mean = float(np.float32(mean_raw))
        if scheme == "none":
            nbytes = 4 * n
            data = np.frombuffer(view[pos : pos + nbytes], dtype="<f4").astype(np.float32)
            bits = 32.0
        else:
            nbytes = (n * packed_bits + 7) // 8
            data = kernels.unpack_bits(bytes(view[pos : pos + nbytes]), n, packed_bits)
            bits = LOG2_3 if scheme == "terngrad" else float(packed_bits)
        pos += nbytes
        records.append(TensorRecord(name, scheme, int(n), bits, lo, hi, mean, data))
    if pos != len(buf):
        raise ValueError(f"trailing bytes in payload ({len(buf) - pos})")
    return Payload(records)
