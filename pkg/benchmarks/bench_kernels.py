"""Benchmark the compiled quantization kernels against the numpy fallback.

Run:  python3 benchmarks/bench_kernels.py [n_values] [repeats]

Times stochastic quantization, dequantization, ternarization, and bit
packing/unpacking on a shared random input, and verifies that both
implementations produce byte-identical outputs.
"""

from __future__ import annotations

import sys
import time

import numpy as np

from fedlm.kernels import _qcore_py

try:
    from fedlm.kernels import _qcore
except ImportError:
    _qcore = None


def _best_time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None) -> int:
    args = sys.argv[1:] if argv is None else argv
    n = int(args[0]) if len(args) > 0 else 2_000_000
    repeats = int(args[1]) if len(args) > 1 else 5

    rng = np.random.default_rng(1234)
    values = rng.normal(0.0, 1.0, n)
    uniforms = rng.random(n)
    bits = 8
    lo, hi = float(values.min()), float(values.max())
    k = 2**bits
    step = (hi - lo) / (k - 1)
    s = float(np.abs(values).max())

    impls = [("numpy", _qcore_py)]
    if _qcore is not None:
        impls.insert(0, ("compiled", _qcore))
    else:
        print("compiled extension not built; benchmarking the fallback only")

    # Shared inputs for the dependent kernels, produced once up front.
    ref_idx = np.empty(n, dtype=np.uint32)
    impls[0][1].stoch_quantize(values, lo, step, k, uniforms, ref_idx)
    ref_packed = np.zeros((n * bits + 7) // 8, dtype=np.uint8)
    impls[0][1].pack_bits(ref_idx, bits, ref_packed)

    def make_outputs():
        return {
            "stoch_quantize": np.empty(n, dtype=np.uint32),
            "dequantize_levels": np.empty(n, dtype=np.float64),
            "ternary_quantize": np.empty(n, dtype=np.int8),
            "pack_bits": np.zeros((n * bits + 7) // 8, dtype=np.uint8),
            "unpack_bits": np.empty(n, dtype=np.uint32),
        }

    outputs = {name: make_outputs() for name, _ in impls}

    def calls(mod, outs):
        return {
            "stoch_quantize": lambda: mod.stoch_quantize(values, lo, step, k, uniforms, outs["stoch_quantize"]),
            "dequantize_levels": lambda: mod.dequantize_levels(ref_idx, lo, step, 0.0, outs["dequantize_levels"]),
            "ternary_quantize": lambda: mod.ternary_quantize(values, s, uniforms, outs["ternary_quantize"]),
            "pack_bits": lambda: mod.pack_bits(ref_idx, bits, outs["pack_bits"]),
            "unpack_bits": lambda: mod.unpack_bits(ref_packed, n, bits, outs["unpack_bits"]),
        }

    per_impl = {name: calls(mod, outputs[name]) for name, mod in impls}
    kernel_names = list(per_impl[impls[0][0]])

    print(f"n = {n:,} values, best of {repeats} runs")
    print(f"{'kernel':<20}" + "".join(f"{name:>14}" for name, _ in impls) + ("   speedup  parity" if len(impls) == 2 else ""))
    all_match = True
    for kernel in kernel_names:
        times = {name: _best_time(per_impl[name][kernel], repeats) for name, _ in impls}
        row = f"{kernel:<20}" + "".join(f"{times[name] * 1e3:>12.2f}ms" for name, _ in impls)
        if len(impls) == 2:
            a, b = impls[0][0], impls[1][0]
            match = np.array_equal(outputs[a][kernel], outputs[b][kernel])
            all_match &= match
            row += f"{times[b] / times[a]:>9.2f}x  " + ("identical" if match else "MISMATCH")
        print(row)
    if len(impls) == 2:
        print("parity:", "all outputs identical" if all_match else "MISMATCH DETECTED")
        return 0 if all_match else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
