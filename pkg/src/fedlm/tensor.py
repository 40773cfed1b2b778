"""Reverse-mode autodiff over float64 numpy arrays.

A GradientTape records one entry per forward op; backward() replays the
entries in exact reverse of evaluation order, accumulating adjoints on the
Tensor nodes.  Tapes are rebuilt per batch and never reused.

Only the ops the two model families need exist here.  Broadcasting is
restricted to the bias/row patterns they use (trailing-shape alignment);
anything fancier is a bug, not a feature.  All compute is float64; ops that
can overflow check their outputs and raise NonFiniteError instead of letting
NaN propagate silently.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "GradientTape",
    "NonFiniteError",
    "Tensor",
    "clip_global_norm",
    "finite_diff",
]


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


def _require_finite(value, what: str):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    """Value node on a tape.  Created by GradientTape methods only."""

    __slots__ = ("value", "grad", "_tape")

    def __init__(self, value: np.ndarray, tape: "GradientTape"):
        self.value = value
        self.grad = None
        self._tape = tape

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    # convenience operators; all dispatch through the owning tape
    def __add__(self, other):
        return self._tape.add(self, other)

    def __sub__(self, other):
        return self._tape.sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return self._tape.mul(self, other)
        return self._tape.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self._tape.scale(self, -1.0)

    def __matmul__(self, other):
        return self._tape.matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"


def _accumulate(t: Tensor, g: np.ndarray):
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum an adjoint down to `shape` (inverse of trailing-dim broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class GradientTape:
    """Op recorder.  One tape per forward/backward pass."""

    def __init__(self):
        self._ops = []  # (output Tensor, backward closure) in evaluation order

    # ---- node constructors -------------------------------------------------

    def leaf(self, value) -> Tensor:
        arr = np.asarray(value, dtype=np.float64)
        _require_finite(arr, "leaf")
        return Tensor(arr, self)

    def constant(self, value) -> Tensor:
        """Same as leaf; named for readability at call sites."""
        return self.leaf(value)

    def _emit(self, value: np.ndarray, back) -> Tensor:
        out = Tensor(value, self)
        self._ops.append((out, back))
        return out

    # ---- arithmetic ----------------------------------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        def back(g, a=a, b=b):
            _accumulate(a, _unbroadcast(g, a.value.shape))
            _accumulate(b, _unbroadcast(g, b.value.shape))

        return self._emit(a.value + b.value, back)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        def back(g, a=a, b=b):
            _accumulate(a, _unbroadcast(g, a.value.shape))
            _accumulate(b, _unbroadcast(-g, b.value.shape))

        return self._emit(a.value - b.value, back)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        def back(g, a=a, b=b):
            _accumulate(a, _unbroadcast(g * b.value, a.value.shape))
            _accumulate(b, _unbroadcast(g * a.value, b.value.shape))

        return self._emit(a.value * b.value, back)

    def scale(self, a: Tensor, c: float) -> Tensor:
        def back(g, a=a, c=c):
            _accumulate(a, g * c)

        return self._emit(a.value * c, back)

    def add_const(self, a: Tensor, const: np.ndarray) -> Tensor:
        """Add a non-differentiable array (e.g. an attention mask)."""

        def back(g, a=a):
            _accumulate(a, g)

        return self._emit(a.value + const, back)

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        av, bv = a.value, b.value
        if av.ndim != bv.ndim or (av.ndim > 2 and av.shape[:-2] != bv.shape[:-2]):
            raise ValueError(f"matmul needs matching ranks/leading dims, got {av.shape} @ {bv.shape}")
        out = av @ bv
        _require_finite(out, "matmul")

        def back(g, a=a, b=b):
            _accumulate(a, g @ b.value.swapaxes(-1, -2))
            _accumulate(b, a.value.swapaxes(-1, -2) @ g)

        return self._emit(out, back)

    # ---- nonlinearities ------------------------------------------------------

    def sigmoid(self, a: Tensor) -> Tensor:
        x = a.value
        # stable in both tails
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

        def back(g, a=a, s=s):
            _accumulate(a, g * s * (1.0 - s))

        return self._emit(s, back)

    def tanh(self, a: Tensor) -> Tensor:
        t = np.tanh(a.value)

        def back(g, a=a, t=t):
            _accumulate(a, g * (1.0 - t * t))

        return self._emit(t, back)

    def relu(self, a: Tensor) -> Tensor:
        m = a.value > 0

        def back(g, a=a, m=m):
            _accumulate(a, g * m)

        return self._emit(a.value * m, back)

    # ---- shape plumbing ------------------------------------------------------

    def reshape(self, a: Tensor, shape: tuple) -> Tensor:
        old = a.value.shape

        def back(g, a=a, old=old):
            _accumulate(a, g.reshape(old))

        return self._emit(a.value.reshape(shape), back)

    def transpose(self, a: Tensor, axes: tuple) -> Tensor:
        inv = tuple(np.argsort(axes))

        def back(g, a=a, inv=inv):
            _accumulate(a, g.transpose(inv))

        return self._emit(a.value.transpose(axes), back)

    def concat_last(self, a: Tensor, b: Tensor) -> Tensor:
        k = a.value.shape[-1]

        def back(g, a=a, b=b, k=k):
            _accumulate(a, g[..., :k])
            _accumulate(b, g[..., k:])

        return self._emit(np.concatenate([a.value, b.value], axis=-1), back)

    def slice_last(self, a: Tensor, start: int, stop: int) -> Tensor:
        def back(g, a=a, start=start, stop=stop):
            gz = np.zeros_like(a.value)
            gz[..., start:stop] = g
            _accumulate(a, gz)

        return self._emit(a.value[..., start:stop], back)

    def select_step(self, a: Tensor, t: int) -> Tensor:
        """Pick time step t from a (B, L, d) sequence."""

        def back(g, a=a, t=t):
            gz = np.zeros_like(a.value)
            gz[:, t, :] = g
            _accumulate(a, gz)

        return self._emit(a.value[:, t, :], back)

    def stack_steps(self, steps: list) -> Tensor:
        """Stack per-step (B, d) tensors into (B, L, d)."""
        steps = list(steps)

        def back(g, steps=steps):
            for i, s in enumerate(steps):
                _accumulate(s, g[:, i, :])

        return self._emit(np.stack([s.value for s in steps], axis=1), back)

    def embedding(self, table: Tensor, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)

        def back(g, table=table, ids=ids):
            gt = np.zeros_like(table.value)
            np.add.at(gt, ids, g)
            _accumulate(table, gt)

        return self._emit(table.value[ids], back)

    # ---- reductions and fused layers ----------------------------------------

    def sum_all(self, a: Tensor) -> Tensor:
        def back(g, a=a):
            _accumulate(a, np.broadcast_to(g, a.value.shape).copy())

        return self._emit(np.asarray(a.value.sum()), back)

    def softmax_last(self, a: Tensor) -> Tensor:
        x = a.value
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        s = e / e.sum(axis=-1, keepdims=True)
        _require_finite(s, "softmax")

        def back(g, a=a, s=s):
            _accumulate(a, s * (g - (g * s).sum(axis=-1, keepdims=True)))

        return self._emit(s, back)

    def layer_norm(self, a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
        x = a.value
        d = x.shape[-1]
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out = xhat * gain.value + bias.value
        _require_finite(out, "layer_norm")

        def back(g, a=a, gain=gain, bias=bias, xhat=xhat, inv=inv, d=d):
            dxhat = g * gain.value
            dx = (inv / d) * (
                d * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
            _accumulate(a, dx)
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
            _accumulate(bias, g.reshape(-1, d).sum(axis=0))

        return self._emit(out, back)

    def softmax_cross_entropy(self, logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
        """Weighted-mean cross entropy in nats.

        logits: (N, V); targets: int (N,); weights: float (N,), zero for
        positions that must not contribute (padding).  Loss is
        sum(w * nll) / sum(w).
        """
        x = logits.value
        n = x.shape[0]
        targets = np.asarray(targets, dtype=np.int64)
        weights = np.asarray(weights, dtype=np.float64)
        wsum = weights.sum()
        if wsum <= 0:
            raise ValueError("softmax_cross_entropy needs at least one weighted position")
        m = x.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(x - m).sum(axis=-1, keepdims=True)) + m
        nll = lse[:, 0] - x[np.arange(n), targets]
        loss = float((weights * nll).sum() / wsum)
        _require_finite(loss, "softmax_cross_entropy")

        def back(g, logits=logits, lse=lse, targets=targets, weights=weights, wsum=wsum, n=n):
            p = np.exp(logits.value - lse)
            p[np.arange(n), targets] -= 1.0
            p *= (weights / wsum)[:, None] * g
            _accumulate(logits, p)

        return self._emit(np.asarray(loss), back)

    # ---- reverse pass --------------------------------------------------------

    def backward(self, loss: Tensor):
        if loss.value.shape != ():
            raise ValueError("backward expects a scalar loss")
        loss.grad = np.ones((), dtype=np.float64)
        for out, back in reversed(self._ops):
            if out.grad is not None:
                back(out.grad)

    def gradients(self, loss: Tensor, leaves: dict) -> dict:
        """Backward pass, then adjoints for the named leaves (zeros if unused)."""
        self.backward(loss)
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.value))
            for name, t in leaves.items()
        }


def clip_global_norm(grads: dict, max_norm: float):
    """Scale the whole gradient dict so its global L2 norm is <= max_norm.

    max_norm 0 disables clipping.  Returns (grads, pre-clip norm).
    """
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        grads = {name: g * factor for name, g in grads.items()}
    return grads, norm


def finite_diff(fn, params: dict, step: float = 1e-5) -> dict:
    """Central-difference gradients of fn(params) -> float, per coordinate.

    Exhaustive and slow by design; the independent oracle for backward().
    """
    grads = {}
    for name, base in params.items():
        g = np.zeros_like(base)
        flat_base = base.ravel()
        flat_g = g.ravel()
        for i in range(flat_base.size):
            orig = flat_base[i]
            flat_base[i] = orig + step
            hi = fn(params)
            flat_base[i] = orig - step
            lo = fn(params)
            flat_base[i] = orig
            flat_g[i] = (hi - lo) / (2.0 * step)
        grads[name] = g
    return grads
