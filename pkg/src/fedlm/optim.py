"""SGD, Adam, and Adagrad steps over name -> array gradient maps.

Client updates use the functional steps; the server keeps stateful
optimizers whose slot variables live per tensor name.  The server treats
the negated mean client delta as a pseudo-gradient, so plain SGD at lr 1.0
reduces to federated averaging.
"""

from __future__ import annotations

import io

import numpy as np

from .params import ParameterSet, read_tensor_map, write_tensor_map
from .tensor import NonFiniteError

__all__ = [
    "AdagradState",
    "AdamState",
    "SgdState",
    "adagrad_step",
    "adam_step",
    "served_optimizer",
    "server_apply",
    "sgd_step",
]


def _check_update(name: str, arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite {what} for tensor {name!r}")


def sgd_step(values: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
    """In-place w -= lr * g for every tensor present in grads."""
    for name, g in grads.items():
        _check_update(name, g, "gradient")
        values[name] -= lr * g


class AdamState:
    """Bias-corrected Adam (Kingma & Ba) over named tensors.

    The step count t is global: it advances once per step() call, even when
    a tensor sits out a round, so bias correction does not depend on which
    tensors happened to receive updates.
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, values: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        correct1 = 1.0 - self.beta1**self.t
        correct2 = 1.0 - self.beta2**self.t
        for name in sorted(grads):
            g = grads[name]
            _check_update(name, g, "gradient")
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(g)
                self.m[name] = m
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / correct1
            vhat = v / correct2
            update = self.lr * mhat / (np.sqrt(vhat) + self.eps)
            _check_update(name, update, "adam update")
            values[name] -= update

    def to_bytes(self) -> bytes:
        tensors = {"meta/step": np.asarray([float(self.t)])}
        for name, arr in self.m.items():
            tensors[f"m/{name}"] = arr
        for name, arr in self.v.items():
            tensors[f"v/{name}"] = arr
        buf = io.BytesIO()
        write_tensor_map(buf, tensors)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        state = cls(lr, beta1, beta2, eps)
        tensors = read_tensor_map(io.BytesIO(raw))
        state.t = int(tensors.pop("meta/step")[0])
        for name, arr in tensors.items():
            kind, _, tname = name.partition("/")
            if kind == "m":
                state.m[tname] = arr
            elif kind == "v":
                state.v[tname] = arr
            else:
                raise ValueError(f"unexpected slot {name!r}")
        return state


class AdagradState:
    """Adagrad accumulator over named tensors: A += g*g, w -= lr*g/(sqrt(A)+eps)."""

    def __init__(self, lr: float, eps: float = 1e-3):
        self.lr = float(lr)
        self.eps = float(eps)
        self.acc: dict[str, np.ndarray] = {}

    def accumulator_for(self, name: str, like: np.ndarray) -> np.ndarray:
        acc = self.acc.get(name)
        if acc is None:
            acc = np.zeros_like(like)
            self.acc[name] = acc
        return acc

    def step(self, values: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        for name in sorted(grads):
            g = grads[name]
            _check_update(name, g, "gradient")
            acc = self.accumulator_for(name, g)
            acc += g * g
            update = self.lr * g / (np.sqrt(acc) + self.eps)
            _check_update(name, update, "adagrad update")
            values[name] -= update

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        write_tensor_map(buf, self.acc)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes, lr: float, eps: float = 1e-3):
        state = cls(lr, eps)
        state.acc = read_tensor_map(io.BytesIO(raw))
        return state


class SgdState:
    """Stateless SGD behind the same step() interface."""

    def __init__(self, lr: float):
        self.lr = float(lr)

    def step(self, values: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        sgd_step(values, grads, self.lr)


def adam_step(values, grads, state: AdamState):
    state.step(values, grads)


def adagrad_step(values, grads, state: AdagradState):
    state.step(values, grads)


def served_optimizer(kind: str, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    if kind == "adam":
        return AdamState(lr, beta1, beta2, eps)
    if kind == "sgd":
        return SgdState(lr)
    raise ValueError(f"unknown server optimizer {kind!r}")


def server_apply(params: ParameterSet, optimizer, mean_delta: dict[str, np.ndarray]):
    """One server step from the aggregated client delta.

    Pseudo-gradient is -mean_delta; tensors absent from mean_delta are left
    untouched (their optimizer slots too).  SGD at lr 1.0 is exactly
    federated averaging: w += mean_delta.
    """
    grads = {name: -delta for name, delta in mean_delta.items()}
    optimizer.step(params.values_map(), grads)
