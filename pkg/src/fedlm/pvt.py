"""Partial variable training: per-client, per-round tensor freezing.

Only freezable tensors (embeddings, weight matrices, layer-norm gains) may
be frozen; biases always train.  Selection is greedy best-fit: visit the
freezable tensors in rng-shuffled order and include each one iff the
running trainable count stays within fraction * total.  The realized
trainable count therefore lands at or just under the target (never above),
and fraction 1.0 marks everything trainable.  Granularity is whole tensors,
so coarse architectures (the 1-layer LSTM) land farther from the target
than fine-grained ones.
"""

from __future__ import annotations

from .params import Param, ParameterSet
from .prng import Prng

__all__ = ["apply_mask", "mask_param_count", "select_mask"]


def select_mask(pset: ParameterSet, fraction: float, rng: Prng) -> dict[str, bool]:
    """name -> trainable decision for one (round, client)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"trainable fraction must be in (0, 1], got {fraction}")
    budget = fraction * pset.total_count()
    mask = {}
    count = 0
    for name, p in pset.items():
        mask[name] = not p.freezable
        if not p.freezable:
            count += p.value.size
    freezable = pset.freezable_names()
    order = rng.generator().permutation(len(freezable))
    for i in order:
        name = freezable[i]
        size = pset[name].value.size
        if count + size <= budget:
            mask[name] = True
            count += size
    return mask


def apply_mask(pset: ParameterSet, mask: dict[str, bool]) -> ParameterSet:
    """New ParameterSet with trainable flags from mask (values shared, input untouched)."""
    out = ParameterSet()
    for name, p in pset.items():
        out._params[name] = Param(p.value, p.freezable, bool(mask.get(name, True)))
    return out


def mask_param_count(pset: ParameterSet, mask: dict[str, bool]) -> int:
    return sum(p.value.size for name, p in pset.items() if mask.get(name, True))
