"""The two model families: coupled-gate LSTM and decoder-only Transformer.

Both are next-token language models over a shared vocabulary layout
(pad=0, unk=1, bos=2, eos=3), with the input embedding tied to the output
projection.  Parameters live in a ParameterSet keyed by name; which tensors
partial-variable training may freeze is decided here, by architecture:
multiplicative tensors (embeddings, weight matrices, layer-norm gains) are
freezable, biases never are.

The LSTM is CIFG (input gate = 1 - forget gate) with an output projection
back to the embedding width, one combined gate kernel per layer.  Gate
order inside the kernel is [forget, output, candidate].

The Transformer is pre-norm with learned positions, causal masking at
-1e9 (finite, and exp(-1e9 - max) underflows to exactly zero), attention
projections without biases, and a ReLU MLP.

Initialization: weight matrices and embeddings are fan-in scaled uniform
U(-sqrt(3/fan_in), +sqrt(3/fan_in)) with fan_in = rows for matrices and
the embedding width for embeddings; biases zero; layer-norm gains one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .params import ParameterSet, load_checkpoint
from .prng import Prng
from .tensor import GradientTape, Tensor

__all__ = [
    "ARCHITECTURES",
    "PRESETS",
    "ModelConfig",
    "count_params",
    "evaluate_perplexity",
    "forward_logits",
    "init_params",
    "list_freezable",
    "loss_and_grads",
    "params_from_arrays",
    "params_from_checkpoint",
    "preset_config",
]

ARCHITECTURES = ("cifg_lstm", "transformer")

NEG_MASK = -1e9


@dataclass(frozen=True)
class ModelConfig:
    arch: str
    vocab_size: int
    embed_dim: int
    layer_size: int  # LSTM cell width / Transformer MLP hidden width
    num_layers: int  # LSTM layers / Transformer blocks
    num_heads: int = 8
    max_seq_len: int = 30

    def validate(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.vocab_size < 5:
            raise ValueError("vocab_size must be at least 5 (4 specials + content)")
        for field in ("embed_dim", "layer_size", "num_layers", "max_seq_len"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive")
        if self.arch == "transformer":
            if self.num_heads < 1:
                raise ValueError("num_heads must be positive")
            if self.embed_dim % self.num_heads:
                raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        return self


# Word-level benchmark sizes; vocab 4K after sentence-piece-free tokenization.
PRESETS = {
    "small_lstm": ModelConfig("cifg_lstm", 4000, 256, 2048, 1),
    "large_lstm": ModelConfig("cifg_lstm", 4000, 1024, 2048, 1),
    "small_transformer": ModelConfig("transformer", 4000, 128, 2048, 6),
    "large_transformer": ModelConfig("transformer", 4000, 512, 2048, 6),
}


def preset_config(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    cfg = PRESETS[name]
    return replace(cfg, **overrides).validate() if overrides else cfg


def _template(cfg: ModelConfig):
    """(name, shape, kind, freezable) for every tensor, in definition order.

    kind: dense | embed | zeros | ones.
    """
    v, e, h = cfg.vocab_size, cfg.embed_dim, cfg.layer_size
    spec = [("embedding", (v, e), "embed", True)]
    if cfg.arch == "cifg_lstm":
        for layer in range(cfg.num_layers):
            spec.append((f"lstm{layer}/kernel", (2 * e, 3 * h), "dense", True))
            spec.append((f"lstm{layer}/bias", (3 * h,), "zeros", False))
            spec.append((f"lstm{layer}/proj", (h, e), "dense", True))
    else:
        spec.append(("pos_embedding", (cfg.max_seq_len, e), "embed", True))
        for b in range(cfg.num_layers):
            spec.append((f"block{b}/attn_wq", (e, e), "dense", True))
            spec.append((f"block{b}/attn_wk", (e, e), "dense", True))
            spec.append((f"block{b}/attn_wv", (e, e), "dense", True))
            spec.append((f"block{b}/attn_wo", (e, e), "dense", True))
            spec.append((f"block{b}/ln1_gain", (e,), "ones", True))
            spec.append((f"block{b}/ln1_bias", (e,), "zeros", False))
            spec.append((f"block{b}/ln2_gain", (e,), "ones", True))
            spec.append((f"block{b}/ln2_bias", (e,), "zeros", False))
            spec.append((f"block{b}/mlp_w1", (e, h), "dense", True))
            spec.append((f"block{b}/mlp_b1", (h,), "zeros", False))
            spec.append((f"block{b}/mlp_w2", (h, e), "dense", True))
            spec.append((f"block{b}/mlp_b2", (e,), "zeros", False))
        spec.append(("final_ln_gain", (e,), "ones", True))
        spec.append(("final_ln_bias", (e,), "zeros", False))
    spec.append(("output_bias", (v,), "zeros", False))
    return spec


def count_params(cfg: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _, _ in _template(cfg))


def list_freezable(cfg: ModelConfig) -> list[str]:
    return sorted(name for name, _, _, freezable in _template(cfg) if freezable)


def init_params(cfg: ModelConfig, rng: Prng) -> ParameterSet:
    cfg.validate()
    pset = ParameterSet()
    for name, shape, kind, freezable in _template(cfg):
        if kind == "zeros":
            value = np.zeros(shape)
        elif kind == "ones":
            value = np.ones(shape)
        else:
            fan_in = shape[-1] if kind == "embed" else shape[0]
            bound = math.sqrt(3.0 / fan_in)
            value = rng.child("init", name).generator().uniform(-bound, bound, shape)
        pset.add(name, value, freezable)
    return pset


def params_from_arrays(cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> ParameterSet:
    """Attach architecture flags to a bare name -> array map (e.g. a checkpoint)."""
    expected = {name: shape for name, shape, _, _ in _template(cfg)}
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing or extra:
        raise ValueError(f"tensor names do not match architecture (missing {missing}, extra {extra})")
    pset = ParameterSet()
    for name, shape, _, freezable in _template(cfg):
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != shape:
            raise ValueError(f"tensor {name!r} has shape {arr.shape}, expected {shape}")
        pset.add(name, arr, freezable)
    return pset


def params_from_checkpoint(cfg: ModelConfig, path) -> ParameterSet:
    return params_from_arrays(cfg, load_checkpoint(path))


# ---- forward ------------------------------------------------------------------


def _leaves(tape: GradientTape, pset: ParameterSet) -> dict[str, Tensor]:
    return {name: tape.leaf(p.value) for name, p in pset.items()}


def _forward_lstm(tape, leaves, cfg, tokens) -> Tensor:
    batch, length = tokens.shape
    e, h = cfg.embed_dim, cfg.layer_size
    seq = tape.embedding(leaves["embedding"], tokens)  # (B, L, e)
    for layer in range(cfg.num_layers):
        kernel = leaves[f"lstm{layer}/kernel"]
        bias = leaves[f"lstm{layer}/bias"]
        proj = leaves[f"lstm{layer}/proj"]
        hidden = tape.constant(np.zeros((batch, e)))
        cell = tape.constant(np.zeros((batch, h)))
        outputs = []
        for t in range(length):
            x_t = tape.select_step(seq, t)
            z = tape.add(tape.matmul(tape.concat_last(x_t, hidden), kernel), bias)
            forget = tape.sigmoid(tape.slice_last(z, 0, h))
            out_gate = tape.sigmoid(tape.slice_last(z, h, 2 * h))
            candidate = tape.tanh(tape.slice_last(z, 2 * h, 3 * h))
            one_minus_f = tape.add_const(tape.scale(forget, -1.0), 1.0)  # input gate
            cell = tape.add(tape.mul(forget, cell), tape.mul(one_minus_f, candidate))
            hidden = tape.matmul(tape.mul(out_gate, tape.tanh(cell)), proj)
            outputs.append(hidden)
        seq = tape.stack_steps(outputs)
    flat = tape.reshape(seq, (batch * length, e))
    logits = tape.add(
        tape.matmul(flat, tape.transpose(leaves["embedding"], (1, 0))), leaves["output_bias"]
    )
    return tape.reshape(logits, (batch, length, cfg.vocab_size))


def _forward_transformer(tape, leaves, cfg, tokens) -> Tensor:
    batch, length = tokens.shape
    if length > cfg.max_seq_len:
        raise ValueError(f"sequence length {length} exceeds max_seq_len {cfg.max_seq_len}")
    e, heads = cfg.embed_dim, cfg.num_heads
    dk = e // heads
    mask = np.triu(np.full((length, length), NEG_MASK), k=1)

    pos = tape.embedding(leaves["pos_embedding"], np.arange(length))
    x = tape.add(tape.embedding(leaves["embedding"], tokens), pos)  # (B, L, e)

    def dense(t2d, name):
        return tape.matmul(t2d, leaves[name])

    def split_heads(t2d):
        return tape.transpose(tape.reshape(t2d, (batch, length, heads, dk)), (0, 2, 1, 3))

    for b in range(cfg.num_layers):
        a = tape.layer_norm(x, leaves[f"block{b}/ln1_gain"], leaves[f"block{b}/ln1_bias"])
        a2 = tape.reshape(a, (batch * length, e))
        q = split_heads(dense(a2, f"block{b}/attn_wq"))
        k = split_heads(dense(a2, f"block{b}/attn_wk"))
        v = split_heads(dense(a2, f"block{b}/attn_wv"))
        scores = tape.scale(tape.matmul(q, tape.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
        probs = tape.softmax_last(tape.add_const(scores, mask))
        ctx = tape.transpose(tape.matmul(probs, v), (0, 2, 1, 3))  # (B, L, H, dk)
        ctx = tape.reshape(ctx, (batch * length, e))
        attn_out = tape.reshape(dense(ctx, f"block{b}/attn_wo"), (batch, length, e))
        x = tape.add(x, attn_out)

        m = tape.layer_norm(x, leaves[f"block{b}/ln2_gain"], leaves[f"block{b}/ln2_bias"])
        m2 = tape.reshape(m, (batch * length, e))
        hid = tape.relu(tape.add(dense(m2, f"block{b}/mlp_w1"), leaves[f"block{b}/mlp_b1"]))
        mlp_out = tape.add(tape.matmul(hid, leaves[f"block{b}/mlp_w2"]), leaves[f"block{b}/mlp_b2"])
        x = tape.add(x, tape.reshape(mlp_out, (batch, length, e)))

    x = tape.layer_norm(x, leaves["final_ln_gain"], leaves["final_ln_bias"])
    flat = tape.reshape(x, (batch * length, e))
    logits = tape.add(
        tape.matmul(flat, tape.transpose(leaves["embedding"], (1, 0))), leaves["output_bias"]
    )
    return tape.reshape(logits, (batch, length, cfg.vocab_size))


def forward_logits(tape: GradientTape, pset: ParameterSet, cfg: ModelConfig, tokens: np.ndarray):
    """Logits (B, L, V) plus the leaf map used to build them."""
    leaves = _leaves(tape, pset)
    if cfg.arch == "cifg_lstm":
        return _forward_lstm(tape, leaves, cfg, tokens), leaves
    return _forward_transformer(tape, leaves, cfg, tokens), leaves


def loss_and_grads(pset: ParameterSet, cfg: ModelConfig, batch):
    """Mean masked cross entropy and gradients for the trainable tensors only."""
    tape = GradientTape()
    logits, leaves = forward_logits(tape, pset, cfg, batch.inputs)
    n, length = batch.inputs.shape
    flat = tape.reshape(logits, (n * length, cfg.vocab_size))
    loss = tape.softmax_cross_entropy(flat, batch.targets.ravel(), batch.mask.ravel())
    trainable = {name: leaves[name] for name in pset.trainable_names()}
    grads = tape.gradients(loss, trainable)
    return float(loss.value), grads, float(batch.mask.sum())


def evaluate_perplexity(pset: ParameterSet, cfg: ModelConfig, batches) -> float:
    """exp(total nats / total supervised positions) over the given batches."""
    total_nll = 0.0
    total_positions = 0.0
    for batch in batches:
        tape = GradientTape()
        logits, _ = forward_logits(tape, pset, cfg, batch.inputs)
        n, length = batch.inputs.shape
        flat = tape.reshape(logits, (n * length, cfg.vocab_size))
        loss = tape.softmax_cross_entropy(flat, batch.targets.ravel(), batch.mask.ravel())
        positions = float(batch.mask.sum())
        total_nll += float(loss.value) * positions
        total_positions += positions
    if total_positions == 0:
        raise ValueError("no supervised positions in evaluation batches")
    return float(np.exp(total_nll / total_positions))
