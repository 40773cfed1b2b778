"""Corpus handling: vocab, client partitions, batching, synthetic data.

Tokenization is whitespace splitting; the vocabulary reserves pad=0, unk=1,
bos=2, eos=3 and fills the rest by corpus frequency (ties broken
lexicographically).  Client partitions are UTF-8 text files with one
"client_id<TAB>text" line per example.

The synthetic generator produces non-IID clients from bigram chains: every
client samples from (1 - skew) * shared_table + skew * client_table, with
Dirichlet(alpha) rows.  Small alpha makes rows peaked, so bigram structure
dominates and a unigram model is clearly beatable.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .prng import Prng

__all__ = [
    "BOS_ID",
    "Batch",
    "ClientDataset",
    "EOS_ID",
    "PAD_ID",
    "UNK_ID",
    "Vocab",
    "build_vocab",
    "encode",
    "group_rows",
    "load_partition",
    "make_batches",
    "read_partition",
    "save_partition",
    "split_eval",
    "synth_generate",
    "unigram_perplexity",
]

PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
EOS_ID = 3
SPECIALS = ("<pad>", "<unk>", "<bos>", "<eos>")


@dataclass
class Vocab:
    id_to_token: list[str]
    token_to_id: dict[str, int]

    @property
    def size(self) -> int:
        return len(self.id_to_token)


def build_vocab(texts, size: int) -> Vocab:
    """Top (size - 4) tokens by frequency, ties lexicographic."""
    if size < 5:
        raise ValueError("vocab size must be at least 5")
    counts = Counter()
    for text in texts:
        counts.update(text.split())
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    id_to_token = list(SPECIALS) + [tok for tok, _ in ordered[: size - 4]]
    return Vocab(id_to_token, {tok: i for i, tok in enumerate(id_to_token)})


def encode(vocab: Vocab, text: str) -> list[int]:
    return [vocab.token_to_id.get(tok, UNK_ID) for tok in text.split()]


@dataclass
class ClientDataset:
    client_id: str
    sequences: list  # list of list[int], content tokens only (no bos/eos)

    def num_examples(self) -> int:
        return len(self.sequences)


# ---- partition files -----------------------------------------------------------


def save_partition(path, rows):
    """rows: iterable of (client_id, text)."""
    with open(path, "w", encoding="utf-8") as fh:
        for client_id, text in rows:
            if "\t" in client_id or "\n" in client_id or "\n" in text:
                raise ValueError("client ids and texts must not contain tabs/newlines")
            fh.write(f"{client_id}\t{text}\n")


def read_partition(path) -> list:
    """(client_id, text) rows in file order; blank lines ignored."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected client_id<TAB>text")
            client_id, text = line.split("\t", 1)
            rows.append((client_id, text))
    return rows


def group_rows(rows) -> list:
    """Group (client_id, text) rows by client, first-appearance order."""
    grouped: dict[str, list] = {}
    for client_id, text in rows:
        grouped.setdefault(client_id, []).append(text)
    return list(grouped.items())


def load_partition(path, vocab: Vocab) -> list:
    """Tokenized ClientDatasets grouped by client id, order-stable."""
    datasets = []
    for client_id, texts in group_rows(read_partition(path)):
        sequences = [ids for ids in (encode(vocab, text) for text in texts) if ids]
        datasets.append(ClientDataset(client_id, sequences))
    return datasets


# ---- synthetic corpus ----------------------------------------------------------


def _dirichlet_rows(gen: np.random.Generator, n_rows: int, n_cols: int, alpha: float) -> np.ndarray:
    draws = gen.gamma(alpha, 1.0, size=(n_rows, n_cols))
    draws += 1e-12  # keep rows normalizable even if every gamma underflows
    return draws / draws.sum(axis=1, keepdims=True)


def synth_generate(
    num_clients: int,
    seqs_per_client: int,
    vocab_size: int,
    skew: float,
    rng: Prng,
    min_len: int = 5,
    max_len: int = 20,
    alpha: float = 0.15,
) -> list:
    """(client_id, text) rows for a bigram-chain corpus.

    vocab_size counts the full model vocabulary including the 4 specials, so
    vocab_size - 4 distinct words are emitted.  skew in [0, 1] interpolates
    each client's transition table between the shared table (0) and a fully
    client-specific one (1).
    """
    if vocab_size < 5:
        raise ValueError("vocab_size must be at least 5")
    if not 0.0 <= skew <= 1.0:
        raise ValueError("skew must be in [0, 1]")
    if not 1 <= min_len <= max_len:
        raise ValueError("need 1 <= min_len <= max_len")
    words = vocab_size - 4
    word_names = [f"w{i:03d}" for i in range(words)]
    shared_gen = rng.child("shared").generator()
    shared_table = _dirichlet_rows(shared_gen, words, words, alpha)
    shared_start = _dirichlet_rows(shared_gen, 1, words, alpha)[0]

    rows = []
    for c in range(num_clients):
        gen = rng.child("client", c).generator()
        table = shared_table
        start = shared_start
        if skew > 0.0:
            own_table = _dirichlet_rows(gen, words, words, alpha)
            own_start = _dirichlet_rows(gen, 1, words, alpha)[0]
            table = (1.0 - skew) * shared_table + skew * own_table
            start = (1.0 - skew) * shared_start + skew * own_start
        client_id = f"client{c:04d}"
        for _ in range(seqs_per_client):
            length = int(gen.integers(min_len, max_len + 1))
            tokens = [int(gen.choice(words, p=start))]
            for _ in range(length - 1):
                tokens.append(int(gen.choice(words, p=table[tokens[-1]])))
            rows.append((client_id, " ".join(word_names[t] for t in tokens)))
    return rows


# ---- batching ------------------------------------------------------------------


@dataclass
class Batch:
    inputs: np.ndarray  # int64 (B, L): bos + content, padded
    targets: np.ndarray  # int64 (B, L): content + eos, padded
    mask: np.ndarray  # float64 (B, L): 1.0 where targets supervise

    @property
    def num_examples(self) -> int:
        return self.inputs.shape[0]

    def num_positions(self) -> float:
        return float(self.mask.sum())


def _render_rows(sequences, max_len: int):
    n = len(sequences)
    inputs = np.full((n, max_len), PAD_ID, dtype=np.int64)
    targets = np.full((n, max_len), PAD_ID, dtype=np.int64)
    for i, ids in enumerate(sequences):
        in_row = ([BOS_ID] + list(ids))[:max_len]
        tgt_row = (list(ids) + [EOS_ID])[:max_len]
        inputs[i, : len(in_row)] = in_row
        targets[i, : len(tgt_row)] = tgt_row
    mask = (targets != PAD_ID).astype(np.float64)
    return inputs, targets, mask


def make_batches(
    sequences,
    batch_size: int,
    max_len: int,
    rng: Prng | None = None,
    max_examples: int | None = None,
) -> list:
    """Optionally shuffled, example-capped batches; last partial batch kept.

    A sequence of n content tokens contributes min(n + 1, max_len) supervised
    positions (the +1 is the eos target; truncation drops it).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = np.arange(len(sequences))
    if rng is not None:
        order = rng.generator().permutation(len(sequences))
    if max_examples is not None:
        order = order[:max_examples]
    batches = []
    for lo in range(0, len(order), batch_size):
        chunk = [sequences[i] for i in order[lo : lo + batch_size]]
        inputs, targets, mask = _render_rows(chunk, max_len)
        batches.append(Batch(inputs, targets, mask))
    return batches


def split_eval(datasets, fraction: float, rng: Prng):
    """Hold out a per-client fraction of sequences, pooled across clients.

    Every client keeps at least one training sequence; clients with a single
    sequence contribute nothing to the eval pool.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("eval fraction must be in (0, 1)")
    train = []
    eval_sequences = []
    for ds in datasets:
        n = len(ds.sequences)
        k = min(int(round(n * fraction)), n - 1)
        order = rng.child("evalsplit", ds.client_id).generator().permutation(n)
        held = set(order[:k].tolist())
        train.append(ClientDataset(ds.client_id, [s for i, s in enumerate(ds.sequences) if i not in held]))
        eval_sequences.extend(ds.sequences[i] for i in sorted(held))
    return train, eval_sequences


# ---- reference baseline ----------------------------------------------------------


def unigram_perplexity(train_sequences, eval_sequences, vocab_size: int, max_len: int) -> float:
    """Perplexity of the add-one-smoothed train unigram model on eval targets.

    Mirrors the batching semantics exactly: each sequence supervises
    (content + eos) truncated to max_len positions.
    """
    counts = np.zeros(vocab_size, dtype=np.float64)
    for ids in train_sequences:
        for t in (list(ids) + [EOS_ID])[:max_len]:
            counts[t] += 1.0
    probs = (counts + 1.0) / (counts.sum() + vocab_size)
    log_probs = np.log(probs)
    total = 0.0
    positions = 0
    for ids in eval_sequences:
        for t in (list(ids) + [EOS_ID])[:max_len]:
            total += log_probs[t]
            positions += 1
    if positions == 0:
        raise ValueError("no evaluation positions")
    return float(np.exp(-total / positions))
