"""Vocabulary, synthetic tasks, corpus files, and token-budget batching."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import BOS, EOS, PAD, UNK

RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


class Vocab:
    """Shared source/target token table with fixed reserved ids 0..3."""

    def __init__(self, tokens):
        self.id_to_token = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens) -> list[int]:
        return [self.token_to_id.get(t, UNK) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text(
            "\n".join(self.id_to_token[len(RESERVED):]) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls([line for line in text.splitlines() if line])


def build_vocab(pairs, max_size: int) -> Vocab:
    """Frequency-ranked whitespace tokens, ties broken lexicographically.

    ``max_size`` includes the 4 reserved ids; everything beyond the cut
    maps to UNK at encode time.
    """
    if not pairs:
        raise ValueError("build_vocab: empty corpus")
    counts: Counter = Counter()
    for src, tgt in pairs:
        counts.update(src)
        counts.update(tgt)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = max(0, max_size - len(RESERVED))
    return Vocab([tok for tok, _ in ranked[:keep]])


def synth_task(kind: str, n_pairs: int, vocab_size: int, len_range, seed: int):
    """Random sequence pairs with a deterministic transform as target.

    Tokens are decimal strings over ``vocab_size - 4`` symbols so the
    built vocabulary lands exactly at ``vocab_size``.
    """
    lo, hi = len_range
    if kind not in ("copy", "reverse", "sort"):
        raise ValueError(f"unknown task kind {kind!r}")
    n_symbols = vocab_size - len(RESERVED)
    if n_symbols < 1:
        raise ValueError("vocab_size leaves no room for symbols")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        length = int(rng.integers(lo, hi + 1))
        src = [str(int(v)) for v in rng.integers(n_symbols, size=length)]
        if kind == "copy":
            tgt = list(src)
        elif kind == "reverse":
            tgt = src[::-1]
        else:
            tgt = sorted(src, key=int)
        pairs.append((src, tgt))
    return pairs


def write_corpus(pairs, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for src, tgt in pairs:
            fh.write(" ".join(src) + "\t" + " ".join(tgt) + "\n")


def read_corpus(path):
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            src, _, tgt = line.partition("\t")
            pairs.append((src.split(), tgt.split()))
    return pairs


@dataclass
class Batch:
    """Padded id matrices for one training step.

    ``src`` carries source tokens plus EOS; ``tgt_in`` is BOS plus the
    target; ``tgt_out`` the target plus EOS. Masks are True at real
    (non-pad) positions, and losses must ignore everything else.
    """

    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    src_mask: np.ndarray
    tgt_mask: np.ndarray
    n_src_tokens: int
    n_tgt_tokens: int

    @property
    def n_pairs(self) -> int:
        return self.src.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.n_src_tokens + self.n_tgt_tokens


def pair_token_count(src_ids, tgt_ids) -> int:
    # src + EOS plus tgt + EOS, the non-pad footprint of the pair.
    return len(src_ids) + len(tgt_ids) + 2


def _build_batch(group) -> Batch:
    ls = max(len(s) for s, _ in group) + 1
    lt = max(len(t) for _, t in group) + 1
    n = len(group)
    src = np.full((n, ls), PAD, dtype=np.int64)
    tgt_in = np.full((n, lt), PAD, dtype=np.int64)
    tgt_out = np.full((n, lt), PAD, dtype=np.int64)
    src_mask = np.zeros((n, ls), dtype=bool)
    tgt_mask = np.zeros((n, lt), dtype=bool)
    n_src = n_tgt = 0
    for i, (s, t) in enumerate(group):
        row = list(s) + [EOS]
        src[i, : len(row)] = row
        src_mask[i, : len(row)] = True
        n_src += len(row)
        tin = [BOS] + list(t)
        tout = list(t) + [EOS]
        tgt_in[i, : len(tin)] = tin
        tgt_out[i, : len(tout)] = tout
        tgt_mask[i, : len(tout)] = True
        n_tgt += len(tout)
    return Batch(src, tgt_in, tgt_out, src_mask, tgt_mask, n_src, n_tgt)


def make_batches(id_pairs, token_budget: int, seed: int) -> list[Batch]:
    """Length-bucketed batches, each within the non-pad token budget.

    Pairs are sorted by length so padding stays small, packed greedily,
    then the batch order is shuffled by the seed. Composition is fully
    deterministic.
    """
    if not id_pairs:
        return []
    for s, t in id_pairs:
        if pair_token_count(s, t) > token_budget:
            raise ValueError(
                f"pair with {pair_token_count(s, t)} tokens exceeds budget {token_budget}"
            )
    order = sorted(range(len(id_pairs)),
                   key=lambda i: (len(id_pairs[i][1]), len(id_pairs[i][0]), i))
    groups: list[list] = []
    current: list = []
    used = 0
    for i in order:
        cost = pair_token_count(*id_pairs[i])
        if current and used + cost > token_budget:
            groups.append(current)
            current = []
            used = 0
        current.append(id_pairs[i])
        used += cost
    if current:
        groups.append(current)
    batches = [_build_batch(g) for g in groups]
    rng = np.random.default_rng(seed)
    return [batches[i] for i in rng.permutation(len(batches))]


def encode_pairs(pairs, vocab: Vocab):
    return [(vocab.encode(s), vocab.encode(t)) for s, t in pairs]
