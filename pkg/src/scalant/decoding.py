"""Greedy and beam-search decoding, plus offline distillation-target
generation with length/ratio filtering.

Decoding is correctness-first: the decoder re-runs on the whole prefix
each step (no incremental cache), the encoder runs once per source.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Vocab
from .model import BOS, EOS, SubModel
from .tensor import log_softmax_np


@dataclass
class Hypothesis:
    """A partial or finished decode: generated ids (EOS included when it
    ended the hypothesis), accumulated log-probability, finished flag."""

    tokens: tuple
    logp: float
    finished: bool

    def score(self, alpha: float) -> float:
        """Length-penalized score: logp / len(tokens) ** alpha."""
        n = max(1, len(self.tokens))
        return self.logp / (n ** alpha)


def _encode_source(sub: SubModel, src_ids) -> tuple:
    src = np.asarray(list(src_ids) + [EOS], dtype=np.int64)[None, :]
    mask = np.ones_like(src, dtype=bool)
    memory = sub.encode(src, mask, train=False)
    return memory, mask


def _step_logprobs(sub: SubModel, prefixes: np.ndarray, memory, src_mask) -> np.ndarray:
    """Log-probabilities of the next token for each prefix row."""
    n = prefixes.shape[0]
    if memory.shape[0] != n:
        mem_data = np.broadcast_to(memory.data, (n,) + memory.shape[1:])
        from .tensor import Tensor

        memory = Tensor._wrap(np.ascontiguousarray(mem_data), False)
        src_mask = np.broadcast_to(src_mask, (n, src_mask.shape[1]))
    logits = sub.decode(prefixes, memory, src_mask, train=False)
    return log_softmax_np(logits.data[:, -1, :])


def default_max_len(sub: SubModel) -> int:
    # BOS occupies one decoder slot, so generation caps one short.
    return sub.config.max_seq_len - 1


def greedy_decode(sub: SubModel, src_ids, max_len: int | None = None) -> list[int]:
    """Argmax decoding (ties to the lowest token id); stops at EOS or
    max_len. The returned tokens exclude EOS."""
    if max_len is None:
        max_len = default_max_len(sub)
    memory, src_mask = _encode_source(sub, src_ids)
    prefix = [BOS]
    out: list[int] = []
    for _ in range(max_len):
        lp = _step_logprobs(sub, np.asarray([prefix], dtype=np.int64), memory, src_mask)
        tok = int(np.argmax(lp[0]))
        if tok == EOS:
            break
        out.append(tok)
        prefix.append(tok)
    return out


def greedy_decode_batch(sub: SubModel, sources, max_len: int | None = None) -> list[list[int]]:
    """Step-synchronized greedy decoding of many sources at once.

    Semantics match per-source greedy decoding; finished rows are frozen
    and padded until every row emits EOS or hits max_len.
    """
    if max_len is None:
        max_len = default_max_len(sub)
    if not sources:
        return []
    n = len(sources)
    ls = max(len(s) for s in sources) + 1
    src = np.zeros((n, ls), dtype=np.int64)
    src_mask = np.zeros((n, ls), dtype=bool)
    for i, s in enumerate(sources):
        row = list(s) + [EOS]
        src[i, : len(row)] = row
        src_mask[i, : len(row)] = True
    memory = sub.encode(src, src_mask, train=False)

    prefixes = np.full((n, 1), BOS, dtype=np.int64)
    outputs: list[list[int]] = [[] for _ in range(n)]
    alive = np.ones(n, dtype=bool)
    for _ in range(max_len):
        lp = _step_logprobs(sub, prefixes, memory, src_mask)
        nxt = lp.argmax(axis=1)
        nxt[~alive] = EOS
        for i in np.nonzero(alive)[0]:
            if nxt[i] == EOS:
                alive[i] = False
            else:
                outputs[i].append(int(nxt[i]))
        if not alive.any():
            break
        prefixes = np.concatenate([prefixes, nxt[:, None]], axis=1)
    return outputs


def beam_search(sub: SubModel, src_ids, beam: int, alpha: float,
                max_len: int | None = None, return_score: bool = False):
    """Beam search with length-penalized scoring logp / len ** alpha.

    Each step ranks every vocabulary continuation of every live
    hypothesis by cumulative log-probability (ties to the lower live
    index, then lower token id) and keeps the top ``beam``; finished
    continuations (EOS, or any token at max_len) occupy their slot and
    compete for the best finished score, so beam 1 reduces exactly to
    greedy decoding. The search stops once the best live hypothesis can
    no longer beat the best finished score. Returns the best hypothesis'
    tokens without EOS (with its score when ``return_score``).
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if alpha < 0:
        raise ValueError("length penalty alpha must be >= 0")
    if max_len is None:
        max_len = default_max_len(sub)
    memory, src_mask = _encode_source(sub, src_ids)

    live = [Hypothesis((), 0.0, False)]
    best: Hypothesis | None = None
    for step in range(1, max_len + 1):
        prefixes = np.asarray([(BOS,) + h.tokens for h in live], dtype=np.int64)
        lp = _step_logprobs(sub, prefixes, memory, src_mask)
        cand_logp = np.asarray([h.logp for h in live])[:, None] + lp

        n_live, n_vocab = cand_logp.shape
        flat = cand_logp.ravel()
        order = np.lexsort(
            (np.tile(np.arange(n_vocab), n_live),
             np.repeat(np.arange(n_live), n_vocab),
             -flat)
        )

        next_live: list[Hypothesis] = []
        for idx in order[: min(beam, flat.size)]:
            i, tok = divmod(int(idx), n_vocab)
            logp = float(flat[idx])
            tokens = live[i].tokens + (tok,)
            if tok == EOS or step == max_len:
                fin = Hypothesis(tokens, logp, True)
                if best is None or fin.score(alpha) > best.score(alpha):
                    best = fin
            else:
                next_live.append(Hypothesis(tokens, logp, False))
        live = next_live
        if not live:
            break
        # Upper bound on any live continuation: logp only decreases, the
        # length divisor is largest at max_len.
        bound = max(h.logp for h in live) / (max_len ** alpha)
        if best is not None and bound <= best.score(alpha):
            break

    assert best is not None
    tokens = list(best.tokens)
    if tokens and tokens[-1] == EOS:
        tokens.pop()
    if return_score:
        return tokens, best.score(alpha)
    return tokens


# --- distillation corpus ------------------------------------------------------


@dataclass
class Provenance:
    checkpoint: str = ""
    beam: int = 4
    alpha: float = 0.6
    ratio_cap: float = 20.0
    len_cap: int = 250


@dataclass
class DistillCorpus:
    pairs: list = field(default_factory=list)
    provenance: Provenance = field(default_factory=Provenance)

    def __len__(self) -> int:
        return len(self.pairs)


def passes_length_filter(src_len: int, tgt_len: int, ratio_cap: float,
                         len_cap: float) -> bool:
    """Symmetric ratio cap plus a hard cap on the longer side."""
    longer, shorter = max(src_len, tgt_len), min(src_len, tgt_len)
    if longer == 0:
        ratio = 1.0
    elif shorter == 0:
        ratio = float("inf")
    else:
        ratio = longer / shorter
    return not (ratio > ratio_cap or longer > len_cap)


def generate_distill_corpus(
    widest: SubModel,
    sources,
    beam: int = 4,
    alpha: float = 0.6,
    ratio_cap: float = 20.0,
    len_cap: float = 250,
    max_len: int | None = None,
    checkpoint_label: str = "",
    workers: int = 1,
) -> DistillCorpus:
    """Decode every source with the widest model and keep the pairs that
    satisfy the ratio/length caps, in source order."""
    sources = list(sources)
    if beam == 1:
        # chunk by ascending length so a chunk's rows finish together;
        # results are restored to source order
        order = sorted(range(len(sources)), key=lambda i: (len(sources[i]), i))
        chunk = 256
        chunks = [order[i : i + chunk] for i in range(0, len(order), chunk)]
        decode_chunk = lambda idxs: greedy_decode_batch(
            widest, [sources[i] for i in idxs], max_len)
        if workers > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                decoded_chunks = list(ex.map(decode_chunk, chunks))
        else:
            decoded_chunks = [decode_chunk(c) for c in chunks]
        decoded = [None] * len(sources)
        for idxs, outs in zip(chunks, decoded_chunks):
            for i, out in zip(idxs, outs):
                decoded[i] = out
    else:
        decode_one = lambda s: beam_search(widest, s, beam, alpha, max_len)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                decoded = list(ex.map(decode_one, sources))
        else:
            decoded = [decode_one(s) for s in sources]

    prov = Provenance(checkpoint_label, beam, alpha, ratio_cap, len_cap)
    pairs = [
        (list(s), list(t))
        for s, t in zip(sources, decoded)
        if passes_length_filter(len(s), len(t), ratio_cap, len_cap)
    ]
    if not pairs:
        raise ValueError("distillation corpus is empty after filtering")
    return DistillCorpus(pairs, prov)


def write_distill_corpus(corpus: DistillCorpus, vocab: Vocab, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    p = corpus.provenance
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# distill-corpus v1\n")
        fh.write(
            f"# checkpoint={p.checkpoint} beam={p.beam} alpha={p.alpha} "
            f"ratio_cap={p.ratio_cap} len_cap={p.len_cap}\n"
        )
        for src, tgt in corpus.pairs:
            fh.write(" ".join(vocab.decode(src)) + "\t" + " ".join(vocab.decode(tgt)) + "\n")


def read_distill_corpus(path, vocab: Vocab) -> DistillCorpus:
    prov = Provenance()
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("# checkpoint="):
                fields = dict(kv.split("=", 1) for kv in line[2:].split())
                prov = Provenance(
                    checkpoint=fields.get("checkpoint", ""),
                    beam=int(fields.get("beam", 4)),
                    alpha=float(fields.get("alpha", 0.6)),
                    ratio_cap=float(fields.get("ratio_cap", 20.0)),
                    len_cap=float(fields.get("len_cap", 250)),
                )
                continue
            if not line or line.startswith("#"):
                continue
            src, _, tgt = line.partition("\t")
            pairs.append((vocab.encode(src.split()), vocab.encode(tgt.split())))
    return DistillCorpus(pairs, prov)
