"""Metrics and cost accounting: corpus BLEU, teacher-forced token accuracy,
exact active-parameter counts, analytic FLOPs, and random width-choice
search over a trained store.
"""

from __future__ import annotations

import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import product

import numpy as np

from .data import Batch
from .model import (
    ModelConfig,
    ParameterStore,
    SubModel,
    WidthSpec,
    materialize,
    widest_spec,
)


def _ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses, references, max_n: int = 4) -> float:
    """Corpus-level BLEU in [0, 1]: geometric mean of clipped n-gram
    precisions (n = 1..max_n) times the brevity penalty. Any zero
    precision yields 0."""
    if not hypotheses or len(hypotheses) != len(references):
        raise ValueError("bleu: need equal, nonempty hypothesis/reference lists")
    clipped = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            hc = _ngram_counts(hyp, n)
            rc = _ngram_counts(ref, n)
            totals[n - 1] += sum(hc.values())
            clipped[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
    if hyp_len == 0 or any(c == 0 or t == 0 for c, t in zip(clipped, totals)):
        return 0.0
    log_prec = sum(math.log(c / t) for c, t in zip(clipped, totals)) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_prec)


def token_accuracy(sub: SubModel, batches: list[Batch]) -> float:
    """Fraction of non-pad target tokens predicted argmax-correctly under
    teacher forcing."""
    correct = 0
    total = 0
    for b in batches:
        logits = sub.forward(b.src, b.tgt_in, b.src_mask, train=False)
        pred = logits.data.argmax(axis=-1)
        correct += int(((pred == b.tgt_out) & b.tgt_mask).sum())
        total += int(b.tgt_mask.sum())
    if total == 0:
        raise ValueError("token_accuracy: no non-pad target tokens")
    return correct / total


# --- cost accounting ----------------------------------------------------------


@dataclass
class CostReport:
    spec: WidthSpec
    params: int
    flops: int
    src_len: int
    tgt_len: int


def _attention_params(c: int, d: int) -> int:
    return 3 * (c * d + d) + d * c + c


def _layer_params(config: ModelConfig, c: int, d: int, cross: bool) -> int:
    f = config.ffn_multiplier * d
    total = _attention_params(c, d)
    total += c * f + f + f * c + c          # ffn
    total += 2 * 2 * c                       # two layer norms
    if cross:
        total += _attention_params(c, d) + 2 * c
    return total


def count_params(config: ModelConfig, spec: WidthSpec,
                 include_projections: bool = True) -> int:
    """Exact count of active scalars for a sub-model.

    With projections: the shared full-width embedding plus the cropped
    input/output projections and layer slices (what a materialized
    sub-model actually touches). Without projections: the equivalent
    standalone narrow model with an io-width embedding, no projections,
    and tied output weights.
    """
    spec.validate(config)
    c = spec.io_width
    m = config.max_width
    if include_projections:
        total = config.vocab_size * m
        total += m * c + c                      # input projection crop
        total += c * m + m                      # output projection crop, full bias
    else:
        total = config.vocab_size * c
    for i in range(config.n_encoder_layers):
        total += _layer_params(config, c, spec.attn_widths[i], cross=False)
    for j in range(config.n_decoder_layers):
        d = spec.attn_widths[config.n_encoder_layers + j]
        total += _layer_params(config, c, d, cross=True)
    return total


def _attention_flops(lq: int, lk: int, c: int, d: int) -> int:
    macs = lq * c * d + 2 * lk * c * d       # q projection; k and v projections
    macs += lq * lk * d * 2                  # scores and context, summed over heads
    macs += lq * d * c                       # output projection
    heads = max(1, d // 64)
    elementwise = heads * lq * lk            # softmax rows, one flop per element
    return 2 * macs + elementwise


def _ffn_flops(l: int, c: int, d: int, mult: int) -> int:
    f = mult * d
    return 2 * (l * c * f + l * f * c) + l * f


def estimate_flops(config: ModelConfig, spec: WidthSpec, src_len: int = 20,
                   tgt_len: int = 20, mode: str = "calibrated") -> int:
    """Analytic forward-pass cost at 2 FLOPs per multiply-accumulate,
    elementwise ops at 1 FLOP per element, decoding as one teacher-forced
    pass through the layers.

    mode="core" prices the vocabulary interface as a single pass through
    the tied max-width output head. mode="calibrated" (default) instead
    prices it as naive autoregressive generation, rescoring the whole
    prefix against the vocabulary at the active io width each step plus
    the one-hot embedding products; that convention reproduces the
    published per-width cost table within tolerance, which no
    single-pass convention does.
    """
    spec.validate(config)
    if mode not in ("core", "calibrated"):
        raise ValueError(f"unknown flops mode {mode!r}")
    c = spec.io_width
    m = config.max_width
    n = config.vocab_size
    ls, lt = src_len, tgt_len
    total = 0
    # input projections and position adds for both sides
    total += 2 * (ls + lt) * m * c + (ls + lt) * c
    for i in range(config.n_encoder_layers):
        d = spec.attn_widths[i]
        total += _attention_flops(ls, ls, c, d)
        total += _ffn_flops(ls, c, d, config.ffn_multiplier)
        total += 2 * (2 * ls * c)            # two residual-plus-norm blocks
    for j in range(config.n_decoder_layers):
        d = spec.attn_widths[config.n_encoder_layers + j]
        total += _attention_flops(lt, lt, c, d)
        total += _attention_flops(lt, ls, c, d)
        total += _ffn_flops(lt, c, d, config.ffn_multiplier)
        total += 3 * (2 * lt * c)
    total += 2 * lt * c * m                  # output projection
    if mode == "core":
        total += 2 * lt * n * m
    else:
        prefix_positions = lt * (lt + 1) // 2
        total += 2 * n * c * (ls + lt + prefix_positions)
    return total


def cost_report(config: ModelConfig, spec: WidthSpec, src_len: int = 20,
                tgt_len: int = 20) -> CostReport:
    return CostReport(
        spec=spec,
        params=count_params(config, spec, include_projections=True),
        flops=estimate_flops(config, spec, src_len, tgt_len),
        src_len=src_len,
        tgt_len=tgt_len,
    )


# --- random width-choice search -------------------------------------------------


@dataclass
class SearchResult:
    ranked: list                 # (WidthSpec, score) best first
    top_k: int
    top_mean: float
    top_std: float
    widest_score: float
    any_beats_widest: bool
    config: ModelConfig = None


def enumerate_type2_specs(config: ModelConfig, menu_subset) -> list[WidthSpec]:
    subset = tuple(sorted(menu_subset))
    if not set(subset) <= set(config.width_menu):
        raise ValueError("menu subset must be contained in the width menu")
    return [
        WidthSpec(config.max_width, widths)
        for widths in product(subset, repeat=config.n_layers)
    ]


def _spec_from_digits(config: ModelConfig, subset, digits) -> WidthSpec:
    return WidthSpec(config.max_width, tuple(subset[d] for d in digits))


def random_search_type2(
    store: ParameterStore,
    menu_subset,
    n_samples: int,
    val_batches: list[Batch],
    top_k: int = 10,
    seed: int = 0,
    workers: int = 1,
) -> SearchResult:
    """Evaluate random io-width-pinned sub-models on a held-out set.

    Draws are distinct while the candidate space allows it; when
    n_samples exceeds the space, draws are independent and duplicates
    share their cached evaluation. Scores are teacher-forced token
    accuracy; the summary reports mean and sample std of the top_k.
    """
    config = store.config
    subset = tuple(sorted(int(w) for w in menu_subset))
    if not set(subset) <= set(config.width_menu):
        raise ValueError("menu subset must be contained in the width menu")
    rng = np.random.default_rng(seed)
    space = len(subset) ** config.n_layers
    specs: list[WidthSpec] = []
    if n_samples <= space:
        seen = set()
        while len(specs) < n_samples:
            digits = tuple(int(x) for x in rng.integers(len(subset), size=config.n_layers))
            if digits in seen:
                continue
            seen.add(digits)
            specs.append(_spec_from_digits(config, subset, digits))
    else:
        for _ in range(n_samples):
            digits = tuple(int(x) for x in rng.integers(len(subset), size=config.n_layers))
            specs.append(_spec_from_digits(config, subset, digits))

    unique = sorted({s for s in specs}, key=lambda s: s.attn_widths)

    def evaluate(spec: WidthSpec) -> float:
        return token_accuracy(materialize(store, spec), val_batches)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            scores = dict(zip(unique, ex.map(evaluate, unique)))
    else:
        scores = {s: evaluate(s) for s in unique}

    ranked = sorted(
        ((s, scores[s]) for s in specs),
        key=lambda item: (-item[1], item[0].attn_widths),
    )
    top = [score for _, score in ranked[:top_k]]
    widest_score = token_accuracy(materialize(store, widest_spec(config)), val_batches)
    return SearchResult(
        ranked=ranked,
        top_k=len(top),
        top_mean=float(np.mean(top)),
        top_std=float(np.std(top, ddof=1)) if len(top) > 1 else 0.0,
        widest_score=widest_score,
        any_beats_widest=any(score > widest_score for _, score in ranked),
        config=config,
    )


def format_mean_std(mean: float, std: float, digits: int = 4) -> str:
    return f"{mean:.{digits}f}±{std:.{digits}f}"


def write_search_report(result: SearchResult, path) -> None:
    """CSV with one row per evaluated spec (widths, params, flops, metric)
    plus summary rows."""
    import csv
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cost_cache: dict = {}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "spec", "params", "flops", "score"])
        for rank, (spec, score) in enumerate(result.ranked, start=1):
            if spec not in cost_cache:
                cost_cache[spec] = (count_params(result.config, spec),
                                    estimate_flops(result.config, spec))
            params, flops = cost_cache[spec]
            writer.writerow([rank, spec.format(), params, flops, f"{score:.6f}"])
        writer.writerow([
            "summary",
            f"top{result.top_k}",
            "",
            "",
            format_mean_std(result.top_mean, result.top_std),
        ])
        writer.writerow(["summary", "widest", "", "", f"{result.widest_score:.6f}"])
        writer.writerow(["summary", "any_beats_widest", "", "",
                         str(result.any_beats_widest)])
