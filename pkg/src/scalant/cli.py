"""Command-line pipeline: data prep, staged training, distillation-target
generation, evaluation, random sub-model search, cost reporting, and
checkpoint averaging.

Stage ordering is enforced through artifact presence: each stage loads
the previous stage's final checkpoint, stage 3 additionally needs the
generated distillation corpus. Every command is deterministic given the
same config and seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_run_config
from .data import (
    Vocab,
    build_vocab,
    encode_pairs,
    make_batches,
    read_corpus,
    synth_task,
    write_corpus,
)
from .decoding import generate_distill_corpus, greedy_decode_batch, read_distill_corpus, write_distill_corpus
from .evaluation import (
    bleu,
    cost_report,
    count_params,
    estimate_flops,
    format_mean_std,
    random_search_type2,
    token_accuracy,
    write_search_report,
)
from .model import ParameterStore, WidthSpec, materialize, type1_spec, widest_spec
from .training import average_checkpoints, train_stage

PROG = "scalant"


class CliError(Exception):
    pass


def max_workers() -> int:
    """Worker cap for parallel fan-out, from SCALANT_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("SCALANT_THREADS", "1")))
    except ValueError:
        return 1


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise CliError(f"missing {what}: {path} (run the producing step first)")
    return Path(path)


def _load_vocab(cfg: RunConfig) -> Vocab:
    vocab = Vocab.load(_require(Path(cfg.data.vocab_path), "vocabulary file"))
    if len(vocab) != cfg.model.vocab_size:
        raise CliError(
            f"vocabulary size {len(vocab)} does not match model.vocab_size "
            f"{cfg.model.vocab_size}"
        )
    return vocab


def _load_batches(cfg: RunConfig, path, vocab: Vocab, seed: int, limit=None):
    pairs = read_corpus(_require(Path(path), "corpus file"))
    if limit is not None:
        pairs = pairs[:limit]
    if not pairs:
        raise CliError(f"corpus file {path} is empty")
    return make_batches(encode_pairs(pairs, vocab), cfg.data.token_budget, seed)


def _write_run_info(cfg: RunConfig, out_dir: Path, extra: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    info = {"seed": cfg.seed, "output_dir": cfg.output_dir, **extra}
    (out_dir / "run_info.json").write_text(json.dumps(info, indent=2, sort_keys=True))


def cmd_prep(cfg: RunConfig) -> int:
    """Generate the synthetic corpus and vocabulary files named in config."""
    task = cfg.data.task
    if task is None:
        raise CliError("config has no data.task section; nothing to prepare")
    train = synth_task(task.kind, task.n_pairs, cfg.model.vocab_size,
                       (task.len_lo, task.len_hi), seed=cfg.seed)
    val = synth_task(task.kind, task.val_pairs, cfg.model.vocab_size,
                     (task.len_lo, task.len_hi), seed=cfg.seed + 9999)
    vocab = build_vocab(train, max_size=cfg.model.vocab_size)
    if len(vocab) != cfg.model.vocab_size:
        raise CliError(
            f"task produced a vocabulary of {len(vocab)} != model.vocab_size "
            f"{cfg.model.vocab_size}; widen len range or n_pairs"
        )
    write_corpus(train, cfg.data.train_path)
    write_corpus(val, cfg.data.val_path)
    vocab.save(cfg.data.vocab_path)
    print(f"wrote {len(train)} train pairs, {len(val)} val pairs, "
          f"vocab {len(vocab)} -> {cfg.data.vocab_path}")
    return 0


def _init_store(cfg: RunConfig, stage: int) -> ParameterStore:
    if stage == 1:
        return ParameterStore.initialize(cfg.model, np.random.default_rng(cfg.seed))
    prev = cfg.out_path(f"stage{stage - 1}", "final.ckpt")
    _require(prev, f"stage-{stage - 1} checkpoint (prerequisite of stage {stage})")
    store = load_checkpoint(prev)
    if store.config != cfg.model:
        raise CliError(f"checkpoint {prev} was trained with a different model config")
    return store


def cmd_train(cfg: RunConfig, stage: int) -> int:
    stage_cfg = cfg.stage(stage)
    vocab = _load_vocab(cfg)
    store = _init_store(cfg, stage)
    if stage == 3:
        corpus_path = cfg.decoding.corpus_path or cfg.out_path("distill_corpus.tsv")
        _require(Path(corpus_path),
                 "distillation corpus (prerequisite of stage 3; run generate-targets)")
        corpus = read_distill_corpus(corpus_path, vocab)
        batches = make_batches(corpus.pairs, cfg.data.token_budget, stage_cfg.seed)
    else:
        batches = _load_batches(cfg, cfg.data.train_path, vocab, stage_cfg.seed)
    val_batches = _load_batches(cfg, cfg.data.val_path, vocab, seed=0,
                                limit=cfg.data.val_max_pairs)
    out_dir = cfg.out_path(f"stage{stage}")
    _write_run_info(cfg, out_dir, {"stage": stage, "stage_seed": stage_cfg.seed})
    result = train_stage(store, stage_cfg, batches, val_batches, out_dir=out_dir)
    last_train = [m for m in result.metrics if m["event"] == "train"][-1]
    print(f"stage {stage}: {result.steps} steps, final epoch loss "
          f"{last_train['loss']:.4f}; artifacts in {out_dir}")
    return 0


def cmd_generate_targets(cfg: RunConfig, checkpoint=None, beam=None, alpha=None) -> int:
    vocab = _load_vocab(cfg)
    ckpt = Path(checkpoint) if checkpoint else (
        Path(cfg.decoding.source_checkpoint) if cfg.decoding.source_checkpoint
        else cfg.out_path("stage2", "final.ckpt")
    )
    _require(ckpt, "checkpoint to decode with (prerequisite of generate-targets)")
    store = load_checkpoint(ckpt)
    widest = materialize(store, widest_spec(store.config))
    pairs = read_corpus(_require(Path(cfg.data.train_path), "training corpus"))
    sources = [vocab.encode(src) for src, _ in pairs]
    if cfg.decoding.max_sources is not None:
        sources = sources[: cfg.decoding.max_sources]
    corpus = generate_distill_corpus(
        widest,
        sources,
        beam=beam if beam is not None else cfg.decoding.beam,
        alpha=alpha if alpha is not None else cfg.decoding.alpha,
        ratio_cap=cfg.decoding.ratio_cap,
        len_cap=cfg.decoding.len_cap,
        max_len=store.config.max_seq_len - 1,
        checkpoint_label=str(ckpt),
        workers=max_workers(),
    )
    out = Path(cfg.decoding.corpus_path or cfg.out_path("distill_corpus.tsv"))
    write_distill_corpus(corpus, vocab, out)
    print(f"decoded {len(sources)} sources, kept {len(corpus)} pairs -> {out}")
    return 0


def _resolve_eval_checkpoint(cfg: RunConfig, checkpoint=None) -> Path:
    if checkpoint:
        return _require(Path(checkpoint), "checkpoint")
    for stage in (3, 2, 1):
        candidate = cfg.out_path(f"stage{stage}", "final.ckpt")
        if candidate.exists():
            return candidate
    raise CliError(f"no trained checkpoint found under {cfg.output_dir}; "
                   "train a stage first or pass --checkpoint")


def cmd_eval(cfg: RunConfig, spec_text=None, all_widths=False, checkpoint=None,
             with_bleu=False, beam=None) -> int:
    vocab = _load_vocab(cfg)
    store = load_checkpoint(_resolve_eval_checkpoint(cfg, checkpoint))
    val_pairs = read_corpus(_require(Path(cfg.data.val_path), "validation corpus"))
    if cfg.data.val_max_pairs is not None:
        val_pairs = val_pairs[: cfg.data.val_max_pairs]
    ids = encode_pairs(val_pairs, vocab)
    batches = make_batches(ids, cfg.data.token_budget, seed=0)

    if all_widths or spec_text is None:
        specs = [type1_spec(store.config, w) for w in store.config.width_menu]
    else:
        specs = [WidthSpec.parse(spec_text, store.config)]

    rows = []
    for spec in specs:
        sub = materialize(store, spec)
        acc = token_accuracy(sub, batches)
        row = {
            "spec": spec.format(),
            "accuracy": acc,
            "params": count_params(store.config, spec),
            "flops": estimate_flops(store.config, spec),
        }
        if with_bleu:
            b = beam if beam is not None else cfg.decoding.beam
            hyps = []
            if b == 1:
                hyps = greedy_decode_batch(sub, [s for s, _ in ids])
            else:
                from .decoding import beam_search

                hyps = [beam_search(sub, s, b, cfg.decoding.alpha) for s, _ in ids]
            row["bleu"] = bleu(hyps, [t for _, t in ids])
        rows.append(row)

    out = cfg.out_path("eval_report.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    header = "spec        accuracy" + ("      bleu" if with_bleu else "")
    print(header)
    for row in rows:
        line = f"{row['spec']:<12}{row['accuracy']:.4f}"
        if with_bleu:
            line += f"    {row['bleu']:.4f}"
        print(line)
    return 0


def cmd_search(cfg: RunConfig, menu=None, n_samples=200, top_k=10,
               checkpoint=None) -> int:
    vocab = _load_vocab(cfg)
    store = load_checkpoint(_resolve_eval_checkpoint(cfg, checkpoint))
    subset = tuple(int(w) for w in menu) if menu else store.config.width_menu[-3:]
    val_pairs = read_corpus(_require(Path(cfg.data.val_path), "validation corpus"))
    if cfg.data.val_max_pairs is not None:
        val_pairs = val_pairs[: cfg.data.val_max_pairs]
    batches = make_batches(encode_pairs(val_pairs, vocab), cfg.data.token_budget, seed=0)
    result = random_search_type2(store, subset, n_samples, batches, top_k=top_k,
                                 seed=cfg.seed, workers=max_workers())
    out = cfg.out_path("search_report.csv")
    write_search_report(result, out)
    best_spec, best_score = result.ranked[0]
    print(f"evaluated {len(result.ranked)} sub-models over menu {subset}")
    print(f"best: {best_spec.format()} score {best_score:.4f}")
    print(f"top-{result.top_k}: {format_mean_std(result.top_mean, result.top_std)}")
    print(f"widest: {result.widest_score:.4f} "
          f"(beaten by a sub-model: {'yes' if result.any_beats_widest else 'no'})")
    return 0


def cmd_info(cfg: RunConfig) -> list[dict]:
    """Print and persist the per-width cost table; returns the rows."""
    rows = []
    for w in cfg.model.width_menu:
        spec = type1_spec(cfg.model, w)
        rep = cost_report(cfg.model, spec)
        rows.append({
            "width": w,
            "params": rep.params,
            "params_no_proj": count_params(cfg.model, spec, include_projections=False),
            "flops": rep.flops,
        })
    out = cfg.out_path("info_report.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"{'width':>6} {'params (M)':>12} {'no-proj (M)':>12} {'FLOPs (G)':>12}")
    for row in rows:
        print(f"{row['width']:>6} {row['params'] / 1e6:>12.2f} "
              f"{row['params_no_proj'] / 1e6:>12.2f} {row['flops'] / 1e9:>12.2f}")
    return rows


def cmd_average(paths: list, out_path) -> int:
    for p in paths:
        _require(Path(p), "checkpoint")
    store = average_checkpoints(paths)
    save_checkpoint(store, out_path)
    print(f"averaged {len(paths)} checkpoints -> {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=PROG,
        description="Width-elastic seq2seq transformers with self-distillation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        return p

    with_config(sub.add_parser("prep", help="generate synthetic corpus files"))

    p = with_config(sub.add_parser("train", help="run one training stage"))
    p.add_argument("--stage", type=int, required=True, choices=(1, 2, 3))

    p = with_config(sub.add_parser("generate-targets",
                                   help="decode distillation targets offline"))
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)

    p = with_config(sub.add_parser("eval", help="evaluate a width spec"))
    p.add_argument("--spec", default=None, help='e.g. "256" or "1024:896,...,960"')
    p.add_argument("--all-widths", action="store_true")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--bleu", action="store_true")
    p.add_argument("--beam", type=int, default=None)

    p = with_config(sub.add_parser("search", help="random sub-model search"))
    p.add_argument("--menu", default=None, help='comma list, e.g. "896,960,1024"')
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--checkpoint", default=None)

    with_config(sub.add_parser("info", help="print the per-width cost table"))

    p = sub.add_parser("average", help="average checkpoints elementwise")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--out", required=True)
    return parser


def _load_cfg(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        for n, s in cfg.stages.items():
            s.seed = args.seed + n
    if args.out is not None:
        cfg.output_dir = args.out
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "average":
            return cmd_average(args.checkpoints, args.out)
        cfg = _load_cfg(args)
        if args.command == "prep":
            return cmd_prep(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.stage)
        if args.command == "generate-targets":
            return cmd_generate_targets(cfg, args.checkpoint, args.beam, args.alpha)
        if args.command == "eval":
            return cmd_eval(cfg, args.spec, args.all_widths, args.checkpoint,
                            args.bleu, args.beam)
        if args.command == "search":
            menu = args.menu.split(",") if args.menu else None
            return cmd_search(cfg, menu, args.samples, args.top_k, args.checkpoint)
        if args.command == "info":
            cmd_info(cfg)
            return 0
        raise CliError(f"unknown command {args.command}")
    except (CliError, ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
