"""Three-stage training: joint sub-model pretraining, annealed word-level
self-distillation, and sequence-level self-distillation on offline decoded
targets.

Per iteration the widest model always trains; a few sub-model widths are
drawn on top of it, their losses combined per stage, and one accumulated
optimizer step is applied to exactly the parameter slices that received
gradients.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Batch
from .model import (
    ModelConfig,
    ParameterStore,
    SubModel,
    WidthSpec,
    materialize,
    sample_submodel,
    type1_spec,
    widest_spec,
)
from .tensor import Tape, Tensor, backward, cross_entropy

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("epoch", "stage", "event", "spec", "loss", "lr", "accuracy")


@dataclass
class StageConfig:
    stage: int
    epochs: int
    max_lr: float
    warmup_iters: int = 4000
    init_lr: float = 5e-4
    n_sampled_submodels: int = 3
    sampling: str = "type1"
    lambda2_threshold: int = 1
    lambda3: float = 0.1
    label_smoothing: float = 0.1
    grad_accum_steps: int = 16
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    seed: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if not 0.0 <= self.lambda3 <= 1.0:
            raise ValueError("lambda3 must lie in [0, 1]")
        if self.warmup_iters < 1:
            raise ValueError("warmup_iters must be >= 1")
        if self.n_sampled_submodels < 0:
            raise ValueError("n_sampled_submodels must be >= 0")
        if self.grad_accum_steps < 1:
            raise ValueError("grad_accum_steps must be >= 1")
        if self.sampling not in ("type1", "type2"):
            raise ValueError(f"unknown sampling variant {self.sampling!r}")


# --- schedules --------------------------------------------------------------


def lambda2(j: int, t_j: int) -> float:
    """Distillation blend weight: 1 - 0.5 * j / t_j before the threshold,
    floored at 0.5 from the threshold iteration on."""
    if t_j <= 0:
        raise ValueError("lambda2 threshold must be positive")
    if j < t_j:
        return 1.0 - 0.5 * (j / t_j)
    return 0.5


def lr_at(j: int, max_lr: float, warmup: int, init_lr: float = 5e-4) -> float:
    """Linear ramp init_lr -> max_lr over the warmup, then inverse-sqrt
    decay max_lr * sqrt(warmup / j)."""
    if j < 1:
        raise ValueError("iteration index starts at 1")
    if j < warmup:
        return init_lr + (max_lr - init_lr) * (j / warmup)
    return max_lr * math.sqrt(warmup / j)


def one_hot(ids: np.ndarray, n_classes: int) -> np.ndarray:
    ids = np.asarray(ids)
    out = np.zeros(ids.shape + (n_classes,), dtype=np.float64)
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


def label_smooth(one_hot_rows: np.ndarray, eps: float) -> np.ndarray:
    """Spread eps of each row's mass evenly over the n-1 wrong classes."""
    rows = np.asarray(one_hot_rows, dtype=np.float64)
    n = rows.shape[-1]
    on_target = rows.sum(axis=-1)
    is_binary = ((rows == 0.0) | (rows == 1.0)).all()
    if not is_binary or not np.all(on_target == 1.0):
        raise ValueError("label_smooth expects one-hot rows")
    if eps == 0.0:
        return rows
    return rows * (1.0 - eps) + (1.0 - rows) * (eps / (n - 1))


def smoothed_targets(ids: np.ndarray, n_classes: int, eps: float) -> np.ndarray:
    return label_smooth(one_hot(ids, n_classes), eps)


# --- gradient routing and the optimizer --------------------------------------


class GradBuffer:
    """Accumulates sub-model view gradients into full-size per-parameter
    arrays, remembering which entries were touched.

    Buffers persist across iterations (call :meth:`reset` between steps)
    to avoid reallocating the full parameter footprint every step.
    """

    def __init__(self, store: ParameterStore):
        self.store = store
        self.grads: dict[str, np.ndarray] = {}
        self.masks: dict[str, np.ndarray] = {}
        self.active: set[str] = set()
        self.full: set[str] = set()

    def reset(self) -> None:
        for name in self.active:
            self.grads[name][...] = 0.0
            mask = self.masks.get(name)
            if mask is not None:
                mask[...] = False
        self.active.clear()
        self.full.clear()

    def add_raw(self, name: str, grad: np.ndarray, mask: np.ndarray | None = None) -> None:
        """Inject a full-size gradient directly (mask None means dense)."""
        full_arr = self.store.params[name]
        if name not in self.grads:
            self.grads[name] = np.zeros_like(full_arr)
        self.active.add(name)
        self.grads[name] += grad
        if mask is None:
            self.full.add(name)
        else:
            if name not in self.masks:
                self.masks[name] = np.zeros(full_arr.shape, dtype=bool)
            self.masks[name] |= mask

    def add_model(self, tape: Tape, model: SubModel) -> None:
        for p in model.parameters():
            g = tape.grads.get(id(p))
            if g is None:
                continue
            name, key = p.store_name, p.store_key
            full_arr = self.store.params[name]
            buf = self.grads.get(name)
            if buf is None:
                buf = np.zeros_like(full_arr)
                self.grads[name] = buf
            self.active.add(name)
            buf[key] += g
            if g.shape == full_arr.shape:
                self.full.add(name)
            elif name not in self.full:
                mask = self.masks.get(name)
                if mask is None:
                    mask = np.zeros(full_arr.shape, dtype=bool)
                    self.masks[name] = mask
                mask[key] = True

    def items(self):
        """Yields (name, grad, mask) with mask None when fully touched."""
        for name in self.active:
            yield name, self.grads[name], (None if name in self.full else self.masks[name])


class AdamState:
    """First/second moments at full parameter size plus a step counter."""

    def __init__(self, store: ParameterStore):
        self.m = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.params.items()}
        self._scratch = {k: np.empty_like(v) for k, v in store.params.items()}
        self.step = 0


def adam_step(
    state: AdamState,
    store: ParameterStore,
    grads: GradBuffer,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected update restricted to entries that received gradients;
    untouched parameters (and their moments) stay bit-identical."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    # fold the bias corrections into the step size and epsilon:
    # lr*(m/c1)/(sqrt(v/c2)+eps) == (lr*sqrt(c2)/c1)*m/(sqrt(v)+eps*sqrt(c2))
    lr_t = lr * math.sqrt(c2) / c1
    eps_t = eps * math.sqrt(c2)
    for name, g, mask in grads.items():
        m, v, p = state.m[name], state.v[name], store.params[name]
        if mask is None:
            s = state._scratch[name]
            m *= beta1
            np.multiply(g, 1.0 - beta1, out=s)
            m += s
            v *= beta2
            np.multiply(g, g, out=s)
            s *= 1.0 - beta2
            v += s
            np.sqrt(v, out=s)
            s += eps_t
            np.divide(m, s, out=s)
            s *= lr_t
            p -= s
        else:
            gm = g[mask]
            mm = beta1 * m[mask] + (1.0 - beta1) * gm
            vv = beta2 * v[mask] + (1.0 - beta2) * (gm * gm)
            m[mask] = mm
            v[mask] = vv
            p[mask] = p[mask] - lr * (mm / c1) / (np.sqrt(vv / c2) + eps)


# --- stage losses -------------------------------------------------------------


def _sum_losses(losses):
    total = None
    for item in losses:
        total = item if total is None else T.add(total, item)
    return total


def stage1_loss(widest_logits: Tensor, sub_logits: list, target_dist, pad_mask) -> Tensor:
    """Widest cross-entropy vs ground truth plus the same for every sampled
    sub-model."""
    if not sub_logits:
        log.warning("stage-1 iteration with no sampled sub-models (widest only)")
    ce_w = cross_entropy(widest_logits, target_dist, pad_mask)
    sub_sum = _sum_losses(
        cross_entropy(lz, target_dist, pad_mask) for lz in sub_logits
    )
    return ce_w if sub_sum is None else T.add(ce_w, sub_sum)


def _teacher_soft_targets(widest_logits: Tensor) -> np.ndarray:
    # Detached per-position distributions; no gradient reaches the teacher.
    return np.exp(T.log_softmax_np(widest_logits.data))


def stage2_loss(widest_logits: Tensor, sub_logits: list, target_dist, pad_mask,
                lam2: float) -> Tensor:
    """Ground-truth terms as in stage 1 (sub terms weighted by lam2) plus
    (1 - lam2) times cross-entropy against the widest model's detached
    soft predictions."""
    ce_w = cross_entropy(widest_logits, target_dist, pad_mask)
    total = ce_w
    hard_sum = _sum_losses(
        cross_entropy(lz, target_dist, pad_mask) for lz in sub_logits
    )
    if hard_sum is not None and lam2 != 0.0:
        total = T.add(total, hard_sum if lam2 == 1.0 else T.scale(hard_sum, lam2))
    if sub_logits and lam2 != 1.0:
        teacher = _teacher_soft_targets(widest_logits)
        soft_sum = _sum_losses(
            cross_entropy(lz, teacher, pad_mask) for lz in sub_logits
        )
        total = T.add(total, T.scale(soft_sum, 1.0 - lam2))
    return total


def stage3_loss(widest_logits: Tensor, sub_logits: list, beam_target_dist,
                pad_mask, lam3: float) -> Tensor:
    """Widest trains on offline decoded targets alone; sub-models blend the
    offline targets (weight lam3) with the widest model's online soft
    predictions (weight 1 - lam3)."""
    ce_w = cross_entropy(widest_logits, beam_target_dist, pad_mask)
    total = ce_w
    if sub_logits and lam3 != 0.0:
        hard_sum = _sum_losses(
            cross_entropy(lz, beam_target_dist, pad_mask) for lz in sub_logits
        )
        total = T.add(total, hard_sum if lam3 == 1.0 else T.scale(hard_sum, lam3))
    if sub_logits and lam3 != 1.0:
        teacher = _teacher_soft_targets(widest_logits)
        soft_sum = _sum_losses(
            cross_entropy(lz, teacher, pad_mask) for lz in sub_logits
        )
        total = T.add(total, T.scale(soft_sum, 1.0 - lam3))
    return total


# --- the stage loop -----------------------------------------------------------


def sample_iteration_specs(config: ModelConfig, stage_cfg: StageConfig,
                           rng: np.random.Generator) -> list[WidthSpec]:
    """Distinct sub-model draws for one iteration, never the widest (it is
    always trained anyway)."""
    widest = widest_spec(config)
    if stage_cfg.sampling == "type1":
        space = len(config.width_menu) - 1
    else:
        space = len(config.width_menu) ** config.n_layers - 1
    want = min(stage_cfg.n_sampled_submodels, space)
    chosen: list[WidthSpec] = []
    seen = set()
    while len(chosen) < want:
        spec = sample_submodel(config, stage_cfg.sampling, rng)
        if spec == widest or spec in seen:
            continue
        seen.add(spec)
        chosen.append(spec)
    return chosen


@dataclass
class TrainResult:
    metrics: list[dict] = field(default_factory=list)
    checkpoint_paths: list[Path] = field(default_factory=list)
    steps: int = 0


def _micro_loss(stage_cfg: StageConfig, widest: SubModel, subs: list[SubModel],
                batch: Batch, lam2: float, rng: np.random.Generator) -> Tensor:
    n_vocab = widest.config.vocab_size
    targets = smoothed_targets(batch.tgt_out, n_vocab, stage_cfg.label_smoothing)
    w_logits = widest.forward(batch.src, batch.tgt_in, batch.src_mask,
                              train=True, rng=rng)
    sub_logits = [
        s.forward(batch.src, batch.tgt_in, batch.src_mask, train=True, rng=rng)
        for s in subs
    ]
    if stage_cfg.stage == 1:
        return stage1_loss(w_logits, sub_logits, targets, batch.tgt_mask)
    if stage_cfg.stage == 2:
        return stage2_loss(w_logits, sub_logits, targets, batch.tgt_mask, lam2)
    return stage3_loss(w_logits, sub_logits, targets, batch.tgt_mask,
                       stage_cfg.lambda3)


def train_stage(
    store: ParameterStore,
    stage_cfg: StageConfig,
    batches: list[Batch],
    val_batches: list[Batch] | None = None,
    out_dir=None,
) -> TrainResult:
    """Run one stage over pre-built batches.

    Stage 3 callers must build ``batches`` from an offline distillation
    corpus; the loop itself is stage-agnostic apart from the loss. Writes
    one checkpoint per epoch (plus ``final.ckpt``) and per-epoch metrics
    when ``out_dir`` is given.
    """
    if not batches:
        raise ValueError("train_stage: no batches")
    config = store.config
    rng = np.random.default_rng(stage_cfg.seed)
    adam = AdamState(store)
    accum = stage_cfg.grad_accum_steps
    result = TrainResult()
    j = 0

    out_dir = Path(out_dir) if out_dir is not None else None
    gbuf = GradBuffer(store)
    done = False
    for epoch in range(1, stage_cfg.epochs + 1):
        if done:
            break
        order = rng.permutation(len(batches))
        losses = []
        lr = stage_cfg.init_lr
        pos = 0
        while pos < len(order):
            if stage_cfg.max_steps is not None and j >= stage_cfg.max_steps:
                done = True
                break
            window = [batches[i] for i in order[pos : pos + accum]]
            pos += len(window)
            specs = sample_iteration_specs(config, stage_cfg, rng)
            widest = materialize(store, widest_spec(config))
            subs = [materialize(store, s) for s in specs]
            lam2 = lambda2(j, stage_cfg.lambda2_threshold)
            n_window = sum(b.n_tgt_tokens for b in window)
            gbuf.reset()
            for b in window:
                with Tape() as tape:
                    loss = _micro_loss(stage_cfg, widest, subs, b, lam2, rng)
                    if len(window) > 1:
                        # Token-weighted so the accumulated step equals the
                        # fused-batch step up to float rounding.
                        scaled = T.scale(loss, b.n_tgt_tokens / n_window)
                    else:
                        scaled = loss
                    backward(tape, scaled)
                gbuf.add_model(tape, widest)
                for s in subs:
                    gbuf.add_model(tape, s)
                losses.append(loss.item())
            j += 1
            lr = lr_at(j, stage_cfg.max_lr, stage_cfg.warmup_iters, stage_cfg.init_lr)
            adam_step(adam, store, gbuf, lr, stage_cfg.adam_beta1,
                      stage_cfg.adam_beta2, stage_cfg.adam_eps)
        result.steps = j

        result.metrics.append({
            "epoch": epoch, "stage": stage_cfg.stage, "event": "train",
            "spec": "", "loss": float(np.mean(losses)), "lr": lr, "accuracy": "",
        })
        if val_batches:
            from .evaluation import token_accuracy

            for width in config.width_menu:
                sub = materialize(store, type1_spec(config, width))
                acc = token_accuracy(sub, val_batches)
                result.metrics.append({
                    "epoch": epoch, "stage": stage_cfg.stage, "event": "val",
                    "spec": str(width), "loss": "", "lr": "", "accuracy": acc,
                })
        if out_dir is not None:
            path = out_dir / f"checkpoint_ep{epoch:03d}.ckpt"
            save_checkpoint(store, path)
            result.checkpoint_paths.append(path)

    if out_dir is not None:
        save_checkpoint(store, out_dir / "final.ckpt")
        write_metrics(result.metrics, out_dir / "metrics.csv")
    return result


def write_metrics(records: list[dict], path) -> None:
    """Line-delimited CSV: epoch, stage, event, spec, loss, lr, accuracy."""
    import csv

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
        for rec in records:
            writer.writerow({k: rec.get(k, "") for k in METRICS_COLUMNS})


def average_checkpoints(paths: list) -> ParameterStore:
    """Elementwise mean of checkpoints with identical configs."""
    if not paths:
        raise ValueError("average_checkpoints: need at least one checkpoint")
    stores = [load_checkpoint(p) for p in paths]
    ref = stores[0]
    for s in stores[1:]:
        if s.config.to_dict() != ref.config.to_dict():
            raise ValueError("average_checkpoints: configs differ")
    params = {}
    for name, arr in ref.params.items():
        acc = arr.copy()
        for s in stores[1:]:
            acc += s.params[name]
        params[name] = acc / len(stores)
    return ParameterStore(ref.config, params)
