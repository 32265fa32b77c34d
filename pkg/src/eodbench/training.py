"""Mini-batch training with crop/extend augmentation, early stopping and fine-tuning."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .dataset import Record
from .kernel import (
    KernelRng, ParamStore, adam_step, clip_grad_norm, fingerprint, load_checkpoint, save_checkpoint,
)
from .models import ContextWindow, ModelConfig, Normalizer, build_model, BaseModel

log = logging.getLogger(__name__)

DTYPES = {"float64": torch.float64, "float32": torch.float32}


class RecordTooShort(ValueError):
    pass


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-4
    patience_epochs: int = 500
    crop_extend_range: tuple[float, float] = (0.55, 1.55)
    context_offset_range: tuple[float, float] = (0.0, 90.0)
    max_epochs: int = 100
    seed: int = 0
    # "cutoff": extended targets are padded with the cutoff voltage; "mask": excluded from the loss
    loss_padding_mode: str = "cutoff"
    v_cutoff: float = 3.0
    max_steps: int | None = None
    max_seconds: float | None = None
    grad_clip: float | None = None
    dtype: str = "float64"
    # batches are drawn from pools of this many batches sorted by length
    length_pool: int = 8
    # "constant" or "cosine" (decays to lr_min over max_steps, else over max_epochs)
    lr_schedule: str = "constant"
    lr_min: float = 0.0
    # linear ramp from lr/warmup_steps to lr over the first steps
    warmup_steps: int = 0
    # stop as soon as the validation loss falls to this value
    target_loss: float | None = None

    def __post_init__(self):
        self.crop_extend_range = tuple(self.crop_extend_range)
        self.context_offset_range = tuple(self.context_offset_range)
        lo, hi = self.crop_extend_range
        if not 0 < lo <= hi <= 2:
            raise ValueError(f"crop_extend_range must lie within (0, 2], got {self.crop_extend_range}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_padding_mode not in ("cutoff", "mask"):
            raise ValueError(f"unknown loss_padding_mode {self.loss_padding_mode!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")


@dataclass
class Example:
    ctx: ContextWindow
    inputs: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    record_id: str = ""
    factor: float = 1.0
    offset: float = 0.0


def make_example(record: Record, rng: np.random.Generator | None, model_cfg: ModelConfig,
                 cfg: TrainConfig, factor: float | None = None, offset: float | None = None) -> Example:
    """Augmented training pair. ``factor``/``offset`` override the random draws."""
    period = record.sampling_period
    L = len(record)
    if factor is None:
        factor = float(rng.uniform(*cfg.crop_extend_range))
    if offset is None:
        offset = float(rng.uniform(*cfg.context_offset_range))
    o = int(round(offset / period))
    C = model_cfg.context_len
    if L < o + C:
        raise RecordTooShort(f"{record.id}: {L} samples, context needs {o + C}")
    cur = record.current_samples()
    ctx = ContextWindow.from_record(record.voltage, cur, period, C, o)
    n = max(1, math.floor(factor * L + 1e-9))
    if n <= L:
        inputs, target, mask = cur[:n], record.voltage[:n], np.ones(n, dtype=bool)
    else:
        extra = n - L
        inputs = np.concatenate([cur, np.full(extra, cur[-1])])
        target = np.concatenate([record.voltage, np.full(extra, cfg.v_cutoff)])
        pad_ok = cfg.loss_padding_mode == "cutoff" and record.eod_reached(cfg.v_cutoff)
        mask = np.concatenate([np.ones(L, dtype=bool), np.full(extra, pad_ok)])
    return Example(ctx, inputs, target, mask, record.id, factor, o * period)


def mse_loss(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    m = mask.to(pred.dtype)
    count = m.sum()
    if count == 0:
        raise ValueError("loss mask selects no positions")
    return (m * (pred - target) ** 2).sum() / count


def batch_loss(model: BaseModel, examples: list[Example], mode: str, rng: KernelRng | None):
    ctx = np.stack([e.ctx.data for e in examples])
    pred, valid = model.predict_normalized(ctx, [e.inputs for e in examples], mode=mode, rng=rng)
    Lp = pred.shape[1]
    tgt = np.zeros((len(examples), Lp))
    msk = np.zeros((len(examples), Lp), dtype=bool)
    for b, e in enumerate(examples):
        tgt[b, : len(e.target)] = model.norm.v(e.target)
        msk[b, : len(e.mask)] = e.mask
    return mse_loss(pred, torch.as_tensor(tgt, dtype=pred.dtype), torch.as_tensor(msk) & valid)


@dataclass
class CheckpointBundle:
    kind: str
    model_cfg: ModelConfig
    norm: Normalizer
    store: ParamStore
    rng: KernelRng
    train_cfg: TrainConfig | None = None
    extra: dict = field(default_factory=dict)

    def model(self) -> BaseModel:
        return build_model(self.kind, self.model_cfg, norm=self.norm, store=self.store)

    def config(self) -> dict:
        return {
            "kind": self.kind,
            "model": asdict(self.model_cfg),
            "norm": asdict(self.norm),
            "train": asdict(self.train_cfg) if self.train_cfg is not None else None,
        }

    def save(self, path) -> Path:
        return save_checkpoint(path, self.store, self.rng, self.config(), self.extra)

    @classmethod
    def load(cls, path) -> "CheckpointBundle":
        store, rng, config, extra = load_checkpoint(path)
        train = config.get("train")
        return cls(
            kind=config["kind"], model_cfg=ModelConfig(**config["model"]),
            norm=Normalizer(**config["norm"]), store=store, rng=rng,
            train_cfg=TrainConfig(**train) if train else None, extra=extra,
        )

    def clone(self) -> "CheckpointBundle":
        return replace(self, store=self.store.clone(), rng=KernelRng(self.rng.seed, self.rng.counter),
                       extra=dict(self.extra))


@dataclass
class TrainingRunRecord:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    steps: int = 0
    wall_time: float = 0.0
    fingerprint: str = ""
    seed: int = 0
    stop_reason: str = ""

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")


def _batches(examples: list[Example], rng: np.random.Generator, batch_size: int, pool: int):
    """Shuffle, then sort within pools by input length to limit padding."""
    order = rng.permutation(len(examples))
    batches = []
    span = batch_size * max(pool, 1)
    for k in range(0, len(order), span):
        chunk = sorted(order[k:k + span], key=lambda j: len(examples[j].inputs))
        batches.extend(chunk[b:b + batch_size] for b in range(0, len(chunk), batch_size))
    return [batches[j] for j in rng.permutation(len(batches))]


def _examples(records, rng, model_cfg, cfg, fixed=False):
    out = []
    for r in records:
        try:
            if fixed:
                out.append(make_example(r, None, model_cfg, cfg, factor=1.0, offset=0.0))
            else:
                out.append(make_example(r, rng, model_cfg, cfg))
        except RecordTooShort as e:
            log.warning("skipping: %s", e)
    return out


def _lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if cfg.lr_schedule == "constant" or total <= cfg.warmup_steps:
        return cfg.lr
    frac = min((step - cfg.warmup_steps) / (total - cfg.warmup_steps), 1.0)
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1 + math.cos(math.pi * frac))


def evaluate_loss(model: BaseModel, examples: list[Example], batch_size: int = 64) -> float:
    total, count = 0.0, 0
    with torch.no_grad():
        for k in range(0, len(examples), batch_size):
            part = examples[k:k + batch_size]
            n = sum(int(e.mask.sum()) for e in part)
            total += float(batch_loss(model, part, "eval", None)) * n
            count += n
    return total / max(count, 1)


def train(kind: str, train_records: list[Record], val_records: list[Record], model_cfg: ModelConfig,
          cfg: TrainConfig, norm: Normalizer | None = None, init: CheckpointBundle | None = None,
          fixed_examples: bool = False, callback=None) -> tuple[CheckpointBundle, TrainingRunRecord]:
    """Adam on MSE with per-epoch validation; returns the best-validation checkpoint.

    ``fixed_examples`` disables augmentation (factor 1, offset 0) for overfit checks.
    ``init`` continues from an existing checkpoint (its normalizer is kept).
    """
    if not train_records:
        raise ValueError("no training records")
    t_start = time.perf_counter()
    dtype = DTYPES[cfg.dtype]
    if init is not None:
        norm = init.norm
        store = ParamStore(init.store.dtype)
        for k, t in init.store.items():
            store.add(k, t.detach())
        model = build_model(kind, model_cfg, norm=norm, store=store)
    else:
        norm = norm or Normalizer.fit(train_records)
        model = build_model(kind, model_cfg, norm=norm, seed=cfg.seed, dtype=dtype)
    if kind == "fnn":
        # fixed context start for the pointwise baseline
        cfg = replace(cfg, crop_extend_range=(1.0, 1.0), context_offset_range=(90.0, 90.0))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    kernel_rng = KernelRng(cfg.seed, 0)
    val_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    val_examples = _examples(val_records or train_records, val_rng, model_cfg, cfg, fixed=fixed_examples)
    fixed = _examples(train_records, None, model_cfg, cfg, fixed=True) if fixed_examples else None

    run = TrainingRunRecord(seed=cfg.seed, fingerprint=fingerprint(
        {"kind": kind, "model": asdict(model_cfg), "train": asdict(cfg), "n_train": len(train_records)}))
    best_store = model.store.clone()
    best_val = evaluate_loss(model, val_examples) if val_examples else math.inf
    run.best_val_loss, run.best_epoch = best_val, 0
    since_best = 0
    per_epoch = math.ceil(len(fixed or train_records) / cfg.batch_size)
    total_steps = cfg.max_steps if cfg.max_steps is not None else per_epoch * cfg.max_epochs
    for epoch in range(1, cfg.max_epochs + 1):
        examples = fixed if fixed is not None else _examples(train_records, rng, model_cfg, cfg)
        losses = []
        for idx in _batches(examples, rng, cfg.batch_size, cfg.length_pool):
            loss = batch_loss(model, [examples[j] for j in idx], "train", kernel_rng)
            if not torch.isfinite(loss):
                run.stop_reason = f"non-finite loss at step {run.steps}"
                log.error("training aborted: %s", run.stop_reason)
                break
            model.store.zero_grad()
            loss.backward()
            if cfg.grad_clip is not None:
                clip_grad_norm(model.store, cfg.grad_clip)
            adam_step(model.store, lr=_lr_at(cfg, run.steps, total_steps))
            run.steps += 1
            losses.append(float(loss.detach()))
            if cfg.max_steps is not None and run.steps >= cfg.max_steps:
                break
        if run.stop_reason:
            break
        run.train_loss.append(float(np.mean(losses)) if losses else math.nan)
        val = evaluate_loss(model, val_examples)
        run.val_loss.append(val)
        if val < best_val:
            best_val, since_best = val, 0
            best_store = model.store.clone()
            run.best_epoch, run.best_val_loss = epoch, val
        else:
            since_best += 1
        if callback is not None:
            callback(epoch, run)
        log.info("epoch %d train %.3e val %.3e best %.3e", epoch, run.train_loss[-1], val, best_val)
        if cfg.target_loss is not None and val <= cfg.target_loss:
            run.stop_reason = "target_loss"
            break
        if since_best >= cfg.patience_epochs:
            run.stop_reason = "patience"
            break
        if cfg.max_steps is not None and run.steps >= cfg.max_steps:
            run.stop_reason = "max_steps"
            break
        if cfg.max_seconds is not None and time.perf_counter() - t_start > cfg.max_seconds:
            run.stop_reason = "max_seconds"
            break
    else:
        run.stop_reason = run.stop_reason or "max_epochs"
    run.wall_time = time.perf_counter() - t_start
    bundle = CheckpointBundle(kind, model_cfg, norm, best_store, kernel_rng, cfg,
                              extra={"best_epoch": run.best_epoch, "best_val_loss": run.best_val_loss})
    return bundle, run


def fine_tune(bundle: CheckpointBundle, records: list[Record], held_out: list[Record] | None,
              cfg: TrainConfig) -> tuple[CheckpointBundle, TrainingRunRecord]:
    """Continue training every parameter on ``records``; normalization stays pinned.

    ``held_out`` is never used for selection; validation is the fine-tune set itself.
    """
    if not records:
        raise ValueError("empty fine-tuning set")
    if cfg.max_epochs == 0:
        return bundle.clone(), TrainingRunRecord(seed=cfg.seed, stop_reason="max_epochs")
    out, run = train(bundle.kind, records, records, bundle.model_cfg, cfg, init=bundle)
    out.extra["fine_tuned_on"] = [r.id for r in records]
    return out, run


def curve_mse(model: BaseModel, records: list[Record]) -> np.ndarray:
    """Per-record MSE (V^2) of the full-profile prediction from a context at t = 0."""
    out = []
    C = model.cfg.context_len
    for r in records:
        cur = r.current_samples()
        ctx = ContextWindow.from_record(r.voltage, cur, r.sampling_period, C)
        pred = model(cur, ctx)
        out.append(float(np.mean((pred - r.voltage) ** 2)))
    return np.array(out)


def fine_tune_sweep(bundle: CheckpointBundle, records: list[Record], held_out: list[Record],
                    sizes, cfg: TrainConfig, seed: int = 0):
    """Fine-tune on nested subsets of ``records``; one checkpoint and evaluation per size."""
    perm = np.random.default_rng(seed).permutation(len(records))
    results = []
    for size in sizes:
        if size > len(records):
            log.warning("sweep size %d exceeds %d available records, skipped", size, len(records))
            continue
        subset = [records[j] for j in perm[:size]]
        tuned, run = fine_tune(bundle, subset, held_out, cfg)
        mse = curve_mse(tuned.model(), held_out)
        results.append({"size": int(size), "bundle": tuned, "run": run,
                        "median_mse": float(np.median(mse)), "mse": mse})
    return results


def fine_tune_cross_validation(bundle: CheckpointBundle, by_battery: dict[str, list[Record]],
                               cfg: TrainConfig):
    """Fine-tune on each battery in turn and evaluate on all the others."""
    results = {}
    for bid, recs in by_battery.items():
        held = [r for b, rs in by_battery.items() if b != bid for r in rs]
        tuned, run = fine_tune(bundle, recs, held, cfg)
        results[bid] = {"bundle": tuned, "run": run, "test_ids": [r.id for r in held],
                        "mse": curve_mse(tuned.model(), held)}
    return results
