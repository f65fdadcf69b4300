"""Training loop: augment, CutMix, distillation loss, SGD, cosine schedule."""

from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from titn import tensor as T
from titn.augment import AugmentConfig, augment_batch, normalize
from titn.distill import LossConfig, cutmix_loss, distillation_loss, teacher_hard_label
from titn.model import TitnModel, fuse_logits, save_checkpoint
from titn.pipeline.data import Dataset
from titn.pipeline.metrics import CSV_HEADER, MetricsRecord, classification_metrics
from titn.pipeline.optim import SGD, cosine_lr

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 1024
    epochs: int = 300
    lr_max: float = 0.1
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    eval_batch_size: int = 256
    record_time: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if not self.lr_max >= 0:
            raise ValueError(f"lr_max must be non-negative, got {self.lr_max}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (CutMix needs a partner)")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = LossConfig(**d.pop("loss", {}))
        aug = AugmentConfig(**d.pop("augment", {}))
        return cls(loss=loss, augment=aug, **d)


def no_weight_decay(name: str) -> bool:
    """Norm scales/shifts, tokens and positional embeddings are not decayed."""
    return "norm" in name or name in ("class_token", "distill_token", "outer_pos", "inner_pos")


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("TITN_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def predict(model: TitnModel, images: np.ndarray, mean, std, batch_size: int = 256,
            workers: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Class-head and distill-head logits for raw images, without recording a tape."""
    workers = workers or num_workers()
    starts = list(range(0, len(images), batch_size))

    def run(s):
        x = normalize(images[s:s + batch_size], mean, std, model.dtype)
        with T.no_grad():
            c, d = model(x)
        return c.data, d.data

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(run, starts))
    else:
        outs = [run(s) for s in starts]
    k = model.config.num_classes
    if not outs:
        return np.zeros((0, k)), np.zeros((0, k))
    return np.concatenate([o[0] for o in outs]), np.concatenate([o[1] for o in outs])


def evaluate(model: TitnModel, dataset: Dataset, mean, std, batch_size: int = 256) -> MetricsRecord:
    """Metrics of the fused (mean of both heads) logits on ``dataset``."""
    if dataset.num_classes != model.config.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, model has {model.config.num_classes}")
    c, d = predict(model, dataset.images, mean, std, batch_size)
    m = classification_metrics(fuse_logits(c, d), dataset.labels, dataset.num_classes)
    return MetricsRecord(**m)


def batch_loss(model: TitnModel, images: np.ndarray, indices: np.ndarray, labels: np.ndarray,
               teacher, cfg: TrainConfig, rng: np.random.Generator, mean, std):
    """Augment one batch and build its loss graph. Returns ``(loss, mix)``."""
    mix = augment_batch(images, labels, cfg.augment, rng)
    x = normalize(mix.images, mean, std, model.dtype)
    class_logits, distill_logits = model(x)
    alpha = cfg.loss.distill_alpha
    if teacher is None:
        # no teacher: the distillation head learns the mixed ground truth
        loss = (cutmix_loss(class_logits, mix.label_1, mix.label_2, mix.lam) * alpha
                + cutmix_loss(distill_logits, mix.label_1, mix.label_2, mix.lam) * (1.0 - alpha))
    else:
        t_label = teacher_hard_label(teacher.scores(mix.images, indices, mix))
        loss = distillation_loss(class_logits, distill_logits, mix.label_1, mix.label_2,
                                 mix.lam, t_label, alpha)
    return loss, mix


def train(model: TitnModel, train_set: Dataset, test_set: Dataset, teacher, cfg: TrainConfig,
          out_dir=None, norm: Optional[tuple] = None,
          on_epoch: Optional[Callable[[MetricsRecord], None]] = None,
          checkpoint_meta: Optional[dict] = None) -> list[MetricsRecord]:
    """Run ``cfg.epochs`` epochs; returns one :class:`MetricsRecord` per epoch.

    If ``out_dir`` is given, writes ``metrics.csv``, ``best.ckpt`` (on each
    improvement of test top-1) and ``final.ckpt``.
    """
    k = model.config.num_classes
    if train_set.num_classes != k or test_set.num_classes != k:
        raise ValueError(f"dataset classes ({train_set.num_classes}/{test_set.num_classes}) "
                         f"do not match the model's {k}")
    if teacher is not None and teacher.num_classes != k:
        raise ValueError(f"teacher produces {teacher.num_classes} classes, model has {k}")
    mean, std = norm if norm is not None else train_set.channel_stats()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "metrics.csv"
        with open(csv_path, "w", newline="") as fh:
            csv.writer(fh).writerow(CSV_HEADER)
    meta = dict(checkpoint_meta or {}, norm_mean=list(mean), norm_std=list(std))

    rng = np.random.default_rng([cfg.seed, 1])
    opt = SGD(list(model.named_parameters()), cfg.momentum, cfg.weight_decay, no_weight_decay)
    n = len(train_set)
    history: list[MetricsRecord] = []
    best = -1.0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min)
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for bi, s in enumerate(range(0, n, cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            if len(idx) < 2:
                continue
            loss, mix = batch_loss(model, train_set.images[idx], idx, train_set.labels[idx],
                                   teacher, cfg, rng, mean, std)
            value = loss.item()
            if not np.isfinite(value):
                if out is not None:
                    np.savez(out / f"nonfinite_epoch{epoch}_batch{bi}.npz",
                             images=mix.images, indices=idx, label_1=mix.label_1,
                             label_2=mix.label_2, lam=mix.lam)
                raise NonFiniteLossError(f"non-finite loss {value} at epoch {epoch}, batch {bi}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            total += value * len(idx)
            seen += len(idx)
        rec = evaluate(model, test_set, mean, std, cfg.eval_batch_size)
        rec.epoch = epoch
        rec.train_loss = total / max(seen, 1)
        rec.lr = lr
        rec.seconds = time.perf_counter() - t0 if cfg.record_time else 0.0
        history.append(rec)
        log.info("epoch %d loss %.4f top1 %.4f top5 %.4f lr %.5f", epoch, rec.train_loss,
                 rec.top1, rec.top5, lr)
        if out is not None:
            with open(csv_path, "a", newline="") as fh:
                csv.writer(fh).writerow(rec.row())
            if rec.top1 > best:
                save_checkpoint(out / "best.ckpt", model, dict(meta, epoch=epoch, top1=rec.top1))
        best = max(best, rec.top1)
        if on_epoch is not None:
            on_epoch(rec)
    if out is not None:
        save_checkpoint(out / "final.ckpt", model, dict(meta, epoch=cfg.epochs - 1))
    return history
