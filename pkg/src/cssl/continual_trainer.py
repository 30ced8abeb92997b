"""Stage-1 MAE pretraining and stage-3 continual pretraining.

Stage 3 trains a copy of the stage-1 model on the new domain plus the
rehearsal buffer. Every batch comes from exactly one source:

* new-domain batches are masked and update tokenizer, encoder and decoder by
  the reconstruction loss;
* buffer batches are mixed with a shuffled copy of themselves, encoded
  unmasked by both models, and update only tokenizer and encoder by the
  squared distance to the frozen stage-1 features.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .datasets import ImageBatch, concat_datasets, sample_batch_masks
from .errors import InvalidArgument, TrainingDiverged
from .mae_model import save_checkpoint

log = logging.getLogger(__name__)

LOSS_FIELDS = ("step", "epoch", "source", "loss_mse", "loss_fd", "lr")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    base_lr: float = 1.5e-4
    warmup_epochs: int = 40
    schedule: str = "warmup_cosine"
    seed: int = 0
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    mask_ratio: float = 0.75
    mse_weight: float = 1.0
    fd_weight: float = 1.0

    def __post_init__(self):
        if self.warmup_epochs > self.epochs:
            raise InvalidArgument("warmup_epochs cannot exceed epochs")
        if not self.base_lr > 0:
            raise InvalidArgument("base_lr must be positive")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        if self.schedule != "warmup_cosine" or self.optimizer != "adamw":
            raise InvalidArgument("only warmup_cosine schedule with adamw is supported")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise InvalidArgument("mask_ratio must lie in [0, 1]")


def lr_at(step, total_steps, warmup_steps, base_lr):
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0 at ``total_steps``."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(params, cfg):
    return torch.optim.AdamW(params, lr=0.0, betas=(cfg.beta1, cfg.beta2),
                             weight_decay=cfg.weight_decay)


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def _batches(n, batch_size, generator):
    perm = torch.randperm(n, generator=generator).numpy()
    return [perm[s:s + batch_size] for s in range(0, n, batch_size)]


def write_loss_curve(history, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_FIELDS, delimiter="\t", extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow({k: ("" if row.get(k) is None else row[k]) for k in LOSS_FIELDS})
    return path


def read_loss_curve(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    out = []
    for r in rows:
        out.append({"step": int(r["step"]), "epoch": int(r["epoch"]), "source": r["source"],
                    "loss_mse": float(r["loss_mse"]) if r["loss_mse"] else None,
                    "loss_fd": float(r["loss_fd"]) if r["loss_fd"] else None,
                    "lr": float(r["lr"])})
    return out


def _diverged(model, history, out_dir, what):
    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(model, Path(out_dir) / "diagnostic.npz", "diagnostic",
                               extra={"step": len(history)})
        write_loss_curve(history, Path(out_dir) / "diagnostic_loss.tsv")
    raise TrainingDiverged(f"{what} loss became non-finite at step {len(history)}", ckpt)


# ---------------------------------------------------------------------------
# stage 1


def pretrain_mae(model, ds, cfg, total_steps=None, out_dir=None):
    """Masked-reconstruction training in place; returns the loss history.

    ``total_steps`` overrides the epoch budget (used to compute-match the
    joint baseline); the warmup then covers the same fraction of training.
    """
    if len(ds) == 0:
        raise InvalidArgument("cannot pretrain on an empty dataset")
    gen = torch.Generator().manual_seed(cfg.seed)
    dtype = next(model.parameters()).dtype
    per_epoch = math.ceil(len(ds) / cfg.batch_size)
    total = total_steps if total_steps is not None else cfg.epochs * per_epoch
    warmup = round(total * cfg.warmup_epochs / cfg.epochs) if cfg.epochs else 0
    n = model.cfg.num_patches
    opt = make_optimizer(model.parameters(), cfg)
    model.train()
    history = []
    step = epoch = 0
    while step < total:
        for idx in _batches(len(ds), cfg.batch_size, gen):
            if step >= total:
                break
            lr = lr_at(step, total, warmup, cfg.base_lr)
            batch = ds.batch(idx, dtype)
            masked = sample_batch_masks(len(batch), n, cfg.mask_ratio, gen)
            if masked.shape[1] == 0:
                log.warning("mask ratio %.3f masks no patches; skipping update", cfg.mask_ratio)
                history.append({"step": step, "epoch": epoch, "source": "d", "loss_mse": 0.0,
                                "loss_fd": None, "lr": lr})
                step += 1
                continue
            loss, _, _ = model.reconstruction_loss(batch, masked)
            loss = cfg.mse_weight * loss
            if not torch.isfinite(loss):
                _diverged(model, history, out_dir, "reconstruction")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            _set_lr(opt, lr)
            opt.step()
            history.append({"step": step, "epoch": epoch, "source": "d",
                            "loss_mse": loss.item(), "loss_fd": None, "lr": lr})
            step += 1
        epoch += 1
    return history


def pretrain_stage1(model, d1, cfg, out_dir=None):
    """Train M1 on the first domain (in place)."""
    return pretrain_mae(model, d1, cfg, out_dir=out_dir)


def pretrain_joint(model, d1, d2, cfg, total_steps, out_dir=None):
    return pretrain_mae(model, concat_datasets([d1, d2]), cfg, total_steps, out_dir)


# ---------------------------------------------------------------------------
# stage 3


def mixup(batch, generator=None, lam=None, perm=None):
    """Element-wise mixup of a batch with a shuffled copy of itself.

    Returns ``(mixed, lam, perm)``; ``lam`` has the batch's full shape with
    entries drawn from [0, 1). Both ``lam`` and ``perm`` may be injected.
    """
    x = batch.data if isinstance(batch, ImageBatch) else batch
    S = x.shape[0]
    if S < 1:
        raise InvalidArgument("mixup needs a non-empty batch")
    if perm is None:
        perm = torch.randperm(S, generator=generator)
    if lam is None:
        lam = torch.rand(x.shape, generator=generator, dtype=x.dtype)
    elif lam.shape != x.shape:
        raise InvalidArgument(f"lambda shape {tuple(lam.shape)} differs from batch")
    shuffled = x[perm]
    mixed = lam * x + (1 - lam) * shuffled
    # rounding can overshoot the pair by one ulp; the clamp is exact otherwise
    mixed = torch.minimum(torch.maximum(mixed, torch.minimum(x, shuffled)),
                          torch.maximum(x, shuffled))
    if isinstance(batch, ImageBatch):
        mixed = ImageBatch(mixed, batch.domain_id, list(batch.sample_ids))
    return mixed, lam, perm


def feature_distillation_loss(feat_new, feat_old):
    """Squared L2 distance to the (detached) old features, averaged over the batch."""
    if feat_new.shape != feat_old.shape:
        raise InvalidArgument(
            f"feature shapes differ: {tuple(feat_new.shape)} vs {tuple(feat_old.shape)}")
    diff = feat_new - feat_old.detach()
    return (diff ** 2).reshape(diff.shape[0], -1).sum(dim=1).mean()


def batch_schedule(n_new, n_buffer, batch_size, generator):
    """One epoch of homogeneous batches: list of (source, indices) in random order."""
    plan = [("d2", b) for b in _batches(n_new, batch_size, generator)] if n_new else []
    plan += [("buffer", b) for b in _batches(n_buffer, batch_size, generator)]
    order = torch.randperm(len(plan), generator=generator).tolist()
    return [plan[i] for i in order]


def continual_train_stage3(m1, d2, d1, buffer, cfg, out_dir=None, buffer_only=False):
    """Train M2 (a copy of ``m1``) on ``d2`` plus the buffered ``d1`` samples.

    ``m1`` is never modified. ``buffer_only`` drops the new-domain batches,
    which is useful to check that replay leaves the decoder untouched.
    Returns ``(m2, history)``.
    """
    if len(buffer) == 0:
        raise InvalidArgument("rehearsal buffer is empty")
    if not buffer_only and len(d2) == 0:
        raise InvalidArgument("stage 3 needs a non-empty second-domain dataset")
    replay = d1.subset(d1.index_of(buffer.sample_ids))
    n_new = 0 if buffer_only else len(d2)

    m2 = copy.deepcopy(m1)
    m1.eval()
    m2.train()
    dtype = next(m2.parameters()).dtype
    gen = torch.Generator().manual_seed(cfg.seed)
    n = m2.cfg.num_patches
    per_epoch = math.ceil(n_new / cfg.batch_size) + math.ceil(len(replay) / cfg.batch_size)
    total = cfg.epochs * per_epoch
    warmup = cfg.warmup_epochs * per_epoch
    opt = make_optimizer(m2.parameters(), cfg)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        for source, idx in batch_schedule(n_new, len(replay), cfg.batch_size, gen):
            lr = lr_at(step, total, warmup, cfg.base_lr)
            opt.zero_grad(set_to_none=True)
            if source == "d2":
                batch = d2.batch(idx, dtype)
                masked = sample_batch_masks(len(batch), n, cfg.mask_ratio, gen)
                if masked.shape[1] == 0:
                    history.append({"step": step, "epoch": epoch, "source": source,
                                    "loss_mse": 0.0, "loss_fd": None, "lr": lr})
                    step += 1
                    continue
                loss, _, _ = m2.reconstruction_loss(batch, masked)
                loss = cfg.mse_weight * loss
                row = {"loss_mse": loss.item(), "loss_fd": None}
            else:
                mixed, _, _ = mixup(replay.batch(idx, dtype), gen)
                with torch.no_grad():
                    target = m1.features(mixed)
                loss = cfg.fd_weight * feature_distillation_loss(m2.features(mixed), target)
                row = {"loss_mse": None, "loss_fd": loss.item()}
            if not torch.isfinite(loss):
                _diverged(m2, history, out_dir, source)
            loss.backward()
            _set_lr(opt, lr)
            opt.step()
            history.append({"step": step, "epoch": epoch, "source": source, "lr": lr, **row})
            step += 1
    return m2, history


def mean_loss_by_epoch(history, key="loss_mse"):
    by = {}
    for row in history:
        if row.get(key) is not None:
            by.setdefault(row["epoch"], []).append(row[key])
    return {e: float(np.mean(v)) for e, v in sorted(by.items())}
