"""Binary classification fine-tuning of a pretrained encoder, and ACC / AUC / F1."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .continual_trainer import _batches, _set_lr, lr_at
from .datasets import patchify_batch
from .errors import InvalidArgument

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 80
    batch_size: int = 32
    base_lr: float = 5e-5
    warmup_epochs: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.05
    seed: int = 0
    freeze_encoder: bool = False

    def __post_init__(self):
        if self.warmup_epochs > self.epochs:
            raise InvalidArgument("warmup_epochs cannot exceed epochs")
        if not self.base_lr > 0:
            raise InvalidArgument("base_lr must be positive")


class Classifier(nn.Module):
    """Tokenizer + encoder from an MAE, mean-pooled into a two-way linear head."""

    num_classes = 2

    def __init__(self, mae, head_seed=0):
        super().__init__()
        self.cfg = mae.cfg
        self.tokenizer = copy.deepcopy(mae.tokenizer)
        self.encoder = copy.deepcopy(mae.encoder)
        self.head = nn.Linear(mae.cfg.d_enc, self.num_classes)
        dtype = next(mae.parameters()).dtype
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(head_seed)
            nn.init.trunc_normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)
        self.head.to(dtype)

    def forward(self, x):
        p = patchify_batch(x, self.cfg.patch_size)
        tokens = self.tokenizer.proj(p) + self.tokenizer.pos
        return self.head(self.encoder(tokens).mean(dim=1))

    @torch.no_grad()
    def scores(self, ds, batch_size=256):
        """Positive-class probabilities for every sample of ``ds``."""
        self.eval()
        dtype = self.head.weight.dtype
        out = [F.softmax(self(ds.batch(range(s, min(s + batch_size, len(ds))), dtype).data), -1)[:, 1]
               for s in range(0, len(ds), batch_size)]
        return torch.cat(out).double().numpy() if out else np.zeros(0)


# ---------------------------------------------------------------------------
# metrics


def confusion(y_true, y_pred):
    y_true = np.asarray(y_true).astype(int)
    y_pred = np.asarray(y_pred).astype(int)
    tp = int(((y_true == 1) & (y_pred == 1)).sum())
    fp = int(((y_true == 0) & (y_pred == 1)).sum())
    tn = int(((y_true == 0) & (y_pred == 0)).sum())
    fn = int(((y_true == 1) & (y_pred == 0)).sum())
    return tp, fp, tn, fn


def accuracy(y_true, y_pred):
    y_true = np.asarray(y_true)
    if not len(y_true):
        raise InvalidArgument("accuracy of an empty set")
    return float((y_true == np.asarray(y_pred)).mean())


def f1_from_counts(tp, fp, fn):
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def f1_score(y_true, y_pred):
    tp, fp, _, fn = confusion(y_true, y_pred)
    return f1_from_counts(tp, fp, fn)


def midranks(x):
    """1-based ranks with tied values sharing their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def roc_auc(y_true, scores):
    """Mann-Whitney estimate of the ROC AUC; ties count one half.

    Returns None when only one class is present.
    """
    y = np.asarray(y_true).astype(int)
    n_pos = int((y == 1).sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    r = midranks(scores)
    u = r[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricsReport:
    acc: float
    auc: float | None
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    curve: list = field(default_factory=list)  # per-epoch eval ACC during fine-tuning

    @property
    def n(self):
        return self.tp + self.fp + self.tn + self.fn

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def row(self, method="ours", order="d1_then_d2"):
        auc = "n/a" if self.auc is None else f"{self.auc:.3f}"
        return f"{method}\t{order}\t{self.acc:.3f}\t{auc}\t{self.f1:.3f}"


def metrics_from_scores(y_true, scores, threshold=0.5, curve=()):
    y = np.asarray(y_true).astype(int)
    if not len(y):
        raise InvalidArgument("evaluation set is empty")
    pred = (np.asarray(scores) > threshold).astype(int)
    tp, fp, tn, fn = confusion(y, pred)
    auc = roc_auc(y, scores)
    if auc is None:
        log.warning("evaluation set has a single class; AUC is undefined")
    return MetricsReport((tp + tn) / len(y), auc, f1_from_counts(tp, fp, fn), tp, fp, tn, fn,
                         list(curve))


def evaluate(classifier, test_ds, curve=()):
    if len(test_ds) == 0:
        raise InvalidArgument("evaluation set is empty")
    return metrics_from_scores(test_ds.labels, classifier.scores(test_ds), curve=curve)


# ---------------------------------------------------------------------------
# fine-tuning


def finetune(encoder_init, train_ds, cfg, eval_ds=None):
    """Cross-entropy fine-tuning; returns ``(classifier, per-epoch eval ACC)``.

    Every tokenizer, encoder and head parameter is trained unless
    ``cfg.freeze_encoder`` is set.
    """
    labels = np.asarray(train_ds.labels)
    if set(np.unique(labels)) != {0, 1}:
        raise InvalidArgument(f"fine-tuning needs both classes, got labels {np.unique(labels)}")
    clf = Classifier(encoder_init, head_seed=cfg.seed)
    if cfg.freeze_encoder:
        clf.tokenizer.requires_grad_(False)
        clf.encoder.requires_grad_(False)
    params = [p for p in clf.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=0.0, betas=(cfg.beta1, cfg.beta2),
                            weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    dtype = clf.head.weight.dtype
    per_epoch = math.ceil(len(train_ds) / cfg.batch_size)
    total, warmup = cfg.epochs * per_epoch, cfg.warmup_epochs * per_epoch
    target = torch.as_tensor(labels, dtype=torch.long)
    curve = []
    step = 0
    for _ in range(cfg.epochs):
        clf.train()
        for idx in _batches(len(train_ds), cfg.batch_size, gen):
            logits = clf(train_ds.batch(idx, dtype).data)
            loss = F.cross_entropy(logits, target[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            _set_lr(opt, lr_at(step, total, warmup, cfg.base_lr))
            opt.step()
            step += 1
        if eval_ds is not None:
            curve.append(accuracy(eval_ds.labels, clf.scores(eval_ds) > 0.5))
    return clf, curve
