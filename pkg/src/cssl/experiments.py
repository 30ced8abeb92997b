"""Method comparisons, gamma ablations and domain-order swaps at desk scale.

A plan expands into cells ``(method, order, gamma, seed)``. Each cell runs the
whole pipeline on datasets shared by every cell of the plan and appends one
record to ``results.tsv``; cells already recorded as ``ok`` are skipped, so
an interrupted plan resumes where it stopped.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import config as config_mod
from .continual_trainer import continual_train_stage3, pretrain_joint, pretrain_stage1, write_loss_curve
from .datasets import generate_domain_dataset
from .errors import InvalidArgument
from .finetune_eval import evaluate, finetune
from .mae_model import build_model, load_mae, save_checkpoint
from .rehearsal import build_buffer, derive_buffer_params, write_buffer_manifest

log = logging.getLogger(__name__)

METHODS = ("ours", "joint_mae", "mae_d1_only", "mae_d2_only", "no_pretrain", "random_buffer")
ORDERS = ("d1_then_d2", "d2_then_d1")
ORDERED = ("ours", "random_buffer")
TABLE2_GAMMAS = ((1, 1, 8), (1, 3, 6), (2, 3, 5), (5, 3, 2), (6, 3, 1), (8, 1, 1))
RESULT_FIELDS = ("cell", "method", "order", "gamma", "seed", "status", "acc", "auc", "f1",
                 "wall_time", "checkpoint", "curve", "error")


@dataclass(frozen=True)
class Cell:
    method: str
    order: str
    gamma: tuple | None
    seed: int

    @property
    def key(self):
        g = "-" if self.gamma is None else ":".join(str(x) for x in self.gamma)
        return f"{self.method}|{self.order}|{g}|{self.seed}"

    @property
    def slug(self):
        return self.key.replace("|", "__").replace(":", "-")


@dataclass
class ExperimentPlan:
    methods: tuple = ("ours", "no_pretrain", "random_buffer")
    orders: tuple = ("d1_then_d2",)
    gammas: tuple = ((6, 3, 1),)
    seeds: tuple = (0, 1, 2)

    def __post_init__(self):
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise InvalidArgument(f"unknown methods {sorted(bad)}")
        if set(self.orders) - set(ORDERS):
            raise InvalidArgument(f"unknown domain orders {self.orders}")
        if not self.seeds:
            raise InvalidArgument("plan needs at least one seed")

    def cells(self):
        """Every distinct cell. Order only matters for the continual methods and
        gamma only for ``ours``; the other methods appear once per seed."""
        out = []
        for seed in self.seeds:
            for method in self.methods:
                orders = self.orders if method in ORDERED else ("-",)
                gammas = self.gammas if method == "ours" else (None,)
                for order in orders:
                    for g in gammas:
                        cell = Cell(method, order, tuple(g) if g is not None else None, seed)
                        if cell not in out:
                            out.append(cell)
        return out


# ---------------------------------------------------------------------------
# data


def build_datasets(cfg):
    """Both pretraining domains plus the labelled fine-tune split, from the data seed."""
    d = cfg.data
    size = (d.image_size, d.image_size)
    first = generate_domain_dataset(cfg.d1, d.n_d1, size, d.seed, channels=d.channels,
                                    domain_id=1, blob_range=d.pretrain_blobs)
    second = generate_domain_dataset(cfg.d2, d.n_d2, size, d.seed + 1, channels=d.channels,
                                     domain_id=2, blob_range=d.pretrain_blobs)
    ft = generate_domain_dataset(cfg.ft, d.n_ft_train + d.n_ft_test, size, d.seed + 2,
                                 channels=d.channels, domain_id=3, blob_range=d.finetune_blobs)
    return {"d1": first, "d2": second,
            "ft_train": ft.subset(range(d.n_ft_train)),
            "ft_test": ft.subset(range(d.n_ft_train, len(ft)))}


def _ordered(data, order):
    return (data["d1"], data["d2"]) if order != "d2_then_d1" else (data["d2"], data["d1"])


# ---------------------------------------------------------------------------
# single cell


def _config_hash(*parts):
    blob = json.dumps([asdict(p) if hasattr(p, "__dataclass_fields__") else p for p in parts],
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def stage1_model(cfg, ds, cache_dir=None):
    """Stage-1 model for ``ds``; reused from ``cache_dir`` when the same config was run."""
    path = None
    if cache_dir is not None:
        tag = _config_hash(cfg.model, cfg.stage1, cfg.data, ds.spec)
        path = Path(cache_dir) / f"stage1_{ds.domain_id}_{tag}.npz"
        if path.exists():
            model, _ = load_mae(path, cfg.model)
            return model, None
    model = build_model(cfg.model, cfg.stage1.seed)
    history = pretrain_stage1(model, ds, cfg.stage1)
    if path is not None:
        tmp = path.with_suffix(f".{os.getpid()}.tmp")
        save_checkpoint(model, tmp, "stage1")
        os.replace(tmp, path)
    return model, history


def run_cell(cell, base_cfg, data, cell_dir=None, cache_dir=None):
    """Pretrain (per method), fine-tune and evaluate one cell. Returns (report, model)."""
    cfg = base_cfg.with_seed(cell.seed)
    if cell.gamma is not None:
        cfg = replace(cfg, rehearsal=replace(cfg.rehearsal, gamma=cell.gamma))
    first, second = _ordered(data, cell.order)
    stage = "stage1"
    if cell.method == "no_pretrain":
        model, stage = build_model(cfg.model, cfg.stage1.seed), "init"
    elif cell.method == "mae_d1_only":
        model, _ = stage1_model(cfg, data["d1"], cache_dir)
    elif cell.method == "mae_d2_only":
        model, _ = stage1_model(cfg, data["d2"], cache_dir)
    elif cell.method == "joint_mae":
        # compute-matched to stage 1 + stage 3 of the continual pipeline
        _, T = derive_buffer_params(len(data["d1"]), cfg.rehearsal.alpha, cfg.rehearsal.beta)
        s1, s3 = cfg.stage1, cfg.stage3
        steps = (s1.epochs * math.ceil(len(data["d1"]) / s1.batch_size)
                 + s3.epochs * (math.ceil(len(data["d2"]) / s3.batch_size)
                                + math.ceil(T / s3.batch_size)))
        model = build_model(cfg.model, cfg.stage1.seed)
        pretrain_joint(model, data["d1"], data["d2"], cfg.stage1, steps)
    else:
        m1, _ = stage1_model(cfg, first, cache_dir)
        strategy = "random" if cell.method == "random_buffer" else "kmeans"
        buf = build_buffer(m1, first, second, cfg.rehearsal.alpha, cfg.rehearsal.beta,
                           cfg.rehearsal.gamma, cfg.rehearsal.seed, strategy)
        model, history = continual_train_stage3(m1, second, first, buf, cfg.stage3)
        stage = "stage3"
        if cell_dir is not None:
            write_buffer_manifest(buf, Path(cell_dir) / "buffer.jsonl")
            write_loss_curve(history, Path(cell_dir) / "stage3_loss.tsv")
    clf, curve = finetune(model, data["ft_train"], cfg.finetune, data["ft_test"])
    report = evaluate(clf, data["ft_test"], curve)
    if cell_dir is not None:
        save_checkpoint(model, Path(cell_dir) / "pretrained.npz", stage)
        write_curve(curve, Path(cell_dir) / "curve.tsv")
    return report, model


# ---------------------------------------------------------------------------
# results store


def read_results(path):
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def append_result(path, record):
    """Append one record with a single O_APPEND write so parallel writers never interleave."""
    path = Path(path)
    row = "\t".join(str(record.get(k, "")).replace("\t", " ").replace("\n", " ")
                    for k in RESULT_FIELDS) + "\n"
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
    try:
        if os.fstat(fd).st_size == 0:
            os.write(fd, ("\t".join(RESULT_FIELDS) + "\n").encode())
        os.write(fd, row.encode())
    finally:
        os.close(fd)


def _execute(args):
    cell, cfg, data, out_dir = args
    cell_dir = Path(out_dir) / "cells" / cell.slug
    cell_dir.mkdir(parents=True, exist_ok=True)
    rec = {"cell": cell.key, "method": cell.method, "order": cell.order,
           "gamma": "-" if cell.gamma is None else ":".join(map(str, cell.gamma)),
           "seed": cell.seed}
    t0 = time.perf_counter()
    try:
        report, _ = run_cell(cell, cfg, data, cell_dir, Path(out_dir) / "cache")
    except Exception as exc:  # a failed cell must not stop the plan
        log.exception("cell %s failed", cell.key)
        rec.update(status="failed", error=f"{type(exc).__name__}: {exc}",
                   wall_time=f"{time.perf_counter() - t0:.2f}")
        return rec
    rec.update(status="ok", acc=report.acc, auc="" if report.auc is None else report.auc,
               f1=report.f1, wall_time=f"{time.perf_counter() - t0:.2f}",
               checkpoint=str(cell_dir / "pretrained.npz"), curve=str(cell_dir / "curve.tsv"))
    return rec


def run_plan(plan, cfg, out_dir, jobs=1, data=None):
    """Run every pending cell of ``plan``; returns the list of records run now."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store = out / "results.tsv"
    done = {r["cell"] for r in read_results(store) if r["status"] == "ok"}
    pending = [c for c in plan.cells() if c.key not in done]
    if not pending:
        log.info("all %d cells already complete", len(plan.cells()))
        return []
    if not (out / "config.txt").exists():
        config_mod.save(cfg, out / "config.txt")
    data = data or build_datasets(cfg)
    work = [(c, cfg, data, out) for c in pending]
    records = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for rec in pool.map(_execute, work):
                append_result(store, rec)
                records.append(rec)
    else:
        for item in work:
            rec = _execute(item)
            append_result(store, rec)
            records.append(rec)
            log.info("%s: %s acc=%s", rec["cell"], rec["status"], rec.get("acc", ""))
    return records


def summarize(records):
    """Group ok records by (method, order, gamma): mean, min and max over seeds."""
    groups = {}
    for r in records:
        if r["status"] != "ok":
            continue
        groups.setdefault((r["method"], r["order"], r["gamma"]), []).append(r)
    rows = []
    for (method, order, gamma), rs in groups.items():
        row = {"method": method, "order": order, "gamma": gamma, "n": len(rs)}
        for k in ("acc", "auc", "f1"):
            vals = [float(r[k]) for r in rs if r[k] not in ("", None)]
            row[k] = float(np.mean(vals)) if vals else None
            row[f"{k}_min"] = min(vals) if vals else None
            row[f"{k}_max"] = max(vals) if vals else None
        rows.append(row)
    return rows


def format_summary(rows):
    lines = ["method\torder\tgamma\tn\tACC\tAUC\tF1"]
    for r in rows:
        cells = []
        for k in ("acc", "auc", "f1"):
            if r[k] is None:
                cells.append("n/a")
            else:
                cells.append(f"{r[k]:.3f} [{r[k + '_min']:.3f},{r[k + '_max']:.3f}]")
        lines.append("\t".join([r["method"], r["order"], r["gamma"], str(r["n"]), *cells]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# convergence curves


def write_curve(curve, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("epoch\tacc\n")
        for e, acc in enumerate(curve, 1):
            fh.write(f"{e}\t{acc!r}\n")
    return path


def read_curve(path):
    with open(path, newline="") as fh:
        return [float(r["acc"]) for r in csv.DictReader(fh, delimiter="\t")]


def convergence_curve(records):
    """Mean per-epoch fine-tune ACC per (method, order, gamma) label."""
    series = {}
    for r in records:
        if r["status"] != "ok" or not r.get("curve"):
            continue
        label = r["method"] if r["order"] == "-" else f"{r['method']} ({r['order']})"
        if r["gamma"] not in ("-", "", None):
            label += f" {r['gamma']}"
        series.setdefault(label, []).append(read_curve(r["curve"]))
    return {k: [float(x) for x in np.mean(np.array(v), axis=0)] for k, v in series.items()}


def best_so_far(curve):
    return list(np.maximum.accumulate(curve)) if len(curve) else []


def write_curves(series, path):
    """Wide TSV: ``epoch`` then one column per label."""
    labels = list(series)
    length = max((len(v) for v in series.values()), default=0)
    with open(path, "w") as fh:
        fh.write("\t".join(["epoch", *labels]) + "\n")
        for e in range(length):
            vals = [repr(series[k][e]) if e < len(series[k]) else "" for k in labels]
            fh.write("\t".join([str(e + 1), *vals]) + "\n")
    return Path(path)


def read_curves(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    if not rows:
        return {}
    labels = [k for k in rows[0] if k != "epoch"]
    return {k: [float(r[k]) for r in rows if r[k]] for k in labels}
