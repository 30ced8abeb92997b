import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cssl import InvalidArgument
from cssl.datasets import FINETUNE, DomainDataset
from cssl.finetune_eval import (Classifier, FinetuneConfig, MetricsReport, accuracy, confusion,
                                evaluate, f1_from_counts, f1_score, finetune, metrics_from_scores,
                                midranks, roc_auc)
from cssl.mae_model import ModelConfig, build_model

SMALL = ModelConfig(image_size=8, patch_size=4, d_enc=8, enc_layers=1, enc_heads=2, d_dec=8,
                    dec_layers=1, dec_heads=2)


def brute_auc(y, s):
    pos = [si for yi, si in zip(y, s) if yi == 1]
    neg = [si for yi, si in zip(y, s) if yi == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def separable_dataset(n, seed=0):
    # class 1 is bright, class 0 dark; the mean pixel alone separates them
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    base = np.where(labels == 1, 0.7, 0.3)[:, None, None, None]
    images = (base + rng.uniform(-0.1, 0.1, (n, 1, 8, 8))).astype(np.float32)
    return DomainDataset(images, np.arange(n), labels, 3, seed, FINETUNE)


# --- metrics ----------------------------------------------------------------------


def test_auc_examples():
    assert roc_auc([1, 1, 0, 0], [0.9, 0.8, 0.7, 0.1]) == 1.0
    assert roc_auc([1, 1, 0, 0], [0.9, 0.4, 0.7, 0.1]) == 0.75
    assert roc_auc([1, 0], [0.5, 0.5]) == 0.5
    assert roc_auc([1, 1], [0.1, 0.2]) is None


def test_auc_matches_brute_force_on_random_sets():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = rng.integers(0, 20, n) / 19 if rng.random() < 0.5 else rng.random(n)  # with / without ties
        assert abs(roc_auc(y, s) - brute_auc(y, s)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 5)), min_size=2, max_size=40))
def test_auc_property(pairs):
    y = [a for a, _ in pairs]
    s = [b / 5 for _, b in pairs]
    if len(set(y)) < 2:
        assert roc_auc(y, s) is None
    else:
        assert abs(roc_auc(y, s) - brute_auc(y, s)) <= 1e-12


def test_midranks():
    np.testing.assert_array_equal(midranks([3.0, 1.0, 3.0, 2.0]), [3.5, 1.0, 3.5, 2.0])
    np.testing.assert_array_equal(midranks([]), [])


def test_f1_and_confusion():
    y = [1, 1, 1, 0, 0, 0, 1]
    p = [1, 0, 1, 1, 0, 0, 0]
    tp, fp, tn, fn = confusion(y, p)
    assert (tp, fp, tn, fn) == (2, 1, 2, 2)
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    assert f1_score(y, p) == pytest.approx(2 * precision * recall / (precision + recall), rel=1e-15)
    assert f1_score([1, 1, 0], [0, 0, 0]) == 0.0
    assert f1_score([1, 0], [1, 0]) == 1.0
    assert f1_from_counts(0, 3, 0) == 0.0
    assert accuracy(y, p) == pytest.approx(4 / 7)
    with pytest.raises(InvalidArgument):
        accuracy([], [])


def test_metrics_are_permutation_invariant():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, 50)
    s = rng.random(50)
    perm = rng.permutation(50)
    a, b = metrics_from_scores(y, s), metrics_from_scores(y[perm], s[perm])
    assert a.to_json() == b.to_json()


def test_metrics_report_consistency_and_roundtrip():
    rep = metrics_from_scores([1, 1, 0, 0], [0.9, 0.8, 0.7, 0.1], curve=[0.5, 0.75])
    assert (rep.tp, rep.fp, rep.tn, rep.fn) == (2, 1, 1, 0)
    assert rep.acc == (rep.tp + rep.tn) / rep.n
    assert rep.auc == 1.0
    assert MetricsReport.from_json(rep.to_json()) == rep
    assert json.loads(rep.to_json())["curve"] == [0.5, 0.75]
    assert rep.row("ours", "d1_then_d2") == "ours\td1_then_d2\t0.750\t1.000\t0.800"


def test_perfect_and_single_class_reports(caplog):
    perfect = metrics_from_scores([0, 1, 1], [0.1, 0.9, 0.8])
    assert (perfect.acc, perfect.f1, perfect.auc) == (1.0, 1.0, 1.0)
    single = metrics_from_scores([1, 1], [0.9, 0.2])
    assert single.auc is None and single.acc == 0.5
    assert "AUC is undefined" in caplog.text
    assert "n/a" in single.row()
    with pytest.raises(InvalidArgument):
        metrics_from_scores([], [])


# --- classifier and fine-tuning --------------------------------------------------


def test_classifier_shapes_and_independence():
    mae = build_model(SMALL, 0)
    clf = Classifier(mae)
    assert clf(torch.rand(3, 1, 8, 8)).shape == (3, 2)
    with torch.no_grad():
        clf.encoder.norm.weight.add_(1.0)
    assert not torch.equal(clf.encoder.norm.weight, mae.encoder.norm.weight)


def test_finetune_separable_reaches_full_train_accuracy():
    ds = separable_dataset(64)
    cfg = FinetuneConfig(epochs=50, batch_size=16, base_lr=3e-3, warmup_epochs=2)
    assert cfg.epochs * 4 <= 200
    clf, _ = finetune(build_model(SMALL, 0), ds, cfg)
    rep = evaluate(clf, ds)
    assert rep.acc == 1.0


def test_finetune_deterministic_and_curve():
    ds = separable_dataset(32)
    cfg = FinetuneConfig(epochs=3, batch_size=8, base_lr=1e-3, warmup_epochs=1, seed=5)
    a, ca = finetune(build_model(SMALL, 0), ds, cfg, eval_ds=ds)
    b, cb = finetune(build_model(SMALL, 0), ds, cfg, eval_ds=ds)
    assert torch.equal(a.head.weight, b.head.weight)
    assert ca == cb and len(ca) == 3


def test_finetune_freeze_encoder():
    ds = separable_dataset(16)
    mae = build_model(SMALL, 0)
    cfg = FinetuneConfig(epochs=2, batch_size=8, base_lr=1e-3, warmup_epochs=0, freeze_encoder=True)
    clf, _ = finetune(mae, ds, cfg)
    for a, b in zip(clf.encoder.parameters(), mae.encoder.parameters()):
        assert torch.equal(a, b)


def test_finetune_defaults_and_errors():
    cfg = FinetuneConfig()
    assert (cfg.base_lr, cfg.epochs, cfg.warmup_epochs) == (5e-5, 80, 5)
    ds = separable_dataset(8)
    one_class = DomainDataset(ds.images, ds.sample_ids, np.zeros(8, int), 3, 0, FINETUNE)
    with pytest.raises(InvalidArgument):
        finetune(build_model(SMALL, 0), one_class, cfg)
    with pytest.raises(InvalidArgument):
        evaluate(Classifier(build_model(SMALL, 0)), ds.subset([]))
    with pytest.raises(InvalidArgument):
        FinetuneConfig(epochs=2, warmup_epochs=3)
