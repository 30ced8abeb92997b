import math

import numpy as np
import pytest
import torch
from gradcheck import central_difference_check

from cssl import InvalidArgument, TrainingDiverged
from cssl.continual_trainer import (TrainConfig, batch_schedule, continual_train_stage3,
                                    feature_distillation_loss, lr_at, mean_loss_by_epoch, mixup,
                                    pretrain_stage1, read_loss_curve, write_loss_curve)
from cssl.datasets import LUNG, MEDIASTINAL, ImageBatch, generate_domain_dataset
from cssl.mae_model import ModelConfig, build_model, load_mae, params_digest, save_checkpoint
from cssl.rehearsal import random_buffer

TOY = ModelConfig(image_size=4, channels=1, patch_size=2, d_enc=4, enc_layers=1, enc_heads=1,
                  d_dec=4, dec_layers=1, dec_heads=1, mlp_ratio=2.0)
SMALL = ModelConfig(image_size=16, patch_size=4, d_enc=16, enc_layers=1, enc_heads=2, d_dec=8,
                    dec_layers=1, dec_heads=2)


def quick_cfg(**kw):
    base = dict(epochs=2, batch_size=8, base_lr=1e-3, warmup_epochs=1, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def domains():
    d1 = generate_domain_dataset(MEDIASTINAL, 32, (16, 16), 0, domain_id=1)
    d2 = generate_domain_dataset(LUNG, 24, (16, 16), 1, domain_id=2)
    return d1, d2


# --- schedule ------------------------------------------------------------------


def test_lr_schedule_full_scale_values():
    total, warm = 300 * 489, 40 * 489
    assert lr_at(0, total, warm, 1.5e-4) == 0.0
    assert lr_at(warm, total, warm, 1.5e-4) == 0.00015
    assert abs(lr_at(total, total, warm, 1.5e-4)) < 1e-12


def test_lr_schedule_shape():
    total, warm, base = 1000, 100, 2.0
    assert lr_at(50, total, warm, base) == pytest.approx(1.0)
    assert lr_at(550, total, warm, base) == pytest.approx(1.0)  # cosine midpoint
    # continuous at the warmup boundary from both sides
    assert lr_at(warm - 1e-9, total, warm, base) == pytest.approx(base, rel=1e-9)
    assert lr_at(warm + 1e-9, total, warm, base) == pytest.approx(base, rel=1e-9)
    vals = [lr_at(s, total, warm, base) for s in range(warm, total + 1)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    assert lr_at(0, 10, 0, 1.0) == 1.0


def test_train_config_validation():
    with pytest.raises(InvalidArgument):
        TrainConfig(epochs=5, warmup_epochs=6)
    with pytest.raises(InvalidArgument):
        TrainConfig(base_lr=0)
    with pytest.raises(InvalidArgument):
        TrainConfig(schedule="step")


# --- mixup ---------------------------------------------------------------------


def test_mixup_injected_lambda():
    g = torch.Generator().manual_seed(0)
    b = torch.rand(5, 1, 8, 8, generator=g)
    perm = torch.tensor([2, 0, 4, 1, 3])
    mixed, _, _ = mixup(b, lam=torch.ones_like(b), perm=perm)
    assert torch.equal(mixed, b)
    mixed, _, _ = mixup(b, lam=torch.zeros_like(b), perm=perm)
    assert torch.equal(mixed, b[perm])


def test_mixup_bounds_and_shapes():
    for seed in range(50):
        g = torch.Generator().manual_seed(seed)
        b = torch.rand(6, 2, 8, 8, generator=g)
        b[::2] = b[1::2]  # equal pairs are where rounding would bite
        mixed, lam, perm = mixup(b, g)
        other = b[perm]
        assert lam.shape == b.shape and lam.min() >= 0 and lam.max() < 1
        assert sorted(perm.tolist()) == list(range(6))
        assert (mixed >= torch.minimum(b, other)).all()
        assert (mixed <= torch.maximum(b, other)).all()


def test_mixup_matches_formula():
    g = torch.Generator().manual_seed(3)
    b = torch.rand(4, 1, 4, 4, dtype=torch.float64, generator=g)
    mixed, lam, perm = mixup(b, g)
    torch.testing.assert_close(mixed, lam * b + (1 - lam) * b[perm], rtol=0, atol=1e-15)


def test_mixup_lambda_mean():
    lam = mixup(torch.zeros(1000, 1, 32, 32), torch.Generator().manual_seed(0))[1]
    assert lam.numel() >= 10**6
    assert abs(lam.double().mean().item() - 0.5) <= 0.002


def test_mixup_keeps_batch_metadata_and_errors():
    b = ImageBatch(torch.rand(3, 1, 4, 4), 2, [7, 8, 9])
    mixed, _, _ = mixup(b, torch.Generator().manual_seed(0))
    assert isinstance(mixed, ImageBatch) and mixed.sample_ids == [7, 8, 9]
    with pytest.raises(InvalidArgument):
        mixup(torch.zeros(0, 1, 4, 4))
    with pytest.raises(InvalidArgument):
        mixup(torch.zeros(2, 1, 4, 4), lam=torch.zeros(2, 1, 4, 3))


def test_mixup_single_sample_is_identity():
    b = torch.rand(1, 1, 4, 4)
    mixed, _, perm = mixup(b, torch.Generator().manual_seed(1))
    assert perm.tolist() == [0]
    assert torch.equal(mixed, b)


# --- feature distillation -------------------------------------------------------


def test_fd_loss_examples():
    assert feature_distillation_loss(torch.tensor([[1.0, 2.0]]), torch.zeros(1, 2)).item() == 5.0
    f = torch.rand(3, 4, 5)
    assert feature_distillation_loss(f, f.clone()).item() == 0.0
    # batch-averaged: duplicating the batch leaves the value unchanged
    a, b = torch.rand(2, 3, 4), torch.rand(2, 3, 4)
    assert feature_distillation_loss(torch.cat([a, a]), torch.cat([b, b])).item() == pytest.approx(
        feature_distillation_loss(a, b).item(), rel=1e-6)
    with pytest.raises(InvalidArgument):
        feature_distillation_loss(torch.zeros(1, 2), torch.zeros(1, 3))


def test_fd_gradient_only_reaches_new_model():
    old = torch.rand(2, 3, requires_grad=True)
    new = torch.rand(2, 3, requires_grad=True)
    feature_distillation_loss(new, old).backward()
    assert old.grad is None
    torch.testing.assert_close(new.grad, (new - old).detach())  # 2 (new - old) / S with S = 2


def test_fd_gradient_matches_finite_differences():
    torch.manual_seed(0)
    m1 = build_model(TOY, 1, torch.float64)
    m2 = build_model(TOY, 2, torch.float64)
    for p in m2.decoder_parameters():
        p.requires_grad_(False)
    with torch.no_grad():
        for p in m2.tokenizer_encoder_parameters():
            p.add_(0.3 * torch.randn(p.shape, dtype=torch.float64))
    g = torch.Generator().manual_seed(4)
    x = torch.rand(3, 1, 4, 4, dtype=torch.float64, generator=g)
    mixed, _, _ = mixup(x, g)
    with torch.no_grad():
        target = m1.features(mixed)
    assert sum(p.numel() for p in m2.tokenizer_encoder_parameters()) <= 500
    err = central_difference_check(
        m2, lambda: feature_distillation_loss(m2.features(mixed), target))
    assert err < 1e-4


# --- stage 1 ---------------------------------------------------------------------


def test_stage1_smoke_and_checkpoint(tmp_path):
    ds = generate_domain_dataset(MEDIASTINAL, 8, (16, 16), 0)
    model = build_model(SMALL, 0)
    hist = pretrain_stage1(model, ds, quick_cfg(epochs=1, warmup_epochs=0))
    assert len(hist) == 1 and math.isfinite(hist[0]["loss_mse"])
    path = save_checkpoint(model, tmp_path / "m1.npz", "stage1")
    back, _ = load_mae(path, SMALL)
    assert params_digest(back) == params_digest(model)


def test_stage1_deterministic(domains):
    d1, _ = domains
    a, b = build_model(SMALL, 0), build_model(SMALL, 0)
    ha = pretrain_stage1(a, d1, quick_cfg())
    hb = pretrain_stage1(b, d1, quick_cfg())
    assert params_digest(a) == params_digest(b)
    assert ha == hb


def test_stage1_loss_decreases():
    # regression fixture: seed-averaged epoch-20 loss below epoch-1 loss
    ds = generate_domain_dataset(MEDIASTINAL, 64, (32, 32), 0)
    first, last = [], []
    for seed in range(3):
        model = build_model(ModelConfig(), seed)
        cfg = TrainConfig(epochs=20, batch_size=16, base_lr=1e-3, warmup_epochs=2, seed=seed)
        by_epoch = mean_loss_by_epoch(pretrain_stage1(model, ds, cfg))
        first.append(by_epoch[0])
        last.append(by_epoch[19])
    assert np.mean(last) < np.mean(first)


def test_stage1_errors_and_divergence(tmp_path):
    model = build_model(SMALL, 0)
    with pytest.raises(InvalidArgument):
        pretrain_stage1(model, generate_domain_dataset(MEDIASTINAL, 0, (16, 16), 0), quick_cfg())
    ds = generate_domain_dataset(MEDIASTINAL, 8, (16, 16), 0)
    with torch.no_grad():
        model.decoder.pred.bias.fill_(float("inf"))
    with pytest.raises(TrainingDiverged) as info:
        pretrain_stage1(model, ds, quick_cfg(), out_dir=tmp_path)
    assert info.value.checkpoint == tmp_path / "diagnostic.npz"
    assert info.value.checkpoint.exists()


def test_zero_mask_ratio_skips_updates(domains):
    d1, _ = domains
    model = build_model(SMALL, 0)
    before = params_digest(model)
    hist = pretrain_stage1(model, d1, quick_cfg(mask_ratio=0.0))
    assert params_digest(model) == before
    assert all(r["loss_mse"] == 0.0 for r in hist)


# --- stage 3 ---------------------------------------------------------------------


def test_batch_schedule_accounting():
    g = torch.Generator().manual_seed(0)
    plan = batch_schedule(100, 30, 8, g)
    d2 = [idx for src, idx in plan if src == "d2"]
    buf = [idx for src, idx in plan if src == "buffer"]
    assert len(d2) == 13 and len(buf) == 4
    assert sorted(np.concatenate(d2).tolist()) == list(range(100))
    assert sorted(np.concatenate(buf).tolist()) == list(range(30))
    assert abs(len(buf) - len(d2) * 30 / 100) <= 1
    assert [s for s, _ in batch_schedule(0, 5, 2, g)] == ["buffer"] * 3


def test_stage3_freezes_m1_and_updates_m2(domains, tmp_path):
    d1, d2 = domains
    m1 = build_model(SMALL, 0)
    pretrain_stage1(m1, d1, quick_cfg())
    ckpt = save_checkpoint(m1, tmp_path / "m1.npz", "stage1")
    buf = random_buffer(d1.sample_ids, 8, seed=0)
    m2, hist = continual_train_stage3(m1, d2, d1, buf, quick_cfg(seed=1))
    reloaded, _ = load_mae(ckpt)
    assert params_digest(m1) == params_digest(reloaded)
    assert params_digest(m2) != params_digest(m1)
    sources = {r["source"] for r in hist}
    assert sources == {"d2", "buffer"}
    assert all((r["loss_fd"] is None) == (r["source"] == "d2") for r in hist)


def test_stage3_buffer_only_leaves_decoder(domains):
    d1, d2 = domains
    m1 = build_model(SMALL, 0)
    pretrain_stage1(m1, d1, quick_cfg())
    dec_before = [p.detach().clone() for p in m1.decoder_parameters()]
    enc_before = [p.detach().clone() for p in m1.tokenizer_encoder_parameters()]
    m2, hist = continual_train_stage3(m1, d2, d1, random_buffer(d1.sample_ids, 16, 0),
                                      quick_cfg(epochs=3), buffer_only=True)
    assert all(r["source"] == "buffer" for r in hist)
    assert all(torch.equal(a, b) for a, b in zip(dec_before, m2.decoder_parameters()))
    assert not all(torch.equal(a, b) for a, b in zip(enc_before, m2.tokenizer_encoder_parameters()))


def test_stage3_initial_fd_is_zero():
    # buffer holds the new domain's own images; M2 starts as a copy of M1
    d2 = generate_domain_dataset(LUNG, 16, (16, 16), 2, domain_id=2)
    m1 = build_model(SMALL, 0)
    _, hist = continual_train_stage3(m1, d2, d2, random_buffer(d2.sample_ids, 16, 0),
                                     quick_cfg(epochs=1, warmup_epochs=0), buffer_only=True)
    assert hist[0]["loss_fd"] == 0.0


def test_stage3_deterministic(domains):
    d1, d2 = domains
    m1 = build_model(SMALL, 0)
    buf = random_buffer(d1.sample_ids, 8, 0)
    a, ha = continual_train_stage3(m1, d2, d1, buf, quick_cfg())
    b, hb = continual_train_stage3(m1, d2, d1, buf, quick_cfg())
    assert params_digest(a) == params_digest(b)
    assert ha == hb


def test_stage3_errors(domains):
    d1, d2 = domains
    m1 = build_model(SMALL, 0)
    with pytest.raises(InvalidArgument):
        continual_train_stage3(m1, d2, d1, random_buffer(d1.sample_ids, 0, 0), quick_cfg())
    with pytest.raises(InvalidArgument):
        continual_train_stage3(m1, d2.subset([]), d1, random_buffer(d1.sample_ids, 4, 0),
                               quick_cfg())


def test_loss_curve_roundtrip(tmp_path, domains):
    d1, d2 = domains
    m1 = build_model(SMALL, 0)
    _, hist = continual_train_stage3(m1, d2, d1, random_buffer(d1.sample_ids, 8, 0), quick_cfg())
    back = read_loss_curve(write_loss_curve(hist, tmp_path / "loss.tsv"))
    assert len(back) == len(hist)
    for a, b in zip(back, hist):
        assert a["source"] == b["source"] and a["step"] == b["step"]
        for key in ("loss_mse", "loss_fd", "lr"):
            assert (a[key] is None) == (b[key] is None)
            if a[key] is not None:
                assert a[key] == pytest.approx(b[key], rel=1e-12)
