import csv

import numpy as np
import pytest
import torch

from regdesk.checkpoint import load_checkpoint
from regdesk.loss import LossWeights
from regdesk.net import NetConfig, init_state
from regdesk.synthdata import make_mixture, sample_batch
from regdesk.teacher import make_teacher
from regdesk.train import (
    CSV_HEADER,
    TrainConfig,
    TrainingError,
    alignment_rows,
    entangle_signal,
    prepare_batch,
    run_training,
    train_step,
)

MIX = make_mixture(num_classes=3, grid=2, channels=2, seed=2)
TEACHER = make_teacher(8, 4, 2, 3, seed=1)


def net_cfg(variant="teacher_cls"):
    return NetConfig(grid=2, channels=2, D_vf=8, num_classes=3, depth=2, hidden=16, heads=2, align_depth=1, freq_dim=16, cls_variant=variant)


def tcfg(**kw):
    base = dict(steps=6, batch=16, lr=1e-3, log_every=1, checkpoint_every=3, seed=7)
    base.update(kw)
    return TrainConfig(**base)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def one_step(cfg, variant="teacher_cls", seed=0):
    state = init_state(net_cfg(variant), seed)
    rng = np.random.default_rng(3)
    batch = sample_batch(MIX, cfg.batch, rng)
    rep = train_step(state, batch, TEACHER, __import__("regdesk").LinearSchedule(), cfg, rng)
    return state, rep


def test_zero_lr_freezes_params_and_ema():
    state0 = init_state(net_cfg(), 0)
    p0 = state0.params.clone()
    state, rep = one_step(tcfg(lr=0.0))
    assert torch.equal(state.params, p0)
    assert torch.equal(state.ema, p0)
    assert np.isfinite(rep.loss_total)


def test_zero_ema_decay_tracks_params():
    state, _ = one_step(tcfg(ema_decay=0.0))
    assert torch.equal(state.ema, state.params)


def test_step_is_deterministic():
    a, ra = one_step(tcfg())
    b, rb = one_step(tcfg())
    assert torch.equal(a.params, b.params) and torch.equal(a.ema, b.ema)
    assert ra == rb


def test_teacher_is_frozen():
    book = TEACHER.codebook.copy()
    proj = TEACHER.patch_proj.copy()
    one_step(tcfg())
    np.testing.assert_array_equal(book, TEACHER.codebook)
    np.testing.assert_array_equal(proj, TEACHER.patch_proj)
    with pytest.raises(ValueError):
        TEACHER.codebook[0, 0] = 1.0


def test_prepare_batch_shares_t_and_uses_clean_teacher(sched):
    from regdesk.teacher import encode

    cfg = net_cfg()
    batch = sample_batch(MIX, 32, np.random.default_rng(0))
    pb = prepare_batch(batch, TEACHER, sched, cfg, 0.0, np.random.default_rng(1))
    feats = encode(batch.z0, batch.label, TEACHER)
    t = pb.t.double().numpy()
    # linear path: v = eps - x0, so x_t = x0 + t v on both channels with the same t
    z_t = batch.z0 + t[:, None, None, None] * pb.vt_z.double().numpy()
    cls_t = feats.cls0 + t[:, None] * pb.vt_cls.double().numpy()
    np.testing.assert_allclose(pb.z_t.double().numpy(), z_t, atol=1e-5)
    np.testing.assert_allclose(pb.cls_t.double().numpy(), cls_t, atol=1e-5)
    target = pb.align_target.double().numpy()
    np.testing.assert_allclose(target[:, 0], feats.cls0, atol=1e-6)
    np.testing.assert_allclose(target[:, 1:], feats.f0, atol=1e-6)


def test_label_dropout_uses_null_class(sched):
    cfg = net_cfg()
    batch = sample_batch(MIX, 2000, np.random.default_rng(0))
    pb = prepare_batch(batch, TEACHER, sched, cfg, 0.1, np.random.default_rng(1))
    label = pb.label.numpy()
    dropped = label == MIX.num_classes
    assert 0.08 < dropped.mean() < 0.12
    np.testing.assert_array_equal(label[~dropped], batch.label[~dropped])


def test_alignment_rows_by_variant():
    assert alignment_rows(net_cfg("teacher_cls")) == slice(None)
    assert alignment_rows(net_cfg("avg_teacher_feature")) == slice(None)
    assert alignment_rows(net_cfg("none")) == slice(None)
    for v in ("learnable_token", "avg_latent_feature"):
        assert alignment_rows(net_cfg(v)) == slice(1, None)


def test_entangle_signal_variants():
    z0 = np.random.default_rng(0).normal(size=(4, 2, 2, 2))
    from regdesk.teacher import encode

    feats = encode(z0, np.array([0, 1, 2, 0]), TEACHER)
    np.testing.assert_array_equal(entangle_signal(net_cfg("teacher_cls"), z0, feats), feats.cls0)
    np.testing.assert_allclose(entangle_signal(net_cfg("avg_teacher_feature"), z0, feats), feats.f0.mean(axis=1))
    avg_lat = entangle_signal(net_cfg("avg_latent_feature"), z0, feats)
    assert avg_lat.shape == (4, 2)
    assert entangle_signal(net_cfg("none"), z0, feats) is None
    assert entangle_signal(net_cfg("learnable_token"), z0, feats) is None


def test_zero_steps_writes_initial_checkpoint(tmp_path, sched):
    final = run_training(MIX, TEACHER, net_cfg(), tcfg(steps=0), sched, tmp_path)
    assert read_rows(tmp_path / "metrics.csv") == [CSV_HEADER]
    state, _, _ = load_checkpoint(final)
    ref = init_state(net_cfg(), 7)
    assert torch.equal(state.params, ref.params) and state.step == 0
    assert (tmp_path / "checkpoints" / "step_0000000.ckpt").exists()


def test_resume_matches_straight_run(tmp_path, sched):
    straight = run_training(MIX, TEACHER, net_cfg(), tcfg(), sched, tmp_path / "a")
    run_training(MIX, TEACHER, net_cfg(), tcfg(steps=3), sched, tmp_path / "b")
    resumed = run_training(MIX, TEACHER, net_cfg(), tcfg(), sched, tmp_path / "b", resume_from=tmp_path / "b" / "checkpoints" / "step_0000003.ckpt")
    sa, _, _ = load_checkpoint(straight)
    sb, _, _ = load_checkpoint(resumed)
    assert torch.allclose(sa.params, sb.params, rtol=0, atol=1e-10)
    assert torch.allclose(sa.ema, sb.ema, rtol=0, atol=1e-10)
    assert read_rows(tmp_path / "a" / "metrics.csv") == read_rows(tmp_path / "b" / "metrics.csv")


def test_identical_configs_give_identical_logs(tmp_path, sched):
    run_training(MIX, TEACHER, net_cfg(), tcfg(), sched, tmp_path / "a")
    run_training(MIX, TEACHER, net_cfg(), tcfg(), sched, tmp_path / "b")
    a, b = read_rows(tmp_path / "a" / "metrics.csv"), read_rows(tmp_path / "b" / "metrics.csv")
    assert a == b and len(a) == 7
    assert a[0] == CSV_HEADER


def test_alignment_off_gives_zero_weight_path(sched):
    cfg = tcfg(loss_weights=LossWeights(beta=0.03, lam=0.0))
    _, rep = one_step(cfg, variant="none")
    assert rep.loss_pred_cls == 0.0
    assert rep.loss_total == pytest.approx(rep.loss_pred_z)


def test_nonfinite_loss_raises(sched):
    state = init_state(net_cfg(), 0)
    with torch.no_grad():
        next(state.model.parameters()).fill_(float("nan"))
    rng = np.random.default_rng(0)
    with pytest.raises(TrainingError, match="non-finite"):
        train_step(state, sample_batch(MIX, 4, rng), TEACHER, sched, tcfg(), rng)


def test_short_run_reduces_loss(tmp_path, sched):
    cfg = tcfg(steps=300, batch=64, lr=2e-3, log_every=10, checkpoint_every=0)
    run_training(MIX, TEACHER, net_cfg(), cfg, sched, tmp_path)
    rows = read_rows(tmp_path / "metrics.csv")[1:]
    first = np.mean([float(r[4]) for r in rows[:3]])
    last = np.mean([float(r[4]) for r in rows[-3:]])
    assert last < 0.7 * first
