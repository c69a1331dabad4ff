"""Training loop: paired noising, label dropout, AdamW, EMA, CSV logging."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from regdesk.checkpoint import load_checkpoint, save_checkpoint
from regdesk.loss import LossWeights, loss_pred, loss_repa, loss_total
from regdesk.net import DenoiserState, NetConfig, init_state, set_flat
from regdesk.schedule import LinearSchedule, noise, velocity_target
from regdesk.synthdata import MixtureSpec, SampleBatch, sample_batch
from regdesk.teacher import TeacherSpec, encode

log = logging.getLogger(__name__)

CSV_HEADER = ["step", "loss_pred_z", "loss_pred_cls", "loss_repa", "loss_total", "grad_norm"]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 20000
    batch: int = 128
    lr: float = 1e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    ema_decay: float = 0.99
    label_dropout: float = 0.1
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 5000

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        self.adam_betas = tuple(self.adam_betas)
        if not 0.0 <= self.label_dropout < 1.0:
            raise ValueError("label_dropout must lie in [0, 1)")
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


@dataclass
class StepReport:
    loss_pred_z: float
    loss_pred_cls: float
    loss_repa: float
    loss_total: float
    grad_norm: float

    def row(self, step: int) -> list:
        return [step, self.loss_pred_z, self.loss_pred_cls, self.loss_repa, self.loss_total, self.grad_norm]


@dataclass
class PreparedBatch:
    """Everything one optimisation step consumes, already noised with a shared per-sample t."""

    z_t: torch.Tensor
    cls_t: torch.Tensor | None
    t: torch.Tensor
    label: torch.Tensor  # after dropout
    vt_z: torch.Tensor
    vt_cls: torch.Tensor | None
    align_target: torch.Tensor  # [B, T, D_vf] in model token order


def entangle_signal(cfg: NetConfig, z0: np.ndarray, feats) -> np.ndarray | None:
    """Clean class-slot signal for the configured variant."""
    if cfg.cls_variant == "teacher_cls":
        return feats.cls0
    if cfg.cls_variant == "avg_teacher_feature":
        return feats.pooled()
    if cfg.cls_variant == "avg_latent_feature":
        return z0.reshape(z0.shape[0], -1, z0.shape[-1]).mean(axis=1)
    return None


def alignment_target(cfg: NetConfig, feats, signal) -> np.ndarray:
    """Teacher targets in model token order (class slot first).

    The class slot is paired with the clean entanglement signal when that
    signal lives in teacher space; otherwise only latent tokens are aligned
    and the slot is left out (see ``alignment_rows``).
    """
    if cfg.align_cls_row:
        return np.concatenate([signal[:, None, :], feats.f0], axis=1)
    return feats.f0


def alignment_rows(cfg: NetConfig) -> slice:
    """Rows of ``projected`` that take part in the alignment loss."""
    if cfg.align_cls_row or not cfg.has_token_slot:
        return slice(None)
    return slice(1, None)


def prepare_batch(
    batch: SampleBatch,
    teacher: TeacherSpec,
    sched: LinearSchedule,
    net_cfg: NetConfig,
    label_dropout: float,
    rng: np.random.Generator,
) -> PreparedBatch:
    B = batch.z0.shape[0]
    feats = encode(batch.z0, batch.label, teacher)  # clean input only
    signal = entangle_signal(net_cfg, batch.z0, feats)
    t = rng.uniform(sched.t_min, sched.t_max, size=B)
    eps_z = rng.standard_normal(batch.z0.shape)
    tz = t.reshape(B, 1, 1, 1)
    z_t = noise(batch.z0, eps_z, tz, sched)
    vt_z = velocity_target(batch.z0, eps_z, tz, sched)
    cls_t = vt_cls = None
    if signal is not None:
        eps_c = rng.standard_normal(signal.shape)
        tc = t.reshape(B, 1)
        cls_t = noise(signal, eps_c, tc, sched)
        vt_cls = velocity_target(signal, eps_c, tc, sched)
    drop = rng.uniform(size=B) < label_dropout
    label = np.where(drop, net_cfg.num_classes, batch.label)

    dt = net_cfg.torch_dtype
    as_t = lambda a: None if a is None else torch.from_numpy(np.ascontiguousarray(a)).to(dt)  # noqa: E731
    return PreparedBatch(
        z_t=as_t(z_t),
        cls_t=as_t(cls_t),
        t=as_t(t),
        label=torch.from_numpy(label.astype(np.int64)),
        vt_z=as_t(vt_z),
        vt_cls=as_t(vt_cls),
        align_target=as_t(alignment_target(net_cfg, feats, signal)),
    )


def compute_losses(model, pb: PreparedBatch, w: LossWeights):
    out = model(pb.z_t, pb.cls_t, pb.t, pb.label)
    pred = loss_pred(out, pb.vt_z, pb.vt_cls, w)
    proj = out.projected[:, alignment_rows(model.cfg)]
    repa, zero = loss_repa(proj, pb.align_target)
    total = loss_total(pred.total, repa, w)
    return total, pred, repa, zero, proj.shape[0] * proj.shape[1]


def adamw_update(state: DenoiserState, grad: torch.Tensor, cfg: TrainConfig) -> None:
    b1, b2 = cfg.adam_betas
    state.step += 1
    state.exp_avg.mul_(b1).add_(grad, alpha=1 - b1)
    state.exp_avg_sq.mul_(b2).addcmul_(grad, grad, value=1 - b2)
    m_hat = state.exp_avg / (1 - b1**state.step)
    v_hat = state.exp_avg_sq / (1 - b2**state.step)
    p = state.params
    if cfg.lr != 0.0:
        p = p - cfg.lr * cfg.weight_decay * p - cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps)
        set_flat(state.model, p)
    state.ema = torch.lerp(state.ema, p, 1.0 - cfg.ema_decay)


def train_step(
    state: DenoiserState,
    batch: SampleBatch,
    teacher: TeacherSpec,
    sched: LinearSchedule,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> StepReport:
    pb = prepare_batch(batch, teacher, sched, state.cfg, cfg.label_dropout, rng)
    params = list(state.model.parameters())
    state.model.train()
    total, pred, repa, zero, rows = compute_losses(state.model, pb, cfg.loss_weights)
    if not torch.isfinite(total):
        raise TrainingError(
            f"non-finite loss at step {state.step + 1}: pred_z={pred.z.item()} "
            f"pred_cls={pred.cls.item()} repa={repa.item()}"
        )
    if zero > 0.01 * rows:
        raise TrainingError(f"step {state.step + 1}: {zero}/{rows} zero-norm rows in alignment loss")
    grads = torch.autograd.grad(total, params, allow_unused=True)
    grad = torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1) for p, g in zip(params, grads)])
    adamw_update(state, grad, cfg)
    if not torch.isfinite(state.params).all():
        raise TrainingError(f"non-finite parameters after step {state.step}")
    return StepReport(
        loss_pred_z=pred.z.item(),
        loss_pred_cls=pred.cls.item(),
        loss_repa=repa.item(),
        loss_total=total.item(),
        grad_norm=grad.norm().item(),
    )


def _ckpt_path(out_dir: Path, step: int) -> Path:
    return out_dir / "checkpoints" / f"step_{step:07d}.ckpt"


def run_training(
    mixture: MixtureSpec,
    teacher: TeacherSpec,
    net_cfg: NetConfig,
    cfg: TrainConfig,
    sched: LinearSchedule,
    out_dir,
    resume_from=None,
    extra: dict | None = None,
    progress: bool = False,
) -> Path:
    """Train to ``cfg.steps``; returns the final checkpoint path.

    Writes ``metrics.csv`` and checkpoints under ``out_dir``. Resuming from a
    checkpoint restores parameters, optimizer moments, EMA and the data RNG,
    so the continuation is identical to an uninterrupted run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "metrics.csv"
    if resume_from is None:
        state = init_state(net_cfg, cfg.seed)
        rng = np.random.default_rng(cfg.seed)
        rows = []
    else:
        state, rng_state, _ = load_checkpoint(resume_from)
        rng = np.random.default_rng()
        rng.bit_generator.state = rng_state
        rows = []
        if csv_path.exists():
            with open(csv_path, newline="") as fh:
                rows = [r for r in list(csv.reader(fh))[1:] if int(r[0]) <= state.step]

    def checkpoint(path):
        return save_checkpoint(path, state, rng.bit_generator.state, extra)

    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        writer.writerows(rows)
        if state.step == 0:
            checkpoint(_ckpt_path(out_dir, 0))
        while state.step < cfg.steps:
            batch = sample_batch(mixture, cfg.batch, rng)
            rep = train_step(state, batch, teacher, sched, cfg, rng)
            if state.step % cfg.log_every == 0:
                writer.writerow(rep.row(state.step))
                fh.flush()
                if progress:
                    log.info("step %d  L_total=%.5f  L_z=%.5f  L_repa=%.4f", state.step, rep.loss_total, rep.loss_pred_z, rep.loss_repa)
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                checkpoint(_ckpt_path(out_dir, state.step))
    return checkpoint(out_dir / "final.ckpt")
