"""Joint velocity loss, cosine alignment loss, and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class LossWeights:
    beta: float = 0.03  # class-slot velocity weight
    lam: float = 0.5  # alignment weight

    def __post_init__(self):
        if self.beta < 0 or self.lam < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class PredLoss:
    total: torch.Tensor
    z: torch.Tensor
    cls: torch.Tensor


def _mse(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def loss_pred(out, vt_z, vt_cls, w: LossWeights) -> PredLoss:
    """Element-mean squared error on the latent, plus beta times the class-slot term.

    ``out`` is anything with ``v_z`` and ``v_cls`` attributes (a ``ModelOutput``).
    The class-slot term is dropped when ``vt_cls`` is None.
    """
    v_z, v_cls = out.v_z, out.v_cls
    lz = _mse(v_z, vt_z)
    if vt_cls is None:
        lc = torch.zeros((), dtype=lz.dtype)
    else:
        if v_cls is None:
            raise ValueError("class-slot target given but model produced no class-slot velocity")
        lc = _mse(v_cls, vt_cls)
    return PredLoss(total=lz + w.beta * lc, z=lz, cls=lc)


def cosine_rows(a, b):
    """Row-wise cosine similarity; a zero-norm row scores 0. Returns (cos, zero_count)."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    denom = na * nb
    ok = denom > 0
    cos = torch.where(ok, (a * b).sum(-1) / torch.where(ok, denom, torch.ones_like(denom)), torch.zeros_like(denom))
    return cos, int((~ok).sum())


def loss_repa(projected, F0):
    """Negative mean row-wise cosine over every token pair (and batch). Returns (loss, zero_rows)."""
    cos, zero = cosine_rows(projected, F0)
    return -cos.mean(), zero


def loss_total(pred, repa, w: LossWeights):
    return pred + w.lam * repa
