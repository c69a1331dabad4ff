"""Representation-alignment and sample-quality metrics plus a FLOPs accountant."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from regdesk.net import NetConfig
from regdesk.sample import sample
from regdesk.schedule import LinearSchedule, noise
from regdesk.synthdata import MixtureSpec, sample_batch
from regdesk.teacher import TeacherSpec, encode
from regdesk.train import entangle_signal

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


# --------------------------------------------------------------------------- kernels


def _centered_kernel(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    Xc = X - X.mean(axis=0, keepdims=True)
    K = Xc @ Xc.T
    # already doubly centred in exact arithmetic; recentre to wash out rounding
    K = K - K.mean(axis=0, keepdims=True)
    return K - K.mean(axis=1, keepdims=True)


def knn_mask(K: np.ndarray, k: int) -> np.ndarray:
    """mask[i, j] = True iff j is among the k largest kernel values of row i (j != i)."""
    n = K.shape[0]
    scores = K.astype(np.float64, copy=True)
    np.fill_diagonal(scores, -np.inf)
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    mask = np.zeros((n, n), dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def _align(Kc, Lc, mask):
    return float((Kc * Lc)[mask].sum())


def cknna(A: np.ndarray, B: np.ndarray, k: int = 10) -> float:
    """Centered kernel nearest-neighbour alignment of two feature sets (rows = samples).

    Linear kernels on column-centred features; a pair (i, j), i != j, counts
    only if j is a k-nearest neighbour of i under both kernels.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape[0] != B.shape[0]:
        raise MetricError(f"sample counts differ: {A.shape[0]} vs {B.shape[0]}")
    n = A.shape[0]
    if not 1 <= k <= n - 1:
        raise MetricError(f"need 1 <= k <= n-1 with n={n}, got k={k}")
    Kc, Lc = _centered_kernel(A), _centered_kernel(B)
    mk, ml = knn_mask(Kc, k), knn_mask(Lc, k)
    self_k = _align(Kc, Kc, mk)
    self_l = _align(Lc, Lc, ml)
    if self_k <= 0 or self_l <= 0:
        raise MetricError("zero self-alignment")
    return _align(Kc, Lc, mk & ml) / math.sqrt(self_k * self_l)


def cka(A: np.ndarray, B: np.ndarray, include_diagonal: bool = False) -> float:
    """Linear CKA. By default self-pairs are dropped, matching ``cknna`` at k = n-1."""
    Kc, Lc = _centered_kernel(A), _centered_kernel(B)
    mask = np.ones_like(Kc, dtype=bool)
    if not include_diagonal:
        np.fill_diagonal(mask, False)
    kk, ll = _align(Kc, Kc, mask), _align(Lc, Lc, mask)
    if kk <= 0 or ll <= 0:
        raise MetricError("zero self-alignment")
    return _align(Kc, Lc, mask) / math.sqrt(kk * ll)


# ------------------------------------------------------------------ semantic recovery


def cos_to_codebook(cls, teacher: TeacherSpec, label) -> np.ndarray | float:
    """Cosine between class-slot vector(s) and the codebook row of their label.

    Zero vectors score 0 and are logged.
    """
    cls = np.asarray(cls, dtype=np.float64)
    single = cls.ndim == 1
    cls = np.atleast_2d(cls)
    ref = teacher.codebook[np.broadcast_to(np.asarray(label), (cls.shape[0],))]
    denom = np.linalg.norm(cls, axis=1) * np.linalg.norm(ref, axis=1)
    zero = denom == 0
    if zero.any():
        log.warning("cos_to_codebook: %d zero-norm vector(s) scored as 0", int(zero.sum()))
    cos = np.where(zero, 0.0, (cls * ref).sum(1) / np.where(zero, 1.0, denom))
    return float(cos[0]) if single else cos


# ----------------------------------------------------------------- Frechet machinery


def _sym_sqrt(M: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _check_psd(C: np.ndarray, name: str, tol: float = 1e-8):
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    if C.shape[0] != C.shape[1]:
        raise MetricError(f"{name} must be square, got {C.shape}")
    scale = max(1.0, float(np.abs(C).max()))
    if not np.allclose(C, C.T, atol=tol * scale):
        raise MetricError(f"{name} is not symmetric")
    if np.linalg.eigvalsh(0.5 * (C + C.T)).min() < -tol * scale:
        raise MetricError(f"{name} is not positive semi-definite")
    return C


def frechet_distance(mean_a, cov_a, mean_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + Tr(A + B - 2 (A B)^{1/2}) for Gaussians N(mu_a, A), N(mu_b, B).

    Tr (A B)^{1/2} is evaluated as Tr (A^{1/2} B A^{1/2})^{1/2}, using
    symmetric eigendecompositions with negative eigenvalues clamped to 0.
    """
    A = _check_psd(cov_a, "cov_a")
    B = _check_psd(cov_b, "cov_b")
    mu = np.atleast_1d(np.asarray(mean_a, dtype=np.float64) - np.asarray(mean_b, dtype=np.float64))
    ra = _sym_sqrt(A)
    w = np.linalg.eigvalsh(ra @ B @ ra)
    cross = np.sqrt(np.clip(w, 0.0, None)).sum()
    return float(max(mu @ mu + np.trace(A) + np.trace(B) - 2.0 * cross, 0.0))


def gaussian_fit(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n < d + 1:
        raise MetricError(f"need at least d+1={d + 1} samples for a covariance, got {n}")
    return X.mean(0), np.cov(X, rowvar=False).reshape(d, d)


# ----------------------------------------------------------------------- FLOPs


@dataclass(frozen=True)
class FlopsShape:
    depth: int
    hidden: int
    N: int
    patch_dim: int  # p*p*L values per latent token
    D_vf: int
    mlp_ratio: int = 4
    freq_dim: int = 256

    @classmethod
    def from_net(cls, cfg: NetConfig) -> "FlopsShape":
        return cls(cfg.depth, cfg.hidden, cfg.N, cfg.channels, cfg.D_vf, cfg.mlp_ratio, cfg.freq_dim)

    @classmethod
    def xl(cls) -> "FlopsShape":
        """SiT-XL/2 on 32x32x4 latents (256 tokens) with a 768-wide teacher token."""
        return cls(depth=28, hidden=1152, N=256, patch_dim=16, D_vf=768)


def forward_macs(shape: FlopsShape, with_cls: bool) -> int:
    """Multiply-adds of one forward pass."""
    D, T = shape.hidden, shape.N + int(with_cls)
    per_block = 2 * T * T * D + 4 * T * D * D + 2 * shape.mlp_ratio * T * D * D + 6 * D * D
    total = shape.depth * per_block
    total += shape.N * shape.patch_dim * D  # patch embedding
    total += shape.freq_dim * D + D * D  # timestep MLP
    total += 2 * D * D + shape.N * D * shape.patch_dim  # final modulation + latent head
    if with_cls:
        total += 2 * shape.D_vf * D  # class-token projection in and head out
    return total


@dataclass
class FlopsReport:
    flops: int
    baseline_flops: int
    delta_pct: float


def flops_report(shape: FlopsShape | NetConfig, with_cls: bool) -> FlopsReport:
    if isinstance(shape, NetConfig):
        shape = FlopsShape.from_net(shape)
    base = forward_macs(shape, False)
    f = forward_macs(shape, with_cls)
    return FlopsReport(flops=f, baseline_flops=base, delta_pct=100.0 * (f - base) / base)


# --------------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    per_class_frechet: list[float]
    mean_frechet: float
    cls_cosine_mean: float
    cknna_by_layer: list[float]
    cknna_by_t: dict[str, float]
    n_samples: int
    k: int
    config_hash: str = ""
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "eval_summary.json", "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(out_dir / "eval_frechet.csv", "w") as fh:
            fh.write("label,frechet\n")
            for i, v in enumerate(self.per_class_frechet):
                fh.write(f"{i},{v!r}\n")
        with open(out_dir / "eval_cknna_layer.csv", "w") as fh:
            fh.write("layer,cknna\n")
            for i, v in enumerate(self.cknna_by_layer, start=1):
                fh.write(f"{i},{v!r}\n")
        with open(out_dir / "eval_cknna_t.csv", "w") as fh:
            fh.write("t,cknna\n")
            for t, v in self.cknna_by_t.items():
                fh.write(f"{t},{v!r}\n")
        return out_dir / "eval_summary.json"


def pooled_teacher_features(z: np.ndarray, teacher: TeacherSpec) -> np.ndarray:
    """Spatially averaged dense teacher features (label-independent)."""
    z = np.asarray(z, dtype=np.float64)
    tokens = z.reshape(z.shape[0], teacher.N, teacher.L)
    return np.tanh(tokens @ teacher.patch_proj).mean(axis=1)


def real_feature_moments(mixture: MixtureSpec, teacher: TeacherSpec, n: int = 4096, seed: int = 12345):
    """Per-class Gaussian fit of pooled teacher features on fresh real data."""
    rng = np.random.default_rng(seed)
    out = []
    for lab in range(mixture.num_classes):
        b = sample_batch(mixture, n, rng, labels=lab)
        out.append(gaussian_fit(pooled_teacher_features(b.z0, teacher)))
    return out


def per_class_frechet(z: np.ndarray, labels: np.ndarray, teacher: TeacherSpec, real_moments) -> list[float]:
    feats = pooled_teacher_features(z, teacher)
    res = []
    for lab, (mu_r, cov_r) in enumerate(real_moments):
        mu_g, cov_g = gaussian_fit(feats[labels == lab])
        res.append(frechet_distance(mu_g, cov_g, mu_r, cov_r))
    return res


def hidden_features(model, mixture: MixtureSpec, teacher: TeacherSpec, sched: LinearSchedule, t: float, n: int, seed: int):
    """Token-averaged hidden state of every block (class slot dropped) and pooled teacher features.

    Inputs are real samples noised to level ``t`` with the true label.
    """
    cfg = model.cfg
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % mixture.num_classes
    b = sample_batch(mixture, n, rng, labels=labels)
    feats = encode(b.z0, b.label, teacher)
    z_t = noise(b.z0, rng.standard_normal(b.z0.shape), t, sched)
    sig = entangle_signal(cfg, b.z0, feats)
    cls_t = None if sig is None else noise(sig, rng.standard_normal(sig.shape), t, sched)
    dt = cfg.torch_dtype
    with torch.no_grad():
        out = model(
            torch.from_numpy(z_t).to(dt),
            None if cls_t is None else torch.from_numpy(np.ascontiguousarray(cls_t)).to(dt),
            torch.full((n,), t, dtype=dt),
            torch.from_numpy(b.label),
            return_hiddens=True,
        )
    off = int(cfg.has_token_slot)
    layers = [h[:, off:].mean(1).double().numpy() for h in out.hiddens]
    return layers, feats.pooled()


def eval_run(
    state,
    mixture: MixtureSpec,
    teacher: TeacherSpec,
    scfg,
    sched: LinearSchedule,
    n_per_class: int = 256,
    k: int = 10,
    n_cknna: int = 512,
    t_grid=(0.1, 0.3, 0.5, 0.7, 0.9),
    config_hash: str = "",
    real_moments=None,
    ab_cls_guidance: bool = True,
) -> EvalReport:
    """Sample with EMA weights and score realism, class-slot semantics and alignment.

    When guidance is active and the model has a class channel, the run is
    repeated with class-channel guidance flipped and both outcomes land in
    ``extras["cls_guidance_ab"]``.
    """
    model = state.ema_model()
    cfg = model.cfg
    if n_per_class < teacher.D_vf + 1:
        raise MetricError(f"n_per_class={n_per_class} too small for a {teacher.D_vf}-dim covariance")
    labels = np.repeat(np.arange(mixture.num_classes), n_per_class)
    res = sample(model, labels, scfg, sched)
    if real_moments is None:
        real_moments = real_feature_moments(mixture, teacher)
    fd = per_class_frechet(res.z_final.reshape(len(labels), -1), labels, teacher, real_moments)

    def cls_cos(cls_final):
        if cls_final is not None and cls_final.shape[1] == teacher.D_vf:
            return float(np.mean(cos_to_codebook(cls_final, teacher, labels)))
        return float("nan")

    cos = cls_cos(res.cls_final)
    extras = {}
    if ab_cls_guidance and cfg.has_cls_channel and scfg.cfg_scale != 1.0:
        flipped = replace(scfg, guide_cls_channel=not scfg.guide_cls_channel)
        alt = sample(model, labels, flipped, sched)
        alt_fd = per_class_frechet(alt.z_final.reshape(len(labels), -1), labels, teacher, real_moments)
        runs = {scfg.guide_cls_channel: (float(np.mean(fd)), cos), flipped.guide_cls_channel: (float(np.mean(alt_fd)), cls_cos(alt.cls_final))}
        extras["cls_guidance_ab"] = {
            "guided": {"mean_frechet": runs[True][0], "cls_cosine_mean": runs[True][1]},
            "unguided": {"mean_frechet": runs[False][0], "cls_cosine_mean": runs[False][1]},
        }

    layers, ref = hidden_features(model, mixture, teacher, sched, 0.5, n_cknna, seed=777)
    by_layer = [cknna(h, ref, k) for h in layers]
    by_t = {}
    for t in t_grid:
        layers_t, ref_t = hidden_features(model, mixture, teacher, sched, float(t), n_cknna, seed=777)
        by_t[f"{t:g}"] = cknna(layers_t[cfg.align_depth - 1], ref_t, k)
    return EvalReport(
        per_class_frechet=fd,
        mean_frechet=float(np.mean(fd)),
        cls_cosine_mean=cos,
        cknna_by_layer=by_layer,
        cknna_by_t=by_t,
        n_samples=len(labels),
        k=k,
        config_hash=config_hash,
        extras=extras,
    )
