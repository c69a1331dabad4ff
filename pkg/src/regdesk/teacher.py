"""Frozen synthetic feature encoder standing in for a pretrained vision backbone."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TeacherSpec:
    D_vf: int
    N: int
    L: int
    num_classes: int
    seed: int
    codebook: np.ndarray  # [num_classes, D_vf], orthonormal rows
    patch_proj: np.ndarray  # [L, D_vf]
    gamma: float = 0.25

    def to_dict(self) -> dict:
        return {
            "D_vf": self.D_vf,
            "N": self.N,
            "L": self.L,
            "num_classes": self.num_classes,
            "seed": self.seed,
            "gamma": self.gamma,
        }


@dataclass
class TeacherFeatures:
    f0: np.ndarray  # [..., N, D_vf]
    cls0: np.ndarray  # [..., D_vf]

    @property
    def F0(self) -> np.ndarray:
        """Patch rows first, class token last: [..., N+1, D_vf]."""
        return np.concatenate([self.f0, self.cls0[..., None, :]], axis=-2)

    def pooled(self) -> np.ndarray:
        """Spatial mean of the dense features (class token excluded)."""
        return self.f0.mean(axis=-2)


def make_teacher(D_vf: int, N: int, L: int, num_classes: int, seed: int = 1, gamma: float = 0.25) -> TeacherSpec:
    if num_classes > D_vf:
        raise ValueError("need D_vf >= num_classes for an orthonormal codebook")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((D_vf, num_classes)))
    codebook = np.ascontiguousarray(q.T)
    patch_proj = rng.standard_normal((L, D_vf)) / np.sqrt(L)
    codebook.setflags(write=False)
    patch_proj.setflags(write=False)
    return TeacherSpec(D_vf, N, L, num_classes, seed, codebook, patch_proj, gamma)


def teacher_from_dict(d: dict) -> TeacherSpec:
    return make_teacher(**d)


def _normalize(x):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def encode(z0: np.ndarray, label, spec: TeacherSpec) -> TeacherFeatures:
    """Dense features tanh(patch channels @ patch_proj) and a codebook-anchored class token.

    ``z0`` is one grid ``[C, C, L]`` or a batch ``[B, C, C, L]``; ``label`` is
    an int or an int array matching the batch.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.shape[-1] != spec.L or z0.shape[-3] * z0.shape[-2] != spec.N:
        raise ValueError(f"latent shape {z0.shape} does not match teacher (N={spec.N}, L={spec.L})")
    label = np.asarray(label, dtype=np.int64)
    if label.size and (label.min() < 0 or label.max() >= spec.num_classes):
        raise ValueError(f"label out of range [0, {spec.num_classes})")
    tokens = z0.reshape(z0.shape[:-3] + (spec.N, spec.L))
    f0 = np.tanh(tokens @ spec.patch_proj)
    cls0 = _normalize(spec.codebook[label] + spec.gamma * f0.mean(axis=-2))
    return TeacherFeatures(f0=f0, cls0=cls0)
