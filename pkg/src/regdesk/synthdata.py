"""Labeled Gaussian-mixture latent grids with closed-form oracle fields.

Each class owns ``components_per_class`` isotropic Gaussian components of
shared std ``s``. Under x_t = alpha x* + sigma eps the marginal of a
component is N(alpha mu_k, (alpha^2 s^2 + sigma^2) I), which gives exact
posterior means, velocities and scores at every noise level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from regdesk.schedule import LinearSchedule, ScheduleError, _check_t


@dataclass
class MixtureSpec:
    num_classes: int
    components_per_class: int
    grid: int  # patch-grid side C
    channels: int  # L
    means: np.ndarray  # [K, C*C*L]
    component_std: float
    seed: int = 0
    class_of_component: np.ndarray = field(default=None)
    radius: float | None = None

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        if self.class_of_component is None:
            self.class_of_component = np.repeat(
                np.arange(self.num_classes), self.components_per_class
            )
        self.class_of_component = np.asarray(self.class_of_component, dtype=np.int64)
        k = self.num_classes * self.components_per_class
        if self.means.shape != (k, self.dim):
            raise ValueError(f"means must be [{k}, {self.dim}], got {self.means.shape}")
        if self.component_std < 0:
            raise ValueError("component_std must be >= 0")

    @property
    def dim(self) -> int:
        return self.grid * self.grid * self.channels

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return (self.grid, self.grid, self.channels)

    @property
    def num_components(self) -> int:
        return self.means.shape[0]

    def min_separation(self) -> float:
        diff = self.means[:, None, :] - self.means[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        return float(dist.min()) if self.num_components > 1 else float("inf")

    def to_dict(self) -> dict:
        """Generating parameters only; means are re-derived from the seed."""
        return {
            "num_classes": self.num_classes,
            "components_per_class": self.components_per_class,
            "grid": self.grid,
            "channels": self.channels,
            "component_std": self.component_std,
            "seed": self.seed,
            "radius": self.radius,
        }


def make_mixture(
    num_classes: int = 8,
    components_per_class: int = 1,
    grid: int = 4,
    channels: int = 2,
    component_std: float = 0.15,
    seed: int = 0,
    radius: float | None = None,
) -> MixtureSpec:
    """Draw component means uniformly from a ball, then widen until separated.

    ``radius`` defaults to ``0.5 * sqrt(dim)`` so the data sit at roughly unit
    per-coordinate scale. Means are pushed apart until every pair is at least
    ``4 * component_std`` apart.
    """
    if num_classes < 2 and components_per_class < 2:
        raise ValueError("need at least two mixture components")
    d = grid * grid * channels
    k = num_classes * components_per_class
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal((k, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = rng.uniform(size=(k, 1)) ** (1.0 / d)
    means = direction * r * (0.5 * np.sqrt(d) if radius is None else radius)
    spec = MixtureSpec(
        num_classes, components_per_class, grid, channels, means, component_std, seed, radius=radius
    )
    need = 4.0 * component_std
    sep = spec.min_separation()
    if sep < need:
        spec.means = spec.means * (need / sep) * (1 + 1e-9)
    return spec


def mixture_from_dict(d: dict) -> MixtureSpec:
    return make_mixture(**d)


@dataclass
class SampleBatch:
    z0: np.ndarray  # [B, C, C, L]
    label: np.ndarray  # [B]
    component: np.ndarray  # [B]


def sample_batch(spec: MixtureSpec, batch: int, rng: np.random.Generator, labels=None) -> SampleBatch:
    """Draw ``batch`` clean latents; components uniform, or uniform within ``labels``."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if labels is None:
        comp = rng.integers(0, spec.num_components, size=batch)
    else:
        labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (batch,))
        pick = rng.integers(0, spec.components_per_class, size=batch)
        comp = labels * spec.components_per_class + pick
    eps = rng.standard_normal((batch, spec.dim))
    z = spec.means[comp] + spec.component_std * eps
    return SampleBatch(
        z0=z.reshape((batch,) + spec.grid_shape),
        label=spec.class_of_component[comp],
        component=comp,
    )


def _components(spec: MixtureSpec, label):
    if label is None:
        return spec.means
    return spec.means[spec.class_of_component == label]


def _posterior(x, t, spec, sched, label):
    """Responsibilities r [B,K] and per-sample marginal variance for flat x [B,d]."""
    mus = _components(spec, label)
    a, s = sched.alpha(t), sched.sigma(t)
    var = a * a * spec.component_std**2 + s * s
    if var <= 0:
        raise ScheduleError("degenerate marginal: zero variance at this t")
    resid = x[:, None, :] - a * mus[None, :, :]  # [B,K,d]
    logits = -(resid**2).sum(-1) / (2 * var)
    logits -= logits.max(axis=1, keepdims=True)
    r = np.exp(logits)
    r /= r.sum(axis=1, keepdims=True)
    return r, resid, var, mus


def _flat(x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    return (x[None] if single else x.reshape(x.shape[0], -1)), single, x.shape


def posterior_means(x, t, spec: MixtureSpec, sched: LinearSchedule, label=None):
    """E[x* | x_t = x] and E[eps | x_t = x], each shaped like x."""
    xf, single, shape = _flat(x)
    r, resid, var, mus = _posterior(xf, t, spec, sched, label)
    a, s = sched.alpha(t), sched.sigma(t)
    s2 = spec.component_std**2
    ex_k = mus[None] + (a * s2 / var) * resid
    eeps_k = (s / var) * resid
    ex = np.einsum("bk,bkd->bd", r, ex_k)
    eeps = np.einsum("bk,bkd->bd", r, eeps_k)
    if single:
        return ex[0], eeps[0]
    return ex.reshape(shape), eeps.reshape(shape)


def oracle_velocity(x, t, spec: MixtureSpec, sched: LinearSchedule, label=None):
    """Exact velocity d_alpha E[x*|x] + d_sigma E[eps|x]; ``label`` restricts to one class."""
    _check_t(t, 0.0, 1.0)
    ex, eeps = posterior_means(x, t, spec, sched, label)
    return sched.d_alpha(t) * ex + sched.d_sigma(t) * eeps


def oracle_score(x, t, spec: MixtureSpec, sched: LinearSchedule, label=None):
    """Exact score of the noised mixture marginal, -E[eps|x] / sigma."""
    _check_t(t, open_lo=True)
    xf, single, shape = _flat(x)
    r, resid, var, _ = _posterior(xf, t, spec, sched, label)
    sc = -np.einsum("bk,bkd->bd", r, resid) / var
    return sc[0] if single else sc.reshape(shape)


def log_density(x, t, spec: MixtureSpec, sched: LinearSchedule, label=None):
    """log p_t(x) of the (optionally class-restricted) mixture marginal."""
    xf, single, _ = _flat(x)
    mus = _components(spec, label)
    a, s = sched.alpha(t), sched.sigma(t)
    var = a * a * spec.component_std**2 + s * s
    d = xf.shape[1]
    sq = ((xf[:, None, :] - a * mus[None]) ** 2).sum(-1)
    logp = logsumexp(-sq / (2 * var), axis=1) - np.log(len(mus)) - 0.5 * d * np.log(2 * np.pi * var)
    return logp[0] if single else logp


def class_moments(spec: MixtureSpec, label: int):
    """Exact mean and covariance of the clean class-conditional distribution."""
    mus = _components(spec, label)
    mean = mus.mean(0)
    dev = mus - mean
    cov = dev.T @ dev / len(mus) + spec.component_std**2 * np.eye(spec.dim)
    return mean, cov
