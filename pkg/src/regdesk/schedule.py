"""Interpolant x_t = alpha(t) x0 + sigma(t) eps with data at t=0 and noise at t=1.

Every function here is plain arithmetic on its inputs, so numpy arrays,
torch tensors and Python floats all work.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ScheduleError(ValueError):
    """Raised for out-of-range times or mismatched shapes."""


def _tmin_tmax(t):
    if hasattr(t, "detach"):
        t = t.detach().cpu().numpy()
    t = np.asarray(t, dtype=float)
    return float(t.min()), float(t.max())


def _check_t(t, lo=0.0, hi=1.0, open_lo=False):
    tmin, tmax = _tmin_tmax(t)
    if not np.isfinite(tmin) or not np.isfinite(tmax):
        raise ScheduleError(f"non-finite time {t!r}")
    if (tmin <= lo if open_lo else tmin < lo) or tmax > hi:
        bracket = "(" if open_lo else "["
        raise ScheduleError(f"t={t!r} outside {bracket}{lo}, {hi}]")


def _check_shapes(a, b, names=("x0", "eps")):
    sa, sb = tuple(np.shape(a)), tuple(np.shape(b))
    if sa != sb:
        raise ScheduleError(f"shape mismatch: {names[0]}{sa} vs {names[1]}{sb}")


@dataclass(frozen=True)
class LinearSchedule:
    """alpha = 1 - t, sigma = t, diffusion weight w = sigma."""

    t_min: float = 1e-4
    t_max: float = 1.0
    kind: str = "linear"

    def __post_init__(self):
        if self.kind != "linear":
            raise ScheduleError(f"unsupported schedule kind {self.kind!r}")
        if not (0.0 <= self.t_min < self.t_max <= 1.0):
            raise ScheduleError(f"bad time range [{self.t_min}, {self.t_max}]")

    def alpha(self, t):
        return 1.0 - t

    def sigma(self, t):
        return t * 1.0

    def d_alpha(self, t):
        return -1.0 + 0.0 * t

    def d_sigma(self, t):
        return 1.0 + 0.0 * t

    def diffusion(self, t):
        return self.sigma(t)

    def denominator(self, t):
        """alpha * d_sigma - d_alpha * sigma; identically 1 for the linear path."""
        return self.alpha(t) * self.d_sigma(t) - self.d_alpha(t) * self.sigma(t)


def noise(x0, eps, t, sched: LinearSchedule):
    """Forward interpolation alpha(t) x0 + sigma(t) eps.

    ``t`` may be a scalar or an array broadcastable against ``x0`` (one
    time per sample, shaped ``[B, 1, ...]``).
    """
    _check_shapes(x0, eps)
    _check_t(t)
    return sched.alpha(t) * x0 + sched.sigma(t) * eps


def velocity_target(x0, eps, t, sched: LinearSchedule):
    """Regression target d_alpha x0 + d_sigma eps (eps - x0 on the linear path)."""
    _check_shapes(x0, eps)
    return sched.d_alpha(t) * x0 + sched.d_sigma(t) * eps


def score_from_velocity(v, x, t, sched: LinearSchedule):
    """Convert a velocity into a score via the conditional-noise identity.

    s = -(alpha v - d_alpha x) / (sigma * (alpha d_sigma - d_alpha sigma)).
    The leading minus keeps this equal to -E[eps | x_t = x] / sigma.
    """
    _check_shapes(v, x, names=("v", "x"))
    _check_t(t, open_lo=True)
    num = sched.alpha(t) * v - sched.d_alpha(t) * x
    return -num / (sched.sigma(t) * sched.denominator(t))
