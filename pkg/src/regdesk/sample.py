"""Joint reverse-time integration of (latent, class slot) from pure noise.

Time runs on a uniform grid from t=1 (noise) to t=0 (data). The SDE sampler
uses Euler-Maruyama on

    dx = [v - 0.5 w_t s] dt + sqrt(w_t) dW,   dt < 0,

with the score recovered from the velocity; the ODE samplers integrate
dx = v dt. Every channel is advanced by the same rule on the same grid.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from regdesk.schedule import LinearSchedule, score_from_velocity
from regdesk.synthdata import MixtureSpec, oracle_velocity

SAMPLER_KINDS = ("sde_euler_maruyama", "ode_euler", "ode_heun")

Field = Callable[[list, float], list]


class SamplingError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    kind: str = "sde_euler_maruyama"
    steps: int = 50
    cfg_scale: float = 1.0
    cfg_interval: tuple[float, float] = (0.0, 1.0)
    guide_cls_channel: bool = True
    t_switch: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.cfg_interval = tuple(self.cfg_interval)
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"unknown sampler kind {self.kind!r}; expected one of {SAMPLER_KINDS}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        lo, hi = self.cfg_interval
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"cfg_interval must satisfy 0 <= lo <= hi <= 1, got {self.cfg_interval}")
        if self.cfg_scale < 1.0:
            raise ValueError("cfg_scale must be >= 1")

    def guided(self, t: float) -> bool:
        lo, hi = self.cfg_interval
        return self.cfg_scale != 1.0 and lo <= t <= hi

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cfg_interval"] = list(self.cfg_interval)
        return d


@dataclass
class SampleResult:
    z_final: np.ndarray
    cls_final: np.ndarray | None
    trajectory: list[list[np.ndarray]] = field(default_factory=list)
    times: np.ndarray | None = None


class _Streams:
    """One Gaussian stream per sample, keyed by (seed, sample index)."""

    def __init__(self, seed: int, ids: Sequence[int]):
        self.gens = [np.random.default_rng([int(seed), int(i)]) for i in ids]

    def normal(self, shape: tuple[int, ...]) -> np.ndarray:
        return np.stack([g.standard_normal(shape) for g in self.gens])


def integrate(
    velocity: Field,
    x1: list[np.ndarray],
    scfg: SamplerConfig,
    sched: LinearSchedule,
    streams: _Streams | None = None,
    keep_trajectory: bool = False,
) -> tuple[list[np.ndarray], list[list[np.ndarray]], np.ndarray]:
    """Integrate every channel in ``x1`` from t=1 to t=0 under ``velocity``."""
    ts = np.linspace(1.0, 0.0, scfg.steps + 1)
    xs = [np.array(x, dtype=np.float64) for x in x1]
    traj = [[x.copy() for x in xs]] if keep_trajectory else []
    for i in range(scfg.steps):
        t, t_next = float(ts[i]), float(ts[i + 1])
        dt = t_next - t
        vs = velocity(xs, t)
        if scfg.kind == "ode_euler":
            xs = [x + v * dt for x, v in zip(xs, vs)]
        elif scfg.kind == "ode_heun":
            pred = [x + v * dt for x, v in zip(xs, vs)]
            vs2 = velocity(pred, t_next)
            xs = [x + 0.5 * (v + v2) * dt for x, v, v2 in zip(xs, vs, vs2)]
        elif t_next < scfg.t_switch:
            # score is stiff as sigma -> 0: finish deterministically
            xs = [x + v * dt for x, v in zip(xs, vs)]
        else:
            w = sched.diffusion(t)
            new = []
            for x, v in zip(xs, vs):
                s = score_from_velocity(v, x, t, sched)
                xi = streams.normal(x.shape[1:])
                new.append(x + (v - 0.5 * w * s) * dt + np.sqrt(w * abs(dt)) * xi)
            xs = new
        if not all(np.isfinite(x).all() for x in xs):
            raise SamplingError(f"non-finite state at step {i} (t={t_next:.4f})")
        if keep_trajectory:
            traj.append([x.copy() for x in xs])
    return xs, traj, ts


def initial_noise(shapes: Sequence[tuple[int, ...]], streams: _Streams) -> list[np.ndarray]:
    return [streams.normal(s) for s in shapes]


class NetField:
    """Velocity field of a denoiser with classifier-free guidance over an interval.

    Conditional and null-label passes share one batched forward when guidance
    is active. ``last_readout`` keeps the most recent conditional class-slot
    output (used for the learnable-token ablation, which has no class state).
    """

    def __init__(self, model, labels: np.ndarray, scfg: SamplerConfig):
        self.model = model
        self.cfg = model.cfg
        self.scfg = scfg
        self.labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
        self.null = torch.full_like(self.labels, self.cfg.num_classes)
        self.last_readout = None

    def _forward(self, z, c, t, labels):
        dt = self.cfg.torch_dtype
        zt = torch.from_numpy(z).to(dt)
        ct = None if c is None else torch.from_numpy(c).to(dt)
        tt = torch.full((z.shape[0],), t, dtype=dt)
        with torch.no_grad():
            out = self.model(zt, ct, tt, labels)
        vz = out.v_z.double().numpy()
        vc = None if out.v_cls is None else out.v_cls.double().numpy()
        return vz, vc

    def __call__(self, xs: list, t: float) -> list:
        z = xs[0]
        c = xs[1] if self.cfg.has_cls_channel else None
        B = z.shape[0]
        if self.scfg.guided(t):
            zz = np.concatenate([z, z])
            cc = None if c is None else np.concatenate([c, c])
            vz, vc = self._forward(zz, cc, t, torch.cat([self.labels, self.null]))
            w = self.scfg.cfg_scale
            vz_cond, vz_null = vz[:B], vz[B:]
            v_z = vz_null + w * (vz_cond - vz_null)
            if vc is not None:
                vc_cond, vc_null = vc[:B], vc[B:]
                v_c = vc_null + w * (vc_cond - vc_null) if self.scfg.guide_cls_channel else vc_cond
                self.last_readout = vc_cond
        else:
            v_z, v_c = self._forward(z, c, t, self.labels)
            self.last_readout = v_c
        return [v_z, v_c] if c is not None else [v_z]


def sample(
    model,
    labels,
    scfg: SamplerConfig,
    sched: LinearSchedule,
    sample_ids: Sequence[int] | None = None,
    keep_trajectory: bool = False,
) -> SampleResult:
    """Generate one (latent, class slot) pair per entry of ``labels`` from N(0, I)."""
    cfg = model.cfg
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.min() < 0 or labels.max() > cfg.num_classes:
        raise ValueError(f"labels must lie in [0, {cfg.num_classes}]")
    ids = np.arange(len(labels)) if sample_ids is None else np.asarray(sample_ids)
    streams = _Streams(scfg.seed, ids)
    shapes = [(cfg.grid, cfg.grid, cfg.channels)]
    if cfg.has_cls_channel:
        shapes.append((cfg.cls_dim,))
    x1 = initial_noise(shapes, streams)
    model.eval()
    fld = NetField(model, labels, scfg)
    xs, traj, ts = integrate(fld, x1, scfg, sched, streams, keep_trajectory)
    if cfg.has_cls_channel:
        cls_final = xs[1]
    elif cfg.has_token_slot:
        cls_final = fld.last_readout
    else:
        cls_final = None
    return SampleResult(z_final=xs[0], cls_final=cls_final, trajectory=traj, times=ts)


def oracle_field(spec: MixtureSpec, sched: LinearSchedule, labels) -> Field:
    """Exact class-conditional velocity of the mixture, for flat latents [B, d]."""
    labels = np.asarray(labels)
    groups = [(lab, np.flatnonzero(labels == lab)) for lab in np.unique(labels)]

    def fld(xs, t):
        x = xs[0]
        v = np.empty_like(x)
        for lab, idx in groups:
            v[idx] = oracle_velocity(x[idx], t, spec, sched, label=int(lab))
        return [v]

    return fld


def sample_oracle(
    spec: MixtureSpec, labels, scfg: SamplerConfig, sched: LinearSchedule, sample_ids=None
) -> np.ndarray:
    """Sample the mixture with the analytic field standing in for a trained net."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    ids = np.arange(len(labels)) if sample_ids is None else np.asarray(sample_ids)
    streams = _Streams(scfg.seed, ids)
    x1 = initial_noise([(spec.dim,)], streams)
    xs, _, _ = integrate(oracle_field(spec, sched, labels), x1, scfg, sched, streams)
    return xs[0]
