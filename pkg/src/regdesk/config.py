"""Run configuration: one YAML document describing a complete run.

Grammar (YAML mapping, all keys optional except ``version``)::

    version: 1
    run_name: str
    output_dir: str
    mixture:  {num_classes, components_per_class, grid, channels, component_std, seed, radius}
    teacher:  {D_vf, seed, gamma}
    net:      NetConfig fields (grid/channels/num_classes/D_vf are taken from mixture/teacher)
    train:    TrainConfig fields, with loss_weights: {beta, lam}
    sampler:  SamplerConfig fields
    schedule: {t_min, t_max}
    eval:     {n_per_class, k, n_cknna}

The canonical form is the fully-populated mapping (minus ``output_dir``)
dumped as sorted compact JSON; its SHA-256 prefix names the run directory.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from regdesk.net import NetConfig
from regdesk.sample import SamplerConfig
from regdesk.schedule import LinearSchedule
from regdesk.synthdata import MixtureSpec, make_mixture
from regdesk.teacher import TeacherSpec, make_teacher
from regdesk.train import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


_MIXTURE_DEFAULTS = dict(num_classes=8, components_per_class=1, grid=4, channels=2, component_std=0.15, seed=0, radius=None)
_TEACHER_DEFAULTS = dict(D_vf=32, seed=1, gamma=0.25)
_EVAL_DEFAULTS = dict(n_per_class=256, k=10, n_cknna=512)


@dataclass
class RunConfig:
    run_name: str = "reg"
    output_dir: str = "runs"
    mixture: dict = field(default_factory=lambda: dict(_MIXTURE_DEFAULTS))
    teacher: dict = field(default_factory=lambda: dict(_TEACHER_DEFAULTS))
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    schedule: dict = field(default_factory=lambda: {"t_min": 1e-4, "t_max": 1.0})
    eval: dict = field(default_factory=lambda: dict(_EVAL_DEFAULTS))
    version: int = CONFIG_VERSION

    def __post_init__(self):
        unknown = set(self.mixture) - set(_MIXTURE_DEFAULTS)
        unknown |= set(self.teacher) - set(_TEACHER_DEFAULTS)
        unknown |= set(self.eval) - set(_EVAL_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        self.mixture = {**_MIXTURE_DEFAULTS, **self.mixture}
        self.teacher = {**_TEACHER_DEFAULTS, **self.teacher}
        self.eval = {**_EVAL_DEFAULTS, **self.eval}
        # the net's data-facing dims are slaved to the world it models
        m = self.mixture
        self.net.grid = m["grid"]
        self.net.channels = m["channels"]
        self.net.num_classes = m["num_classes"]
        self.net.D_vf = self.teacher["D_vf"]
        self.net.__post_init__()

    # -- derived objects
    def build_mixture(self) -> MixtureSpec:
        return make_mixture(**self.mixture)

    def build_teacher(self) -> TeacherSpec:
        m = self.mixture
        return make_teacher(N=m["grid"] ** 2, L=m["channels"], num_classes=m["num_classes"], **self.teacher)

    def build_schedule(self) -> LinearSchedule:
        return LinearSchedule(**self.schedule)

    # -- serialization
    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "run_name": self.run_name,
            "output_dir": self.output_dir,
            "mixture": dict(self.mixture),
            "teacher": dict(self.teacher),
            "net": self.net.to_dict(),
            "train": self.train.to_dict(),
            "sampler": self.sampler.to_dict(),
            "schedule": dict(self.schedule),
            "eval": dict(self.eval),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = copy.deepcopy(d)
        version = d.pop("version", None)
        if version != CONFIG_VERSION:
            raise ConfigError(f"config version {version!r} does not match supported version {CONFIG_VERSION}")
        known = ("run_name", "output_dir", "mixture", "teacher", "net", "train", "sampler", "schedule", "eval")
        extra = sorted(set(d) - set(known))
        if extra:
            raise ConfigError(f"unknown top-level config keys: {extra}")
        try:
            return cls(
                run_name=d.get("run_name", "reg"),
                output_dir=d.get("output_dir", "runs"),
                mixture=d.get("mixture") or {},
                teacher=d.get("teacher") or {},
                net=NetConfig(**(d.get("net") or {})),
                train=TrainConfig(**(d.get("train") or {})),
                sampler=SamplerConfig(**(d.get("sampler") or {})),
                schedule=d.get("schedule") or {"t_min": 1e-4, "t_max": 1.0},
                eval=d.get("eval") or {},
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def canonical(self) -> str:
        # where artifacts land does not change what they are
        d = self.to_dict()
        del d["output_dir"]
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:12]

    def run_dir(self, out: str | Path | None = None) -> Path:
        return Path(out or self.output_dir) / f"{self.run_name}-{self.config_hash()}"

    def dump(self, path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False))
        return path


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}".replace("\n", " ")) from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(doc)
