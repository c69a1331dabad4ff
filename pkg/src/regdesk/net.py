"""Small SiT-style denoiser over the token sequence [class slot; latent patches].

Timestep and label enter through adaLN modulation only. The class slot is an
ordinary input token: a linear projection of the noised entanglement signal
(or a trained constant for the learnable-token ablation). Block ``align_depth``
is tapped and projected into teacher space for the alignment loss.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

CLS_VARIANTS = (
    "teacher_cls",  # REG: noised teacher class token, predicted jointly
    "learnable_token",  # OLT: trained constant token, no velocity target
    "avg_teacher_feature",  # noised spatial mean of teacher patch features
    "avg_latent_feature",  # noised spatial mean of latent patch channels
    "none",  # plain SiT token sequence
)
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class NetConfig:
    grid: int = 4
    channels: int = 2
    D_vf: int = 32
    num_classes: int = 8
    depth: int = 4
    hidden: int = 64
    heads: int = 4
    align_depth: int = 2
    cls_variant: str = "teacher_cls"
    mlp_ratio: int = 4
    freq_dim: int = 64
    dtype: str = "float32"

    def __post_init__(self):
        if self.cls_variant not in CLS_VARIANTS:
            raise ValueError(f"unknown cls_variant {self.cls_variant!r}; expected one of {CLS_VARIANTS}")
        if not 1 <= self.align_depth <= self.depth:
            raise ValueError(f"align_depth must lie in [1, {self.depth}], got {self.align_depth}")
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def N(self) -> int:
        return self.grid * self.grid

    @property
    def has_cls_channel(self) -> bool:
        """A noised class-slot input with its own velocity target."""
        return self.cls_variant in ("teacher_cls", "avg_teacher_feature", "avg_latent_feature")

    @property
    def has_token_slot(self) -> bool:
        return self.cls_variant != "none"

    @property
    def cls_dim(self) -> int:
        if self.cls_variant == "avg_latent_feature":
            return self.channels
        return self.D_vf

    @property
    def align_cls_row(self) -> bool:
        """Whether the class slot has a teacher-space target row in the alignment loss."""
        return self.cls_variant in ("teacher_cls", "avg_teacher_feature")

    @property
    def tokens(self) -> int:
        return self.N + int(self.has_token_slot)

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelOutput:
    v_z: torch.Tensor  # [B, C, C, L]
    v_cls: torch.Tensor | None  # [B, cls_dim], or the OLT readout [B, D_vf]
    hidden_at_n: torch.Tensor  # [B, T, D]
    projected: torch.Tensor  # [B, T, D_vf]
    hiddens: list[torch.Tensor] = field(default_factory=list)


def sincos_2d(dim: int, grid: int) -> np.ndarray:
    """Fixed 2-D sine/cosine table, one row per grid cell in row-major order."""
    if dim % 4:
        raise ValueError("positional dim must be divisible by 4")
    omega = 1.0 / 10000 ** (np.arange(dim // 4) / (dim / 4.0))
    ys, xs = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")
    parts = []
    for pos in (ys.reshape(-1), xs.reshape(-1)):
        out = np.outer(pos, omega)
        parts += [np.sin(out), np.cos(out)]
    return np.concatenate(parts, axis=1)


def timestep_features(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, T, D = x.shape
        h = self.heads
        q, k, v = self.qkv(x).reshape(B, T, 3, h, D // h).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(D // h), dim=-1)
        return self.proj((att @ v).transpose(1, 2).reshape(B, T, D))


class Block(nn.Module):
    """Pre-norm attention + MLP with adaLN-Zero shift/scale/gate."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.SiLU(), nn.Linear(mlp_ratio * dim, dim)
        )
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))

    def forward(self, x, c):
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(c).chunk(6, dim=-1)
        x = x + g1[:, None] * self.attn(modulate(self.norm1(x), sh1, sc1))
        x = x + g2[:, None] * self.mlp(modulate(self.norm2(x), sh2, sc2))
        return x


class REGDenoiser(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.hidden
        self.x_embed = nn.Linear(cfg.channels, D)
        self.register_buffer("pos_embed", torch.from_numpy(sincos_2d(D, cfg.grid)))
        if cfg.has_cls_channel:
            self.cls_embed = nn.Linear(cfg.cls_dim, D)
        if cfg.cls_variant == "learnable_token":
            self.olt_token = nn.Parameter(torch.randn(D) * 0.02)
        if cfg.has_token_slot:
            self.cls_pos = nn.Parameter(torch.randn(D) * 0.02)
        self.t_mlp = nn.Sequential(nn.Linear(cfg.freq_dim, D), nn.SiLU(), nn.Linear(D, D))
        self.y_embed = nn.Embedding(cfg.num_classes + 1, D)  # last row = null class
        self.blocks = nn.ModuleList(Block(D, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.final_norm = nn.LayerNorm(D, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(D, 2 * D))
        self.head_z = nn.Linear(D, cfg.channels)
        if cfg.has_token_slot:
            self.head_cls = nn.Linear(D, cfg.cls_dim)
        self.projector = nn.Sequential(nn.Linear(D, D), nn.SiLU(), nn.Linear(D, cfg.D_vf))
        self._init_weights()
        self.to(cfg.torch_dtype)

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.y_embed.weight, std=0.02)
        for lin in (self.t_mlp[0], self.t_mlp[2]):
            nn.init.normal_(lin.weight, std=0.02)
        for blk in self.blocks:
            nn.init.zeros_(blk.ada[-1].weight)
            nn.init.zeros_(blk.ada[-1].bias)
        nn.init.zeros_(self.final_ada[-1].weight)
        nn.init.zeros_(self.final_ada[-1].bias)
        nn.init.zeros_(self.head_z.weight)
        if self.cfg.has_token_slot:
            if self.cfg.has_cls_channel:
                nn.init.zeros_(self.head_cls.weight)
            else:
                # OLT readout: never trained by a target, so keep a generic random map
                nn.init.normal_(self.head_cls.weight, std=1.0 / math.sqrt(self.cfg.hidden))
            nn.init.zeros_(self.head_cls.bias)

    def forward(self, z_t, cls_t, t, label, return_hiddens: bool = False) -> ModelOutput:
        cfg = self.cfg
        B = z_t.shape[0]
        if tuple(z_t.shape[1:]) != (cfg.grid, cfg.grid, cfg.channels):
            raise ValueError(f"z_t must be [B, {cfg.grid}, {cfg.grid}, {cfg.channels}], got {tuple(z_t.shape)}")
        if cfg.has_cls_channel:
            if cls_t is None:
                raise ValueError(f"cls_variant={cfg.cls_variant} needs a class-slot input")
            if tuple(cls_t.shape) != (B, cfg.cls_dim):
                raise ValueError(f"cls_t must be [{B}, {cfg.cls_dim}], got {tuple(cls_t.shape)}")
        elif cls_t is not None:
            raise ValueError(f"cls_variant={cfg.cls_variant} takes no class-slot input")
        t = torch.as_tensor(t, dtype=z_t.dtype).reshape(-1).expand(B)
        label = torch.as_tensor(label, dtype=torch.long).reshape(-1).expand(B)

        x = self.x_embed(z_t.reshape(B, cfg.N, cfg.channels)) + self.pos_embed
        if cfg.has_cls_channel:
            tok = self.cls_embed(cls_t)
        elif cfg.cls_variant == "learnable_token":
            tok = self.olt_token.expand(B, -1)
        if cfg.has_token_slot:
            x = torch.cat([(tok + self.cls_pos)[:, None], x], dim=1)

        c = self.t_mlp(timestep_features(t, cfg.freq_dim)) + self.y_embed(label)
        hiddens = []
        for blk in self.blocks:
            x = blk(x, c)
            hiddens.append(x)
        h_n = hiddens[cfg.align_depth - 1]

        shift, scale = self.final_ada(c).chunk(2, dim=-1)
        y = modulate(self.final_norm(x), shift, scale)
        off = int(cfg.has_token_slot)
        v_z = self.head_z(y[:, off:]).reshape(z_t.shape)
        v_cls = self.head_cls(y[:, 0]) if cfg.has_token_slot else None
        return ModelOutput(
            v_z=v_z,
            v_cls=v_cls,
            hidden_at_n=h_n,
            projected=self.projector(h_n),
            hiddens=hiddens if return_hiddens else [],
        )


def param_index(model: nn.Module) -> list[tuple[str, tuple[int, ...]]]:
    """Named shapes in flattening order."""
    return [(name, tuple(p.shape)) for name, p in model.named_parameters()]


def get_flat(model: nn.Module) -> torch.Tensor:
    return torch.nn.utils.parameters_to_vector(model.parameters()).detach().clone()


def set_flat(model: nn.Module, vec: torch.Tensor) -> None:
    with torch.no_grad():
        torch.nn.utils.vector_to_parameters(vec.to(next(model.parameters()).dtype), model.parameters())


@dataclass
class DenoiserState:
    """Trainable weights plus EMA shadow and AdamW moments, all as flat vectors."""

    cfg: NetConfig
    model: REGDenoiser
    ema: torch.Tensor
    exp_avg: torch.Tensor
    exp_avg_sq: torch.Tensor
    step: int = 0

    @property
    def params(self) -> torch.Tensor:
        return get_flat(self.model)

    def ema_model(self) -> REGDenoiser:
        m = REGDenoiser(self.cfg)
        set_flat(m, self.ema)
        m.pos_embed.copy_(self.model.pos_embed)
        m.eval()
        return m


def init_state(cfg: NetConfig, seed: int) -> DenoiserState:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = REGDenoiser(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    flat = get_flat(model)
    return DenoiserState(cfg, model, flat.clone(), torch.zeros_like(flat), torch.zeros_like(flat), 0)


def backward(state: DenoiserState, loss_closure: Callable[[REGDenoiser], torch.Tensor]) -> torch.Tensor:
    """Flat gradient of the scalar returned by ``loss_closure(model)``."""
    params = list(state.model.parameters())
    loss = loss_closure(state.model)
    if loss.dim() != 0:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1) for p, g in zip(params, grads)])
