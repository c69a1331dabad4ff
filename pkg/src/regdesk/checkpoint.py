"""Single-file checkpoints: magic, version, JSON header, then four float64 LE blocks.

Layout::

    b"REGDESK\\0"            8 bytes
    version                  uint32 LE
    header length            uint64 LE
    header                   UTF-8 JSON (net config, shape index, step, rng state, extras)
    params, ema, exp_avg, exp_avg_sq
                             each P values, IEEE-754 float64 little-endian
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from regdesk.net import DenoiserState, NetConfig, REGDenoiser, param_index, set_flat

MAGIC = b"REGDESK\0"
VERSION = 1
_BLOCKS = ("params", "ema", "exp_avg", "exp_avg_sq")


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, state: DenoiserState, rng_state: dict | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "net": state.cfg.to_dict(),
        "index": [[name, list(shape)] for name, shape in param_index(state.model)],
        "step": state.step,
        "rng_state": rng_state,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    vectors = [state.params, state.ema, state.exp_avg, state.exp_avg_sq]
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        for vec in vectors:
            fh.write(vec.detach().cpu().numpy().astype("<f8").tobytes())
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[DenoiserState, dict | None, dict]:
    """Returns (state, rng_state, extra)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a regdesk checkpoint")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    header = json.loads(raw[20 : 20 + hlen])
    cfg = NetConfig(**header["net"])
    model = REGDenoiser(cfg)
    index = [(n, tuple(s)) for n, s in header["index"]]
    if index != param_index(model):
        raise CheckpointError(f"{path}: parameter index does not match NetConfig")
    P = sum(int(np.prod(s)) for _, s in index)
    body = np.frombuffer(raw, dtype="<f8", offset=20 + hlen)
    if body.size != 4 * P:
        raise CheckpointError(f"{path}: expected {4 * P} float64 values, found {body.size}")
    blocks = {k: torch.from_numpy(body[i * P : (i + 1) * P].astype(np.float64)) for i, k in enumerate(_BLOCKS)}
    dt = cfg.torch_dtype
    set_flat(model, blocks["params"])
    state = DenoiserState(
        cfg,
        model,
        blocks["ema"].to(dt),
        blocks["exp_avg"].to(dt),
        blocks["exp_avg_sq"].to(dt),
        int(header["step"]),
    )
    return state, header["rng_state"], header["extra"]
