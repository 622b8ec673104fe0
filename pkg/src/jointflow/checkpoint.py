"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"JFMAPCK\\0"
    8       4     format version (uint32), currently 1
    12      4     header length H in bytes (uint32)
    16      H     header, UTF-8 JSON:
                    architecture       model constructor arguments + div_scale
                    stage, step        stage tag and optimizer step count
                    div_head_trained   whether a divergence objective has run
                    param_layout       [[name, shape], ...] in flattening order
                    n_params           total scalar count N
                    optimizer          null or {step, lr, beta1, beta2, eps}
                    rng                named RNG stream states
                    extra              free-form metadata
                    payload_crc32      CRC-32 of the payload bytes
    16+H    8N    parameters, float64, concatenated in param_layout order
    ...     8N    Adam first moments   (only when optimizer is not null)
    ...     8N    Adam second moments  (only when optimizer is not null)
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

from .autodiff import DTYPE, AdamState
from .model import JointFlowMapModel

MAGIC = b"JFMAPCK\0"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, corrupt, or incompatible checkpoint."""


@dataclass
class Checkpoint:
    model: JointFlowMapModel
    stage: str
    step: int
    div_head_trained: bool = False
    adam: Optional[AdamState] = None
    rng: dict[str, Any] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)


def _flatten(tensors) -> np.ndarray:
    if not tensors:
        return np.zeros(0, dtype="<f8")
    return np.concatenate([t.detach().reshape(-1).numpy().astype("<f8") for t in tensors])


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    model = ckpt.model
    named = list(model.named_parameters())
    layout = [[name, list(p.shape)] for name, p in named]
    params = [p for _, p in named]
    payload = _flatten(params).tobytes()
    opt = None
    if ckpt.adam is not None:
        opt = {"step": ckpt.adam.step, **ckpt.adam.hyperparameters()}
        payload += _flatten(ckpt.adam.exp_avg).tobytes() + _flatten(ckpt.adam.exp_avg_sq).tobytes()
    header = {
        "architecture": {**model.architecture(), "init_seed": model.init_seed},
        "stage": ckpt.stage,
        "step": int(ckpt.step),
        "div_head_trained": bool(ckpt.div_head_trained),
        "param_layout": layout,
        "n_params": int(sum(p.numel() for p in params)),
        "optimizer": opt,
        "rng": ckpt.rng,
        "extra": ckpt.extra,
        "payload_crc32": zlib.crc32(payload),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)


def read_header(path) -> tuple[dict[str, Any], bytes]:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, expected {VERSION}")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header (format version {version}): {exc}") from exc
    payload = data[16 + hlen:]
    if zlib.crc32(payload) != header.get("payload_crc32"):
        raise CheckpointError(f"{path}: payload checksum mismatch (format version {version})")
    return header, payload


def load_checkpoint(path) -> Checkpoint:
    header, payload = read_header(path)
    arch = dict(header["architecture"])
    div_scale = arch.pop("div_scale", 1.0)
    model = JointFlowMapModel(**arch, div_scale=div_scale)
    n = header["n_params"]
    flat = np.frombuffer(payload, dtype="<f8")
    expected = n * (3 if header["optimizer"] else 1)
    if flat.size != expected:
        raise CheckpointError(f"{path}: payload holds {flat.size} values, expected {expected}")
    named = dict(model.named_parameters())
    if [k for k, _ in header["param_layout"]] != list(named):
        raise CheckpointError(f"{path}: parameter layout does not match the architecture")

    def unflatten(block: np.ndarray) -> list[torch.Tensor]:
        out, off = [], 0
        for _, shape in header["param_layout"]:
            size = int(np.prod(shape)) if shape else 1
            out.append(torch.tensor(block[off:off + size].reshape(shape), dtype=DTYPE))
            off += size
        return out

    with torch.no_grad():
        for p, v in zip(named.values(), unflatten(flat[:n])):
            p.copy_(v)
    adam = None
    if header["optimizer"]:
        o = header["optimizer"]
        adam = AdamState(
            exp_avg=unflatten(flat[n:2 * n]), exp_avg_sq=unflatten(flat[2 * n:]),
            lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"],
        )
    return Checkpoint(
        model=model, stage=header["stage"], step=header["step"],
        div_head_trained=header["div_head_trained"], adam=adam,
        rng=header.get("rng", {}), extra=header.get("extra", {}),
    )
