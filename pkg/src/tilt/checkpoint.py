"""Single-file checkpoints: magic, version, JSON header, raw float32 payloads.

Layout::

    b"TILTCKPT" | uint32 version | uint64 header length | header JSON | payload

All integers and floats are little-endian. The header lists every tensor
with its shape and byte offset into the payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .model import TiltConfig
from .numerics import OptimizerState

MAGIC = b"TILTCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointNameError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: TiltConfig
    tensors: dict[str, torch.Tensor]
    optimizer: OptimizerState | None = None
    run: dict = field(default_factory=dict)


def _le_f32(t: torch.Tensor) -> bytes:
    return t.detach().to(torch.float32).contiguous().numpy().astype("<f4", copy=False).tobytes()


def save_checkpoint(
    path: str | Path,
    model: nn.Module,
    config: TiltConfig,
    optimizer: OptimizerState | None = None,
    run: dict | None = None,
) -> None:
    entries = []
    chunks = []
    offset = 0

    def add(name: str, t: torch.Tensor) -> None:
        nonlocal offset
        data = _le_f32(t)
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)

    for name, t in model.state_dict().items():
        add(name, t)
    opt_header = None
    if optimizer is not None:
        opt_header = {
            "lr": optimizer.lr,
            "betas": list(optimizer.betas),
            "eps": optimizer.eps,
            "weight_decay": optimizer.weight_decay,
            "step": optimizer.step,
        }
        for name in sorted(optimizer.exp_avg):
            add(f"optim.exp_avg.{name}", optimizer.exp_avg[name])
            add(f"optim.exp_avg_sq.{name}", optimizer.exp_avg_sq[name])

    header = json.dumps(
        {"config": config.to_dict(), "tensors": entries, "optimizer": opt_header, "run": run or {}},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointTruncatedError(f"{path}: {len(raw)} bytes is shorter than the file prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {VERSION}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise CheckpointTruncatedError(f"{path}: header cut short")
    header = json.loads(raw[_PREFIX.size : start].decode("utf-8"))
    payload = memoryview(raw)[start:]

    tensors: dict[str, torch.Tensor] = {}
    for e in header["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointTruncatedError(f"{path}: payload for {e['name']} is cut short")
        count = int(np.prod(e["shape"], dtype=np.int64))
        if count * 4 != e["nbytes"]:
            raise CheckpointShapeError(f"{path}: {e['name']} declares shape {e['shape']} but {e['nbytes']} bytes")
        arr = np.frombuffer(payload[e["offset"] : end], dtype="<f4").reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.float32))

    optimizer = None
    if header.get("optimizer"):
        o = header["optimizer"]
        optimizer = OptimizerState(o["lr"], tuple(o["betas"]), o["eps"], o["weight_decay"], o["step"])
        for name in list(tensors):
            if name.startswith("optim.exp_avg."):
                optimizer.exp_avg[name[len("optim.exp_avg.") :]] = tensors.pop(name)
            elif name.startswith("optim.exp_avg_sq."):
                optimizer.exp_avg_sq[name[len("optim.exp_avg_sq.") :]] = tensors.pop(name)
    return Checkpoint(TiltConfig.from_dict(header["config"]), tensors, optimizer, header.get("run", {}))


def load_into(model: nn.Module, ckpt: Checkpoint) -> None:
    """Copy checkpoint tensors into ``model``; names and shapes must match exactly."""
    own = model.state_dict()
    extra = sorted(set(ckpt.tensors) - set(own))
    if extra:
        raise CheckpointNameError(f"checkpoint has unknown tensors: {', '.join(extra)}")
    missing = sorted(set(own) - set(ckpt.tensors))
    if missing:
        raise CheckpointNameError(f"checkpoint lacks tensors: {', '.join(missing)}")
    for name, t in ckpt.tensors.items():
        if tuple(t.shape) != tuple(own[name].shape):
            raise CheckpointShapeError(
                f"{name}: checkpoint shape {tuple(t.shape)}, model expects {tuple(own[name].shape)}"
            )
    with torch.no_grad():
        for name, t in ckpt.tensors.items():
            own[name].copy_(t.to(own[name].dtype))


def config_mismatch(a: TiltConfig, b: TiltConfig) -> list[str]:
    da, db = a.to_dict(), b.to_dict()
    return sorted(k for k in da if da[k] != db.get(k))
