"""Flat named-tensor checkpoint archive.

Layout (all integers little-endian):

    8 bytes   magic "IMPCKPT1"
    u32       JSON header length, then UTF-8 JSON:
              {"format_version", "epoch", "model_config", "train_config"}
    u32       tensor count
    per tensor:
        u16 name length, name UTF-8
        u8  rank, u32 dims...
        row-major float32 payload

Student and teacher tensors are stored under "student." / "teacher."
prefixes; Adam moments under "optim.". Non-float buffers (e.g. BatchNorm
step counters) are cast to float32 on write and restored to the
receiving tensor's dtype on load.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError
from .model import ImpactNet, ModelConfig

CHECKPOINT_MAGIC = b"IMPCKPT1"
FORMAT_VERSION = "1"


def _write_tensor(fh, name: str, array: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", array.ndim))
    for dim in array.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def _read_tensor(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", fh.read(2))
    name = fh.read(name_len).decode("utf-8")
    (rank,) = struct.unpack("<B", fh.read(1))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(count * 4), dtype="<f4")
    if data.size != count:
        raise ConfigError("truncated tensor payload")
    return name, data.reshape(shape)


def save_checkpoint(
    path,
    student: ImpactNet,
    teacher: ImpactNet,
    epoch: int = 0,
    train_config=None,
    optimizer: torch.optim.Optimizer | None = None,
) -> None:
    tensors: dict[str, np.ndarray] = {}
    for prefix, net in (("student", student), ("teacher", teacher)):
        for key, value in net.state_dict().items():
            tensors[f"{prefix}.{key}"] = value.detach().cpu().numpy()

    if optimizer is not None:
        param_names = [name for name, _ in student.named_parameters()]
        opt_state = optimizer.state_dict()["state"]
        for idx, name in enumerate(param_names):
            if idx not in opt_state:
                continue
            for moment, value in opt_state[idx].items():
                tensors[f"optim.{name}.{moment}"] = (
                    value.detach().cpu().numpy()
                    if torch.is_tensor(value)
                    else np.asarray(value, dtype=np.float32)
                )

    header = {
        "format_version": FORMAT_VERSION,
        "epoch": int(epoch),
        "model_config": dataclasses.asdict(student.config),
        "train_config": dataclasses.asdict(train_config) if train_config else None,
    }
    blob = json.dumps(header).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, array in tensors.items():
            _write_tensor(fh, name, array)


def load_checkpoint(path):
    """Returns (student, teacher, header dict, raw optim tensors)."""
    with open(path, "rb") as fh:
        if fh.read(8) != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path}: not a checkpoint archive")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise ConfigError(f"{path}: unsupported format {header.get('format_version')}")
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = dict(_read_tensor(fh) for _ in range(count))

    raw = dict(header["model_config"])
    raw["decoder_channels"] = tuple(raw["decoder_channels"])
    config = ModelConfig(**raw)

    nets = {}
    for prefix in ("student", "teacher"):
        net = ImpactNet(config)
        state = {}
        for key, reference in net.state_dict().items():
            stored = tensors.get(f"{prefix}.{key}")
            if stored is None:
                raise ConfigError(f"{path}: missing tensor {prefix}.{key}")
            if tuple(stored.shape) != tuple(reference.shape):
                raise ConfigError(f"{path}: shape mismatch for {prefix}.{key}")
            state[key] = torch.from_numpy(stored.copy()).to(reference.dtype)
        net.load_state_dict(state)
        nets[prefix] = net

    optim_tensors = {
        name[len("optim.") :]: value
        for name, value in tensors.items()
        if name.startswith("optim.")
    }
    return nets["student"], nets["teacher"], header, optim_tensors


def restore_optimizer(
    optimizer: torch.optim.Optimizer, student: ImpactNet, optim_tensors: dict
) -> None:
    """Load saved Adam moments into a freshly built optimizer."""
    if not optim_tensors:
        return
    param_names = [name for name, _ in student.named_parameters()]
    state = {}
    for idx, name in enumerate(param_names):
        entry = {}
        for moment in ("step", "exp_avg", "exp_avg_sq"):
            stored = optim_tensors.get(f"{name}.{moment}")
            if stored is None:
                continue
            tensor = torch.from_numpy(np.asarray(stored).copy())
            entry[moment] = tensor.reshape(()) if moment == "step" else tensor
        if entry:
            state[idx] = entry
    packed = optimizer.state_dict()
    packed["state"] = state
    optimizer.load_state_dict(packed)
