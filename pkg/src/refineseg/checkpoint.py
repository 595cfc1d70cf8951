"""Checkpoint archives: a text manifest of (path, shape, byte offset) records in
lexicographic order plus one little-endian float32 blob."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig, TrainConfig, read_flat_config, split_config, write_flat_config

MANIFEST = "manifest.txt"
BLOB = "params.bin"
CONFIG = "config.txt"


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: dict, path) -> Path:
    """Write ``params`` (name -> tensor/array) into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    chunks = []
    offset = 0
    for name in sorted(params):
        arr = np.asarray(params[name].detach().cpu() if isinstance(params[name], torch.Tensor) else params[name])
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"parameter {name} is not finite")
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"{name}\t{shape}\t{offset}")
        chunks.append(data)
        offset += len(data)
    (out / MANIFEST).write_text("\n".join(lines) + "\n")
    (out / BLOB).write_bytes(b"".join(chunks))
    return out


def load_checkpoint(path) -> dict:
    root = Path(path)
    blob = (root / BLOB).read_bytes()
    records = []
    for line in (root / MANIFEST).read_text().splitlines():
        if not line.strip():
            continue
        name, shape, offset = line.split("\t")
        dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
        records.append((name, dims, int(offset)))
    params = {}
    expected = 0
    for name, dims, offset in records:
        if offset != expected:
            raise CheckpointError(f"{name}: offset {offset} does not follow the previous record ({expected})")
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if offset + nbytes > len(blob):
            raise CheckpointError(f"blob too short: {name} needs bytes up to {offset + nbytes}, blob has {len(blob)}")
        arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset).reshape(dims)
        params[name] = torch.from_numpy(arr.astype(np.float32))
        expected = offset + nbytes
    if expected != len(blob):
        raise CheckpointError(f"blob length {len(blob)} does not match manifest total {expected}")
    return params


def save_model(model, path, train_config: TrainConfig | None = None) -> Path:
    out = save_checkpoint(dict(model.state_dict()), path)
    configs = [model.config] + ([train_config] if train_config is not None else [])
    write_flat_config(out / CONFIG, *configs)
    return out


def load_model(path, model_config: ModelConfig | None = None):
    from .model import RefinerModel

    root = Path(path)
    if model_config is None:
        raw = read_flat_config(root / CONFIG) if (root / CONFIG).exists() else {}
        model_fields = set(ModelConfig.__dataclass_fields__)
        model_config, _ = split_config({k: v for k, v in raw.items() if k in model_fields})
    model = RefinerModel(model_config)
    apply_params(model, load_checkpoint(root))
    return model


def apply_params(model, params: dict) -> None:
    state = model.state_dict()
    unknown = sorted(set(params) - set(state))
    if unknown:
        raise CheckpointError(f"unknown parameter path(s): {unknown[:5]}")
    missing = sorted(set(state) - set(params))
    if missing:
        raise CheckpointError(f"checkpoint lacks parameter(s): {missing[:5]}")
    for name, value in params.items():
        if tuple(state[name].shape) != tuple(value.shape):
            raise CheckpointError(f"{name}: shape {tuple(value.shape)} != model {tuple(state[name].shape)}")
    model.load_state_dict({k: v.to(state[k].dtype) for k, v in params.items()})
