"""Parameter initialisation, small layer helpers, and checkpoint I/O."""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optim import AdamState
from .tensor import Tensor, relu

CHECKPOINT_FORMAT_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, name: str | None = None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True, name=name)


def zeros(shape, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = x @ w
    return out if b is None else out + b


def mlp(x: Tensor, layers: list[tuple[Tensor, Tensor]]) -> Tensor:
    """ReLU between layers, none after the last."""
    for i, (w, b) in enumerate(layers):
        x = linear(x, w, b)
        if i < len(layers) - 1:
            x = relu(x)
    return x


@dataclass
class Checkpoint:
    module_name: str
    params: dict[str, np.ndarray]
    optimizer: AdamState | None = None
    extra: dict = field(default_factory=dict)
    format_version: int = CHECKPOINT_FORMAT_VERSION


def save_checkpoint(path, module_name: str, params: dict[str, Tensor],
                    optimizer: AdamState | None = None, extra: dict | None = None) -> Path:
    """Write a zip of ``meta.json`` plus one ``.npy`` per array.

    Entries carry a fixed timestamp so identical weights give identical bytes.
    """
    path = Path(path)
    names = list(params)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "module_name": module_name,
        "shapes": {k: list(params[k].shape) for k in names},
        "order": names,
        "optimizer": None,
        "extra": extra or {},
    }
    arrays = {f"param/{k}": params[k].data for k in names}
    if optimizer is not None:
        meta["optimizer"] = {
            "lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
            "eps": optimizer.eps, "step": optimizer.step, "has_moments": bool(optimizer.m),
        }
        for k, m, v in zip(names, optimizer.m, optimizer.v):
            arrays[f"adam_m/{k}"] = m
            arrays[f"adam_v/{k}"] = v
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("meta.json", _ZIP_EPOCH), json.dumps(meta, sort_keys=True, indent=1))
        for key, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr, dtype=np.float64), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(key + ".npy", _ZIP_EPOCH), buf.getvalue())
    return path


def load_checkpoint(path, module_name: str | None = None) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
        if module_name is not None and meta["module_name"] != module_name:
            raise ValueError(f"{path}: holds {meta['module_name']!r}, expected {module_name!r}")

        def read(key):
            return np.lib.format.read_array(io.BytesIO(zf.read(key + ".npy")), allow_pickle=False)

        names = meta["order"]
        params = {k: read(f"param/{k}") for k in names}
        for k in names:
            if list(params[k].shape) != meta["shapes"][k]:
                raise ValueError(f"{path}: shape mismatch for {k}")
        opt = None
        if meta["optimizer"] is not None:
            o = meta["optimizer"]
            opt = AdamState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"])
            if o["has_moments"]:
                opt.m = [read(f"adam_m/{k}") for k in names]
                opt.v = [read(f"adam_v/{k}") for k in names]
    return Checkpoint(meta["module_name"], params, opt, meta["extra"], meta["format_version"])
