"""Immutable parameter snapshots and their on-disk container.

Binary layout (version 1)::

    b"SBLCKPT\\x01" | uint32 LE header length | UTF-8 JSON header | float64 LE params

The JSON header carries the model config, stage tag, seed, parameter count
and metric snapshot. ``.json`` paths use an all-JSON form instead.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .base import ModelHandle, model_from_config
from .errors import DataError, ShapeError

MAGIC = b"SBLCKPT\x01"
STAGES = ("init", "teacher", "clean_base", "poison_teacher", "student")


@dataclass(frozen=True, eq=False)
class Checkpoint:
    params: np.ndarray
    model_config: dict
    stage: str
    seed: int
    metrics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ShapeError(f"unknown stage {self.stage!r}")
        p = np.array(self.params, dtype=np.float64)
        n = model_from_config(self.model_config).n_params
        if p.shape != (n,):
            raise ShapeError(f"checkpoint has {p.shape} params, model needs {n}")
        p.flags.writeable = False
        object.__setattr__(self, "params", p)

    def model(self) -> ModelHandle:
        return model_from_config(self.model_config)

    def header(self) -> dict:
        return {"version": 1, "model_config": self.model_config, "stage": self.stage,
                "seed": int(self.seed), "n_params": int(self.params.size), "metrics": self.metrics}


def init_checkpoint(model: ModelHandle, seed: int) -> Checkpoint:
    from .rng import stream

    return Checkpoint(model.init_params(stream(seed, "init")), model.get_config(), "init", seed)


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    if path.suffix == ".json":
        doc = dict(ckpt.header(), params=ckpt.params.tolist())
        _atomic_write(path, json.dumps(doc, sort_keys=True).encode())
        return path
    head = json.dumps(ckpt.header(), sort_keys=True).encode()
    body = ckpt.params.astype("<f8").tobytes()
    _atomic_write(path, MAGIC + struct.pack("<I", len(head)) + head + body)
    return path


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint {path}")
    raw = path.read_bytes()
    if path.suffix == ".json":
        doc = json.loads(raw)
        params = np.asarray(doc.pop("params"), dtype=np.float64)
    else:
        if raw[:8] != MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", raw[8:12])
        doc = json.loads(raw[12:12 + hlen])
        params = np.frombuffer(raw[12 + hlen:], dtype="<f8").astype(np.float64)
    if params.size != doc["n_params"]:
        raise DataError(f"{path}: expected {doc['n_params']} params, found {params.size}")
    return Checkpoint(params, doc["model_config"], doc["stage"], doc["seed"], doc.get("metrics", {}))
