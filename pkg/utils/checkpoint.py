#!/usr/bin/env python3
"""
Version-tagged model checkpoints.

A checkpoint is a zip archive with:
  meta.json            format tag, UnetConfig, role, precision assignment,
                       frozen QuantParams and observer state
  params/<name>.npy    one array per parameter

Members are written in sorted order with a fixed timestamp, so saving the
same model twice gives byte-identical files.
"""

from __future__ import annotations

import io
import json
import logging
import os
import zipfile
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from errors import CheckpointError
from numerics import ObserverState, PrecisionFormat, QuantParams
from tensor import Tensor
from unet import UnetConfig, UnetModel

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "qdiff-checkpoint/1"
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class ObserverRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    running_max: Optional[float] = None
    momentum: float = 0.99
    count: int = 0


class CheckpointMeta(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format: str = CHECKPOINT_FORMAT
    role: str
    config: UnetConfig
    param_names: List[str]
    precision: Dict[str, PrecisionFormat] = Field(default_factory=dict)
    quant_enabled: bool = False
    act_params: Dict[str, QuantParams] = Field(default_factory=dict)
    weight_params: Dict[str, QuantParams] = Field(default_factory=dict)
    observers: Dict[str, ObserverRecord] = Field(default_factory=dict)


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_model(model: UnetModel, path: str):
    """Write `model` to `path` (parent directories are created)."""
    meta = CheckpointMeta(
        role=model.role,
        config=model.config,
        param_names=list(model.params),
        precision=dict(sorted(model.precision.items())),
        quant_enabled=model.quant_enabled,
        act_params=dict(sorted(model.act_params.items())),
        weight_params=dict(sorted(model.weight_params.items())),
        observers={
            name: ObserverRecord(running_max=obs.running_max, momentum=obs.momentum, count=obs.count)
            for name, obs in sorted(model.observers.items())
        },
    )
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_member("meta.json"), json.dumps(meta.model_dump(mode="json"), sort_keys=True, indent=2))
        for name in sorted(model.params):
            zf.writestr(_member(f"params/{name}.npy"), _npy_bytes(model.params[name].data))
    logger.info(f"Saved {model.role} checkpoint to {path}")


def load_model(path: str) -> UnetModel:
    """
    Read a checkpoint written by save_model.

    Raises:
        CheckpointError: File missing, not a checkpoint, wrong format version
            or inconsistent contents
    """
    if not os.path.isfile(path):
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path, "r") as zf:
            try:
                raw = json.loads(zf.read("meta.json"))
            except KeyError:
                raise CheckpointError(f"{path} has no meta.json member")
            if not isinstance(raw, dict) or raw.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
            meta = CheckpointMeta.model_validate(raw)
            params: Dict[str, Tensor] = {}
            for name in meta.param_names:
                try:
                    arr = np.load(io.BytesIO(zf.read(f"params/{name}.npy")), allow_pickle=False)
                except KeyError:
                    raise CheckpointError(f"{path} is missing parameter {name}")
                params[name] = Tensor(arr, requires_grad=True, name=name, dtype=arr.dtype)
    except CheckpointError:
        raise
    except ValidationError as e:
        raise CheckpointError(f"Invalid checkpoint metadata in {path}: {e}")
    except (zipfile.BadZipFile, json.JSONDecodeError, ValueError, OSError) as e:
        raise CheckpointError(f"Corrupt checkpoint {path}: {e}")

    try:
        model = UnetModel(meta.config, params, role=meta.role)
    except ValueError as e:
        raise CheckpointError(f"Checkpoint {path} does not match its config: {e}")
    model.precision = dict(meta.precision)
    model.quant_enabled = meta.quant_enabled
    model.act_params = dict(meta.act_params)
    model.weight_params = dict(meta.weight_params)
    model.observers = {
        name: ObserverState(running_max=rec.running_max, momentum=rec.momentum, count=rec.count)
        for name, rec in meta.observers.items()
    }
    logger.info(f"Loaded {model.role} checkpoint from {path}")
    return model
