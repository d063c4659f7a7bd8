#!/usr/bin/env python3
"""
Precision formats and quantization math.

BF16 is emulated by rounding float32 storage to the nearest bfloat16 value
(ties to even); compute stays float32. INT8 is symmetric with range
[-127, 127] and zero point 0: per output channel for weights, per tensor for
activations. fake_quant_ste puts the quantize/dequantize pair on the tape
with a clipped straight-through gradient.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from tensor import Tensor, record_op

logger = logging.getLogger(__name__)

QMAX = 127
SCALE_FLOOR = 1e-12
OBSERVER_MOMENTUM = 0.99


class PrecisionFormat(str, Enum):
    FP32 = "fp32"
    BF16 = "bf16"
    INT8 = "int8"

    @classmethod
    def parse(cls, value) -> 'PrecisionFormat':
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"Unknown precision format {value!r}; expected one of fp32, bf16, int8")


class QuantParams(BaseModel):
    """Symmetric INT8 parameters: one scale per tensor, or one per slice along `axis`."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    scale: List[float] = Field(..., min_length=1)
    zero_point: int = 0
    axis: Optional[int] = None

    @field_validator("scale")
    @classmethod
    def _positive(cls, v: List[float]) -> List[float]:
        if any(not (s > 0) for s in v):
            raise ValueError("every scale must be > 0")
        return v

    @field_validator("zero_point")
    @classmethod
    def _symmetric(cls, v: int) -> int:
        if v != 0:
            raise ValueError("only symmetric quantization (zero_point=0) is supported")
        return v

    @property
    def per_channel(self) -> bool:
        return self.axis is not None

    def scale_array(self, ndim: int, dtype=np.float32) -> np.ndarray:
        """Scales shaped to broadcast against a tensor of rank `ndim`."""
        scales = np.asarray(self.scale, dtype=dtype)
        if self.axis is None:
            return scales.reshape(())
        shape = [1] * ndim
        shape[self.axis] = scales.size
        return scales.reshape(shape)


# =========================
#  BF16
# =========================
def bf16_round(x: np.ndarray) -> np.ndarray:
    """Round float32 values to the nearest bfloat16 value, ties to even; NaN and Inf pass through."""
    arr = np.asarray(x)
    f32 = np.ascontiguousarray(arr, dtype=np.float32)
    bits = f32.view(np.uint32).astype(np.uint64)
    rounded = ((bits + 0x7FFF + ((bits >> 16) & 1)) & 0xFFFF0000).astype(np.uint32).view(np.float32)
    out = np.where(np.isfinite(f32), rounded, f32).reshape(arr.shape)
    return out.astype(arr.dtype if arr.dtype.kind == "f" else np.float32, copy=False)


# =========================
#  INT8
# =========================
def calibrate(x: np.ndarray, axis: Optional[int] = None) -> QuantParams:
    """
    Symmetric calibration: scale = max|x| / 127, floored at 1e-12.

    Args:
        x: Values to cover
        axis: Channel axis for per-channel params (None for per tensor)
    """
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("calibrate needs a nonempty tensor")
    if axis is None:
        amax = np.array([np.max(np.abs(x))], dtype=np.float64)
    else:
        axis = axis % x.ndim
        other = tuple(i for i in range(x.ndim) if i != axis)
        amax = np.max(np.abs(x), axis=other).astype(np.float64).reshape(-1)
    scale = np.maximum(amax / QMAX, SCALE_FLOOR)
    return QuantParams(scale=[float(s) for s in scale], axis=axis)


def quantize_int8(x: np.ndarray, params: QuantParams) -> np.ndarray:
    """q = clip(round_half_even(x / scale), -127, 127) as int8."""
    x = np.asarray(x)
    scale = params.scale_array(x.ndim, dtype=np.float32)
    q = np.rint(x.astype(np.float32, copy=False) / scale)
    return np.clip(q, -QMAX, QMAX).astype(np.int8)


def dequantize(q: np.ndarray, params: QuantParams, dtype=np.float32) -> np.ndarray:
    """q * scale in `dtype`; float64 keeps the scales exactly as stored."""
    scale = params.scale_array(np.ndim(q), dtype=dtype)
    return np.asarray(q).astype(dtype) * scale


def fake_quant(x: np.ndarray, params: QuantParams) -> np.ndarray:
    return dequantize(quantize_int8(x, params), params).astype(np.asarray(x).dtype, copy=False)


def fake_quant_ste(x: Tensor, params: QuantParams) -> Tensor:
    """
    Quantize-dequantize with a clipped straight-through gradient.

    Backward passes the upstream gradient where |x| <= 127 * scale and zeroes
    it elsewhere.
    """
    out = fake_quant(x.data, params)
    # slack keeps the calibrated max itself inside the pass-through region
    limit = QMAX * params.scale_array(x.ndim, dtype=np.float64) * (1 + 1e-6)
    mask = (np.abs(x.data) <= limit).astype(x.dtype)

    def grad_fn(g):
        return (g * mask,)

    return record_op("fake_quant", (x,), out, grad_fn)


# =========================
#  Observer
# =========================
@dataclass
class ObserverState:
    """Moving max-abs of a stream of activations."""
    running_max: Optional[float] = None
    momentum: float = OBSERVER_MOMENTUM
    count: int = 0

    def quant_params(self) -> QuantParams:
        if self.running_max is None:
            raise ValueError("observer has seen no data")
        return QuantParams(scale=[max(self.running_max / QMAX, SCALE_FLOOR)])


def moving_minmax_update(state: ObserverState, x: np.ndarray) -> ObserverState:
    """running_max <- m * running_max + (1 - m) * max|x|; the first observation seeds it."""
    amax = float(np.max(np.abs(x)))
    if state.running_max is None:
        state.running_max = amax
    else:
        state.running_max = state.momentum * state.running_max + (1.0 - state.momentum) * amax
    state.count += 1
    return state
