#!/usr/bin/env python3
"""
Toy denoising Unet.

Two resolution levels of residual blocks (GroupNorm, SiLU, 3x3 conv, time
projection), a self-attention block at the bottleneck, skip connections by
channel concatenation and a sinusoidal timestep embedding feeding a small
MLP.

One model definition serves three roles:
  - teacher: float weights, no quantizers
  - student: same weights plus INT8 quantizers on every conv and linear
    layer, with an activation observer per quantized layer
  - float64 copy of either, for finite-difference checks

unet_forward selects the execution path from the PrecisionFormat:
  FP32  plain float ops
  BF16  weights, layer inputs and layer outputs rounded to bfloat16
  INT8  quantized conv/linear; int8_path picks the integer kernel, its
        float64 simulation, or fake_quant_ste on the tape (training)
"""

import copy
import hashlib
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import CalibrationError, ShapeError
from kernels import TensorLifetime, im2col, int8_gemm
from numerics import (
    ObserverState,
    PrecisionFormat,
    QuantParams,
    bf16_round,
    calibrate,
    dequantize,
    fake_quant_ste,
    moving_minmax_update,
    quantize_int8,
)
from runtime import WorkerPool
from tensor import (
    Tape,
    Tensor,
    add,
    attention,
    concat,
    conv2d,
    groupnorm,
    linear,
    permute,
    reshape,
    silu,
    upsample_nearest,
)

logger = logging.getLogger(__name__)

INT8_PATHS = ("kernel", "simulate", "fake_quant")


class UnetConfig(BaseModel):
    """Shape of the toy Unet."""
    model_config = ConfigDict(extra="forbid")

    in_channels: int = Field(1, ge=1)
    base_channels: int = Field(16, ge=1)
    channel_mults: List[int] = Field(default_factory=lambda: [1, 2], min_length=1)
    groups: int = Field(4, ge=1)
    attention: bool = True
    time_dim: int = Field(32, ge=2)
    image_size: int = Field(16, ge=1)
    heads: int = Field(2, ge=1)
    eps: float = Field(1e-5, gt=0)

    @model_validator(mode="after")
    def _check_layout(self) -> 'UnetConfig':
        for mult in self.channel_mults:
            if mult < 1 or (self.base_channels * mult) % self.groups:
                raise ValueError(
                    f"channels {self.base_channels}*{mult} are not divisible by groups={self.groups}"
                )
        if self.time_dim % 2:
            raise ValueError(f"time_dim must be even, got {self.time_dim}")
        factor = 2 ** (len(self.channel_mults) - 1)
        if self.image_size % factor:
            raise ValueError(f"image_size {self.image_size} is not divisible by {factor}")
        if self.attention and self.level_channels[-1] % self.heads:
            raise ValueError(f"{self.level_channels[-1]} bottleneck channels do not split into {self.heads} heads")
        return self

    @property
    def level_channels(self) -> List[int]:
        return [self.base_channels * m for m in self.channel_mults]


@dataclass
class LayerSpec:
    """One parameterized layer: its kind, weight shape and conv geometry."""
    kind: str                 # conv | linear | groupnorm
    shape: Tuple[int, ...]
    stride: int = 1
    padding: int = 0

    @property
    def channel_axis(self) -> int:
        """Output-channel axis of the weight (per-channel quantization axis)."""
        return 0 if self.kind == "conv" else 1


def build_layout(config: UnetConfig) -> Dict[str, LayerSpec]:
    """Layer names and shapes in execution order."""
    layers: Dict[str, LayerSpec] = {}
    tdim = config.time_dim

    def conv(name, cin, cout, k=3, stride=1):
        layers[name] = LayerSpec("conv", (cout, cin, k, k), stride=stride, padding=k // 2)

    def lin(name, din, dout):
        layers[name] = LayerSpec("linear", (din, dout))

    def norm(name, c):
        layers[name] = LayerSpec("groupnorm", (c,))

    def res(name, cin, cout):
        norm(f"{name}.norm1", cin)
        conv(f"{name}.conv1", cin, cout)
        lin(f"{name}.temb", tdim, cout)
        norm(f"{name}.norm2", cout)
        conv(f"{name}.conv2", cout, cout)
        if cin != cout:
            conv(f"{name}.skip", cin, cout, k=1)

    lin("time.lin1", tdim, tdim)
    lin("time.lin2", tdim, tdim)

    chans = config.level_channels
    conv("conv_in", config.in_channels, chans[0])
    cin = chans[0]
    for level, ch in enumerate(chans):
        res(f"down{level}.res", cin, ch)
        cin = ch
        if level < len(chans) - 1:
            conv(f"down{level}.down", ch, ch, stride=2)

    res("mid.res", cin, cin)
    if config.attention:
        norm("mid.attn.norm", cin)
        for part in ("q", "k", "v", "proj"):
            conv(f"mid.attn.{part}", cin, cin, k=1)

    h = cin
    for level in reversed(range(len(chans))):
        ch = chans[level]
        res(f"up{level}.res", h + ch, ch)
        h = ch
        if level > 0:
            conv(f"up{level}.up", ch, ch)

    norm("norm_out", chans[0])
    conv("conv_out", chans[0], config.in_channels)
    return layers


# =========================
#  Model
# =========================
class UnetModel:
    """
    Parameters of one Unet plus its quantization state.

    Attributes:
        params: "<layer>.weight" / "<layer>.bias" tensors in layer order
        precision: Per-layer precision assignment; a layer listed as INT8
            carries a quantizer. Empty for a teacher.
        observers: Activation observer per quantized layer
        act_params / weight_params: Frozen QuantParams per quantized layer
    """

    def __init__(self, config: UnetConfig, params: Dict[str, Tensor], role: str = "teacher"):
        if role not in ("teacher", "student"):
            raise ValueError(f"Unknown model role {role!r}")
        self.config = config
        self.layers = build_layout(config)
        self.params = params
        self.role = role
        self.precision: Dict[str, PrecisionFormat] = {}
        self.quant_enabled = False
        self.observers: Dict[str, ObserverState] = {}
        self.act_params: Dict[str, QuantParams] = {}
        self.weight_params: Dict[str, QuantParams] = {}
        self._qweights: Dict[str, Tuple[np.ndarray, QuantParams]] = {}

        missing = [n for n in self.expected_param_shapes() if n not in params]
        if missing:
            raise ShapeError(f"Model is missing parameters: {', '.join(missing[:5])}")
        for name, shape in self.expected_param_shapes().items():
            if params[name].shape != shape:
                raise ShapeError(f"Parameter {name} has shape {params[name].shape}, expected {shape}")

    def expected_param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        for name, spec in self.layers.items():
            shapes[f"{name}.weight"] = spec.shape
            out = spec.shape[0] if spec.kind != "linear" else spec.shape[1]
            shapes[f"{name}.bias"] = (out,)
        return shapes

    @property
    def dtype(self) -> np.dtype:
        return self.params["conv_in.weight"].dtype

    @property
    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def quantized_layers(self) -> List[str]:
        return [n for n, f in self.precision.items() if f is PrecisionFormat.INT8]

    @property
    def is_calibrated(self) -> bool:
        return all(n in self.act_params and n in self.weight_params for n in self.quantized_layers)

    def set_requires_grad(self, flag: bool):
        for p in self.params.values():
            p.requires_grad = flag

    def parameter_hash(self) -> str:
        """SHA-256 over parameter names, shapes and bytes."""
        digest = hashlib.sha256()
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name].data)
            digest.update(name.encode())
            digest.update(str(arr.shape).encode())
            digest.update(str(arr.dtype).encode())
            digest.update(arr.tobytes())
        return digest.hexdigest()

    def clone(self, role: Optional[str] = None, dtype=None) -> 'UnetModel':
        """Deep copy; optionally switch role or parameter dtype."""
        params = {
            n: Tensor(p.data.astype(p.dtype if dtype is None else dtype, copy=True),
                      requires_grad=p.requires_grad, name=n, dtype=p.dtype if dtype is None else dtype)
            for n, p in self.params.items()
        }
        other = UnetModel(self.config, params, role=role or self.role)
        other.precision = dict(self.precision)
        other.quant_enabled = self.quant_enabled
        other.observers = copy.deepcopy(self.observers)
        other.act_params = dict(self.act_params)
        other.weight_params = dict(self.weight_params)
        return other

    def to_student(self) -> 'UnetModel':
        """Copy with INT8 quantizers inserted on every conv and linear layer."""
        student = self.clone(role="student")
        student.precision = {
            name: PrecisionFormat.INT8 for name, spec in self.layers.items() if spec.kind in ("conv", "linear")
        }
        student.observers = {name: ObserverState() for name in student.precision}
        student.act_params = {}
        student.weight_params = {}
        student.quant_enabled = True
        return student

    def freeze_quant_params(self):
        """Freeze observer ranges into activation params and calibrate weights per channel."""
        self._qweights.clear()
        for name in self.quantized_layers:
            spec = self.layers[name]
            self.weight_params[name] = calibrate(self.params[f"{name}.weight"].data, axis=spec.channel_axis)
            observer = self.observers.get(name)
            if observer is None or observer.running_max is None:
                logger.warning(f"Observer of {name} saw no data; its activation range stays unfrozen")
                continue
            self.act_params[name] = observer.quant_params()
        logger.debug(f"Froze QuantParams for {len(self.act_params)} of {len(self.quantized_layers)} layers")

    def quantized_weight(self, name: str) -> Tuple[np.ndarray, QuantParams]:
        """
        Weight of `name` as an int8 [K, O] GEMM operand with per-column params.
        Cached until the next freeze.
        """
        cached = self._qweights.get(name)
        if cached is None:
            spec = self.layers[name]
            wp = self.weight_params[name]
            w = self.params[f"{name}.weight"].data
            wmat = w.reshape(spec.shape[0], -1).T if spec.kind == "conv" else w
            col_params = QuantParams(scale=wp.scale, axis=1)
            cached = (np.ascontiguousarray(quantize_int8(wmat, col_params)), col_params)
            self._qweights[name] = cached
        return cached

    def __repr__(self) -> str:
        return f"UnetModel(role={self.role}, params={self.num_parameters}, quantized={len(self.quantized_layers)})"


def build_unet(config: Optional[UnetConfig] = None, seed: int = 0) -> UnetModel:
    """Fresh teacher with seeded weights: normal(0, 1/fan_in) weights, zero biases, unit GroupNorm scales."""
    config = config or UnetConfig()
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    for name, spec in build_layout(config).items():
        if spec.kind == "groupnorm":
            weight = np.ones(spec.shape, dtype=np.float32)
            out = spec.shape[0]
        else:
            fan_in = int(np.prod(spec.shape[1:])) if spec.kind == "conv" else spec.shape[0]
            weight = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=spec.shape).astype(np.float32)
            out = spec.shape[0] if spec.kind == "conv" else spec.shape[1]
        params[f"{name}.weight"] = Tensor(weight, requires_grad=True, name=f"{name}.weight")
        params[f"{name}.bias"] = Tensor(np.zeros(out, dtype=np.float32), requires_grad=True, name=f"{name}.bias")
    model = UnetModel(config, params, role="teacher")
    logger.info(f"Built Unet with {model.num_parameters} parameters over {len(model.layers)} layers")
    return model


# =========================
#  Forward
# =========================
def timestep_embedding(t, dim: int, dtype=np.float32) -> np.ndarray:
    """
    Sinusoidal embedding [N, dim]: sin(t*w_i) then cos(t*w_i), with
    w_i = exp(-ln(10000) * i / (dim/2 - 1)) running from 1 down to 1/10000.
    """
    if dim % 2:
        raise ValueError(f"timestep embedding dim must be even, got {dim}")
    half = dim // 2
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = np.exp(-np.log(10000.0) * np.arange(half) / (half - 1))
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


class _Executor:
    """Dispatches each layer of one forward pass to the path its format asks for."""

    def __init__(self, model: UnetModel, fmt: PrecisionFormat, int8_path: str, observe: bool,
                 pool: Optional[WorkerPool]):
        self.model = model
        self.fmt = fmt
        self.int8_path = int8_path
        self.observe = observe
        self.pool = pool
        self.bf16 = fmt is PrecisionFormat.BF16

    def _round(self, t: Tensor) -> Tensor:
        return Tensor._wrap(bf16_round(t.data)) if self.bf16 else t

    def _param(self, name: str) -> Tensor:
        return self._round(self.model.params[name])

    def _quantized(self, name: str) -> bool:
        return (self.fmt is PrecisionFormat.INT8 and self.model.quant_enabled
                and self.model.precision.get(name) is PrecisionFormat.INT8)

    def conv(self, name: str, x: Tensor) -> Tensor:
        spec = self.model.layers[name]
        bias = self.model.params[f"{name}.bias"]
        if self._quantized(name):
            if self.int8_path == "fake_quant":
                return conv2d(self._fake_quant_input(name, x), self._fake_quant_weight(name), bias,
                              spec.stride, spec.padding)
            n = x.shape[0]
            kh, kw = spec.shape[2:]
            cols, (ho, wo) = im2col(x.data, kh, kw, spec.stride, spec.padding)
            out = self._int8_matmul(name, cols) + bias.data
            return Tensor._wrap(np.ascontiguousarray(out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)))
        out = conv2d(self._round(x), self._param(f"{name}.weight"), self._param(f"{name}.bias"),
                     spec.stride, spec.padding)
        return self._round(out)

    def linear(self, name: str, x: Tensor) -> Tensor:
        bias = self.model.params[f"{name}.bias"]
        if self._quantized(name):
            if self.int8_path == "fake_quant":
                return linear(self._fake_quant_input(name, x), self._fake_quant_weight(name), bias)
            return Tensor._wrap(self._int8_matmul(name, x.data) + bias.data)
        out = linear(self._round(x), self._param(f"{name}.weight"), self._param(f"{name}.bias"))
        return self._round(out)

    def norm(self, name: str, x: Tensor) -> Tensor:
        out = groupnorm(self._round(x), self._param(f"{name}.weight"), self._param(f"{name}.bias"),
                        self.model.config.groups, self.model.config.eps, self.pool)
        return self._round(out)

    def attention(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        return self._round(attention(self._round(q), self._round(k), self._round(v), self.pool))

    def _frozen(self, name: str) -> Tuple[QuantParams, np.ndarray, QuantParams]:
        if name not in self.model.act_params or name not in self.model.weight_params:
            raise CalibrationError(f"Layer {name} has no frozen QuantParams; run QAT or PTQ calibration first")
        qb, col_params = self.model.quantized_weight(name)
        return self.model.act_params[name], qb, col_params

    def _int8_matmul(self, name: str, a: np.ndarray) -> np.ndarray:
        act, qb, col_params = self._frozen(name)
        qa = quantize_int8(a, act)
        if self.int8_path == "kernel":
            return int8_gemm(qa, qb, act, col_params)
        # Simulation: dequantized operands, float64 GEMM
        out = dequantize(qa, act, np.float64) @ dequantize(qb, col_params, np.float64)
        return out.astype(np.float32)

    def _fake_quant_input(self, name: str, x: Tensor) -> Tensor:
        observer = self.model.observers.setdefault(name, ObserverState())
        if self.observe:
            moving_minmax_update(observer, x.data)
        # training forwards follow the live observer, frozen ranges apply only at inference
        params = None if self.observe else self.model.act_params.get(name)
        if params is None:
            params = observer.quant_params() if observer.running_max is not None else calibrate(x.data)
        return fake_quant_ste(x, params)

    def _fake_quant_weight(self, name: str) -> Tensor:
        w = self.model.params[f"{name}.weight"]
        return fake_quant_ste(w, calibrate(w.data, axis=self.model.layers[name].channel_axis))


def _res_block(ex: _Executor, name: str, x: Tensor, temb: Tensor) -> Tensor:
    h = ex.conv(f"{name}.conv1", silu(ex.norm(f"{name}.norm1", x)))
    proj = ex.linear(f"{name}.temb", silu(temb))
    h = add(h, reshape(proj, (proj.shape[0], proj.shape[1], 1, 1)))
    h = ex.conv(f"{name}.conv2", silu(ex.norm(f"{name}.norm2", h)))
    skip = ex.conv(f"{name}.skip", x) if f"{name}.skip" in ex.model.layers else x
    return add(h, skip)


def _attn_block(ex: _Executor, x: Tensor) -> Tensor:
    n, c, hgt, wid = x.shape
    heads = ex.model.config.heads
    h = ex.norm("mid.attn.norm", x)

    def split(t: Tensor) -> Tensor:
        return permute(reshape(t, (n, heads, c // heads, hgt * wid)), (0, 1, 3, 2))

    q = split(ex.conv("mid.attn.q", h))
    k = split(ex.conv("mid.attn.k", h))
    v = split(ex.conv("mid.attn.v", h))
    o = ex.attention(q, k, v)
    o = reshape(permute(o, (0, 1, 3, 2)), (n, c, hgt, wid))
    return add(x, ex.conv("mid.attn.proj", o))


def unet_forward(model: UnetModel, x_t: Union[Tensor, np.ndarray], t, fmt=PrecisionFormat.FP32,
                 int8_path: str = "kernel", observe: bool = False,
                 pool: Optional[WorkerPool] = None, train_steps: int = 1000) -> Tensor:
    """
    Noise estimate for x_t at timesteps t.

    Args:
        model: Teacher or student
        x_t: Noisy images [N, C, H, W]
        t: Timestep index per sample (or one for the whole batch)
        fmt: PrecisionFormat of this call
        int8_path: kernel | simulate | fake_quant (INT8 only)
        observe: Update activation observers (fake_quant path)
        pool: Worker pool for GroupNorm and attention kernels
        train_steps: Length of the noise schedule; t must lie in [0, train_steps)

    Returns:
        Noise estimate with the shape of x_t
    """
    fmt = PrecisionFormat.parse(fmt)
    if int8_path not in INT8_PATHS:
        raise ValueError(f"Unknown int8_path {int8_path!r}; expected one of {', '.join(INT8_PATHS)}")
    if fmt is PrecisionFormat.INT8 and model.role == "teacher":
        raise CalibrationError("Teacher model carries no quantizers; INT8 needs a student")

    cfg = model.config
    x = x_t if isinstance(x_t, Tensor) else Tensor(x_t, dtype=model.dtype)
    expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"Unet expects input [N, {expected[0]}, {expected[1]}, {expected[2]}], got {x.shape}")
    n = x.shape[0]
    t = np.asarray(t)
    if t.ndim == 0:
        t = np.full(n, int(t))
    if t.shape != (n,):
        raise ShapeError(f"Need one timestep per sample: batch N={n}, got {t.shape[0]} timesteps")
    if np.any(t < 0) or np.any(t >= train_steps):
        raise ValueError(f"timesteps must lie in [0, {train_steps}), got {t.min()}..{t.max()}")

    ex = _Executor(model, fmt, int8_path, observe, pool)

    temb = Tensor(timestep_embedding(t, cfg.time_dim, dtype=model.dtype), dtype=model.dtype)
    temb = ex.linear("time.lin2", silu(ex.linear("time.lin1", temb)))

    h = ex.conv("conv_in", x)
    skips: List[Tensor] = []
    levels = len(cfg.channel_mults)
    for level in range(levels):
        h = _res_block(ex, f"down{level}.res", h, temb)
        skips.append(h)
        if level < levels - 1:
            h = ex.conv(f"down{level}.down", h)

    h = _res_block(ex, "mid.res", h, temb)
    if cfg.attention:
        h = _attn_block(ex, h)

    for level in reversed(range(levels)):
        h = _res_block(ex, f"up{level}.res", concat([h, skips[level]], axis=1), temb)
        if level > 0:
            h = ex.conv(f"up{level}.up", upsample_nearest(h, 2))

    h = silu(ex.norm("norm_out", h))
    return ex.conv("conv_out", h)


def trace_activation_lifetimes(model: UnetModel, batch: int = 1) -> List[TensorLifetime]:
    """
    Lifetimes of every activation of one FP32 forward, in op-step units.

    An activation lives from the op that produces it to the last op that
    reads it; the network output lives until the end of the trace.
    """
    cfg = model.config
    x = np.zeros((batch, cfg.in_channels, cfg.image_size, cfg.image_size), dtype=model.dtype)
    with Tape(trace_all=True) as tape:
        out = unet_forward(model, x, np.zeros(batch, dtype=np.int64), PrecisionFormat.FP32)

    index = {id(rec.output): i for i, rec in enumerate(tape.records)}
    last_use = {i: i for i in range(len(tape.records))}
    for i, rec in enumerate(tape.records):
        for inp in rec.inputs:
            j = index.get(id(inp))
            if j is not None:
                last_use[j] = max(last_use[j], i)
    last_use[index[id(out)]] = len(tape.records) - 1

    return [
        TensorLifetime(name=f"{rec.op}_{i}", nbytes=rec.output.data.nbytes, start=i, end=last_use[i])
        for i, rec in enumerate(tape.records)
    ]
