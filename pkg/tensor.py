#!/usr/bin/env python3
"""
Dense tensor with tape-based reverse-mode differentiation.

Ops are plain functions over Tensor values. While a Tape is active on the
current thread, every op with a grad-requiring input is appended to it with
its saved inputs and a backward rule; Tape.backward walks those records in
exact reverse order. Outside a tape the same ops just compute.

The op set is fixed to what the Unet needs: conv2d, linear, groupnorm,
attention, silu, softmax, add, mul, mul_scalar, concat, reshape, permute,
upsample, reduce_sum and mse_loss.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ShapeError, TapeError
from kernels import (
    GroupNormSpec,
    col2im,
    fused_mha,
    groupnorm_channel_parallel,
    im2col,
)
from runtime import WorkerPool

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_local = threading.local()


class Tensor:
    """
    N-dimensional float array with an optional gradient slot.

    Data is stored row-major; images are NCHW. The compute dtype is float32;
    float64 tensors are accepted so finite-difference checks can run the same
    ops in double precision.
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=np.float32 if dtype is None else dtype)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"Tensor dimensions must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> 'Tensor':
        return cls(arr, dtype=arr.dtype)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'Tensor':
        """Same data, no gradient tracking."""
        return Tensor(self.data, dtype=self.dtype)

    def astype(self, dtype) -> 'Tensor':
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name, dtype=dtype)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


def as_tensor(x: Union[Tensor, np.ndarray, float]) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    return Tensor(arr, dtype=arr.dtype if arr.dtype.kind == "f" else np.float32)


# =========================
#  Tape
# =========================
@dataclass
class TapeRecord:
    """One executed op: saved inputs, produced output and its backward rule."""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """
    Ordered record of executed ops plus the parameters they touched.

    Use as a context manager; tapes nest per thread, and tapes on different
    threads never share state. Leaves with requires_grad=True that feed a
    recorded op are registered as parameters automatically; watch() registers
    them up front so unused parameters still receive a zero gradient.

    Args:
        trace_all: Record every op, even without grad-requiring inputs
            (used to trace activation lifetimes)
    """

    def __init__(self, trace_all: bool = False):
        self.trace_all = trace_all
        self.records: List[TapeRecord] = []
        self._params: Dict[int, Tensor] = {}
        self._produced: Dict[int, int] = {}

    def __enter__(self) -> 'Tape':
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()

    def watch(self, *tensors: Tensor):
        for t in tensors:
            if t.requires_grad and id(t) not in self._produced:
                self._params.setdefault(id(t), t)

    @property
    def parameters(self) -> List[Tensor]:
        return list(self._params.values())

    def produced(self, tensor: Tensor) -> bool:
        return id(tensor) in self._produced

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn):
        needs_grad = any(t.requires_grad for t in inputs)
        if not (needs_grad or self.trace_all):
            return
        output.requires_grad = needs_grad
        self.watch(*(t for t in inputs if not self.produced(t)))
        self._produced[id(output)] = len(self.records)
        self.records.append(TapeRecord(op=op, inputs=tuple(inputs), output=output, backward=backward))

    def backward(self, loss: Tensor) -> Dict[str, np.ndarray]:
        """
        Reverse sweep from a scalar loss.

        Returns:
            Gradient per registered parameter, keyed by parameter name (or
            param_<i> for unnamed ones); each parameter's .grad is set too
        """
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.produced(loss):
            raise TapeError("loss was not produced on this tape")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            upstream = grads.pop(id(rec.output), None)
            if upstream is None:
                continue
            for inp, g in zip(rec.inputs, rec.backward(upstream)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = grads[key] + g if key in grads else g

        result: Dict[str, np.ndarray] = {}
        for i, p in enumerate(self._params.values()):
            g = grads.get(id(p))
            if g is None:
                g = np.zeros_like(p.data)
            p.grad = g.astype(p.dtype, copy=False)
            result[p.name or f"param_{i}"] = p.grad
        return result


def active_tape() -> Optional[Tape]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def backward(tape: Tape, loss: Tensor) -> Dict[str, np.ndarray]:
    """d(loss)/d(param) for every parameter registered on `tape`."""
    return tape.backward(loss)


def record_op(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn: BackwardFn) -> Tensor:
    """Wrap an op result and append it to the active tape, if any."""
    out = np.asarray(out)
    result = Tensor._wrap(out if out.ndim == 0 else np.ascontiguousarray(out))
    tape = active_tape()
    if tape is not None:
        tape.record(op, inputs, result, backward_fn)
    return result


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so the gradient matches `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


# =========================
#  Ops
# =========================
def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[N,C,H,W] with weight[O,C,kh,kw], plus bias[O]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if c != wc:
        raise ShapeError(f"conv2d: input has C={c} channels but weight expects C={wc}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match O={o} output channels")

    cols, (ho, wo) = im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (g2.T @ cols).reshape(weight.shape)
        dx = col2im(g2 @ wmat, x.shape, kh, kw, stride, padding)
        db = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record_op("conv2d", inputs, out, grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x[N,D] @ weight[D,E] + bias[E]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects matrices, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input has D={x.shape[1]} features but weight expects D={weight.shape[0]}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match E={weight.shape[1]}")

    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        db = g.sum(axis=0) if bias is not None else None
        return g @ weight.data.T, x.data.T @ g, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record_op("linear", inputs, out, grad_fn)


def silu(x: Tensor) -> Tensor:
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    out = x.data * sig

    def grad_fn(g):
        return (g * sig * (1.0 + x.data * (1.0 - sig)),)

    return record_op("silu", (x,), out, grad_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record_op("softmax", (x,), out, grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    _broadcast_shape(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record_op("add", (a, b), a.data + b.data, grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    _broadcast_shape(a, b, "mul")

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record_op("mul", (a, b), a.data * b.data, grad_fn)


def mul_scalar(x: Tensor, s: float) -> Tensor:
    factor = x.dtype.type(s)

    def grad_fn(g):
        return (g * factor,)

    return record_op("mul_scalar", (x,), x.data * factor, grad_fn)


def reduce_sum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    def grad_fn(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return record_op("reduce_sum", (x,), np.asarray(x.data.sum(), dtype=x.dtype), grad_fn)


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error, as a scalar tensor."""
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    out = np.asarray(np.mean(np.square(diff)), dtype=a.dtype)

    def grad_fn(g):
        ga = g * (2.0 / diff.size) * diff
        return ga, -ga

    return record_op("mse_loss", (a, b), out, grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    shapes = [t.shape for t in tensors]
    ref = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [s[axis] for s in shapes])

    def grad_fn(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return record_op("concat", tuple(tensors), out, grad_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {tuple(shape)}")

    def grad_fn(g):
        return (g.reshape(x.shape),)

    return record_op("reshape", (x,), out, grad_fn)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)

    def grad_fn(g):
        return (g.transpose(inverse),)

    return record_op("permute", (x,), x.data.transpose(axes), grad_fn)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the two spatial axes of NCHW input."""
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def grad_fn(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return record_op("upsample_nearest", (x,), out, grad_fn)


def groupnorm(x: Tensor, weight: Tensor, bias: Tensor, num_groups: int, eps: float = 1e-5,
              pool: Optional[WorkerPool] = None) -> Tensor:
    """GroupNorm through the channel-parallel kernel."""
    if x.ndim != 4:
        raise ShapeError(f"groupnorm expects NCHW input, got shape {x.shape}")
    spec = GroupNormSpec(num_channels=x.shape[1], num_groups=num_groups,
                         eps=eps, weight=weight.data, bias=bias.data)
    out, mean, rstd = groupnorm_channel_parallel(x.data, spec, pool, return_stats=True)

    def grad_fn(g):
        n, c, h, w = x.shape
        xg = x.data.reshape(n, num_groups, -1)
        xhat = ((xg - mean[:, :, None]) * rstd[:, :, None]).astype(x.dtype).reshape(x.shape)
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = (g * weight.data[None, :, None, None]).reshape(n, num_groups, -1)
        xh = xhat.reshape(n, num_groups, -1)
        dx = rstd[:, :, None] * (
            dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).mean(axis=2, keepdims=True)
        )
        return dx.astype(x.dtype).reshape(x.shape), dgamma, dbeta

    return record_op("groupnorm", (x, weight, bias), out, grad_fn)


def attention(q: Tensor, k: Tensor, v: Tensor, pool: Optional[WorkerPool] = None) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V through the fused kernel; backward recomputes the probabilities."""
    out = fused_mha(q.data, k.data, v.data, pool)
    scale = 1.0 / np.sqrt(q.shape[-1])

    def grad_fn(g):
        scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
        scores = scores - scores.max(axis=-1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=-1, keepdims=True)
        dv = np.matmul(np.swapaxes(p, -1, -2), g)
        dp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
        dq = np.matmul(ds, k.data)
        dk = np.matmul(np.swapaxes(ds, -1, -2), q.data)
        return dq.astype(q.dtype), dk.astype(k.dtype), dv.astype(v.dtype)

    return record_op("attention", (q, k, v), out, grad_fn)
