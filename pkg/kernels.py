#!/usr/bin/env python3
"""
CPU kernels for the Unet hot spots.

Two GroupNorm implementations (group-parallel baseline and the
channel-parallel rewrite), a streaming fused multi-head attention, an INT8
GEMM with exact 32-bit integer accumulation, im2col helpers for the
convolution paths, and a static arena plan for activation buffers.

All kernels work on numpy arrays in NCHW layout and are internally parallel,
externally synchronous: they return once every worker has finished.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ShapeError
from runtime import WorkerPool, get_worker_pool

if TYPE_CHECKING:
    from numerics import QuantParams

logger = logging.getLogger(__name__)

# 127 * 127 * 1024 < 2**24: float32 sums of that many int8 products are exact
EXACT_K_BLOCK = 1024


# =========================
#  im2col / col2im
# =========================
def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Spatial output size of a convolution along one axis."""
    return (size + 2 * padding - kernel) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, padding: int = 0) -> Tuple[np.ndarray, Tuple[int, int]]:
    """
    Unfold NCHW input into convolution patches.

    Works for any dtype, including int8 activations (padding with 0, which is
    also the quantized zero).

    Returns:
        Tuple of (cols [N*Ho*Wo, C*kh*kw], (Ho, Wo))
    """
    if x.ndim != 4:
        raise ShapeError(f"im2col expects NCHW input, got shape {x.shape}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")

    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, (ho, wo)


def col2im(dcols: np.ndarray, x_shape: Sequence[int], kh: int, kw: int,
           stride: int, padding: int) -> np.ndarray:
    """Scatter-add patch gradients back onto the input grid (adjoint of im2col)."""
    n, c, h, w = x_shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    d = dcols.reshape(n, ho, wo, c, kh, kw)
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx[:, :, padding:padding + h, padding:padding + w]


# =========================
#  GroupNorm
# =========================
@dataclass
class GroupNormSpec:
    """Channel/group layout, epsilon and affine parameters of one GroupNorm."""
    num_channels: int
    num_groups: int
    eps: float = 1e-5
    weight: Optional[np.ndarray] = None  # gamma[C]
    bias: Optional[np.ndarray] = None    # beta[C]

    def __post_init__(self):
        if self.num_groups < 1 or self.num_channels % self.num_groups != 0:
            raise ShapeError(
                f"GroupNorm needs channels divisible by groups, got C={self.num_channels}, G={self.num_groups}"
            )
        if not self.eps > 0:
            raise ValueError(f"GroupNorm eps must be positive, got {self.eps}")
        if self.weight is None:
            self.weight = np.ones(self.num_channels, dtype=np.float32)
        if self.bias is None:
            self.bias = np.zeros(self.num_channels, dtype=np.float32)
        for label, arr in (("weight", self.weight), ("bias", self.bias)):
            if arr.shape != (self.num_channels,):
                raise ShapeError(f"GroupNorm {label} has shape {arr.shape}, expected ({self.num_channels},)")

    @property
    def channels_per_group(self) -> int:
        return self.num_channels // self.num_groups

    def check(self, x: np.ndarray):
        if x.ndim != 4 or x.shape[1] != self.num_channels:
            raise ShapeError(f"GroupNorm over {self.num_channels} channels got input of shape {x.shape}")


@dataclass
class ChannelMoments:
    """Per-(sample, channel) sum and sum of squares over H*W elements."""
    sums: np.ndarray     # [N, C] float64
    sumsq: np.ndarray    # [N, C] float64
    count: int           # H*W

    def group(self, channels: range) -> Tuple[np.ndarray, np.ndarray, int]:
        """Combine the moments of `channels` in ascending channel order."""
        s = np.zeros(self.sums.shape[0], dtype=np.float64)
        ss = np.zeros(self.sums.shape[0], dtype=np.float64)
        for c in channels:
            s += self.sums[:, c]
            ss += self.sumsq[:, c]
        return s, ss, self.count * len(channels)


def groupnorm_baseline(x: np.ndarray, spec: GroupNormSpec, pool: Optional[WorkerPool] = None) -> np.ndarray:
    """
    GroupNorm parallelized by assigning whole groups to workers.

    With fewer groups than workers the surplus workers sit idle; this is the
    utilization problem the channel-parallel kernel removes.
    """
    spec.check(x)
    pool = pool or get_worker_pool()
    cpg = spec.channels_per_group
    gamma = spec.weight.astype(x.dtype).reshape(1, -1, 1, 1)
    beta = spec.bias.astype(x.dtype).reshape(1, -1, 1, 1)
    out = np.empty_like(x)

    def work(groups: range):
        for g in groups:
            c0, c1 = g * cpg, (g + 1) * cpg
            xg = x[:, c0:c1]
            mean = xg.mean(axis=(1, 2, 3), dtype=np.float64)
            centered = xg - mean.astype(x.dtype)[:, None, None, None]
            var = np.square(centered).mean(axis=(1, 2, 3), dtype=np.float64)
            rstd = (1.0 / np.sqrt(var + spec.eps)).astype(x.dtype)[:, None, None, None]
            out[:, c0:c1] = centered * rstd * gamma[:, c0:c1] + beta[:, c0:c1]

    pool.run(work, spec.num_groups)
    return out


def channel_moments(x: np.ndarray, pool: Optional[WorkerPool] = None) -> ChannelMoments:
    """Phase 1: every worker reduces the channels it owns."""
    pool = pool or get_worker_pool()
    n, c, h, w = x.shape

    def work(channels: range):
        sums = np.empty((n, len(channels)), dtype=np.float64)
        sumsq = np.empty((n, len(channels)), dtype=np.float64)
        for j, ch in enumerate(channels):
            xc = x[:, ch].reshape(n, h * w).astype(np.float64)
            sums[:, j] = xc.sum(axis=1)
            sumsq[:, j] = np.square(xc).sum(axis=1)
        return sums, sumsq

    parts = pool.run(work, c)
    return ChannelMoments(
        sums=np.concatenate([p[0] for p in parts], axis=1),
        sumsq=np.concatenate([p[1] for p in parts], axis=1),
        count=h * w,
    )


def groupnorm_channel_parallel(x: np.ndarray, spec: GroupNormSpec, pool: Optional[WorkerPool] = None,
                               return_stats: bool = False) -> Union[np.ndarray, Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """
    GroupNorm parallelized across channels instead of groups.

    1. each worker computes ChannelMoments for its channels
    2. group mean/variance are formed from channel moments in ascending
       channel order: mu = sum(S)/count, var = sum(S2)/count - mu^2
    3. each worker normalizes its own channels

    Every per-channel computation is identical whatever the partition, so the
    output is bit-identical for any worker count.

    Args:
        x: Input [N, C, H, W]
        spec: GroupNorm layout and affine parameters
        pool: Worker pool (default: global pool)
        return_stats: Also return group mean and 1/std, both [N, G] float64

    Returns:
        Normalized output, or (output, mean, rstd) when return_stats is set
    """
    spec.check(x)
    pool = pool or get_worker_pool()
    n = x.shape[0]
    cpg = spec.channels_per_group

    moments = channel_moments(x, pool)

    mean = np.empty((n, spec.num_groups), dtype=np.float64)
    rstd = np.empty((n, spec.num_groups), dtype=np.float64)
    for g in range(spec.num_groups):
        s, ss, count = moments.group(range(g * cpg, (g + 1) * cpg))
        mu = s / count
        # E[x^2] - E[x]^2 can dip below zero through cancellation
        var = np.maximum(ss / count - mu * mu, 0.0)
        mean[:, g] = mu
        rstd[:, g] = 1.0 / np.sqrt(var + spec.eps)

    gamma = spec.weight.astype(np.float64)
    beta = spec.bias.astype(np.float64)
    out = np.empty_like(x)

    def work(channels: range):
        for ch in channels:
            g = ch // cpg
            scale = rstd[:, g] * gamma[ch]
            shift = beta[ch] - mean[:, g] * scale
            out[:, ch] = x[:, ch] * scale.astype(x.dtype)[:, None, None] + shift.astype(x.dtype)[:, None, None]

    pool.run(work, spec.num_channels)

    if return_stats:
        return out, mean, rstd
    return out


# =========================
#  Fused multi-head attention
# =========================
def attention_reference(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Unfused softmax(Q K^T / sqrt(d)) V, materializing the full score tensor."""
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) / np.sqrt(q.shape[-1])
    scores = scores - scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    return np.matmul(probs, v)


def fused_mha(q: np.ndarray, k: np.ndarray, v: np.ndarray, pool: Optional[WorkerPool] = None,
              block_size: int = 64, debug: bool = False) -> Union[np.ndarray, Tuple[np.ndarray, np.ndarray]]:
    """
    Streaming softmax(Q K^T / sqrt(d)) V over [N, heads, L, d] operands.

    Each work unit is one (sample, head, query block); keys are visited block
    by block with a running max, running sum-exp and rescaled accumulator, so
    no unit ever holds more than a block of scores.

    Args:
        q, k, v: Query/key/value tensors [N, h, L, d] (keys/values may have
            their own sequence length)
        pool: Worker pool (default: global pool)
        block_size: Query and key block length
        debug: Also return the row sums of the implicit attention matrix

    Returns:
        Attention output [N, h, L, d], plus row sums [N, h, L] in debug mode
    """
    if q.ndim != 4 or k.ndim != 4 or v.ndim != 4:
        raise ShapeError(f"fused_mha expects 4-D operands, got {q.shape}, {k.shape}, {v.shape}")
    n, heads, length, dim = q.shape
    if k.shape[:2] != (n, heads) or v.shape[:2] != (n, heads) or k.shape[3] != dim or k.shape[2] != v.shape[2]:
        raise ShapeError(f"fused_mha dimension mismatch: q{q.shape} k{k.shape} v{v.shape}")
    if block_size < 1:
        raise ValueError(f"block_size must be >= 1, got {block_size}")
    pool = pool or get_worker_pool()

    keys = k.shape[2]
    scale = q.dtype.type(1.0 / np.sqrt(dim))
    q_blocks = -(-length // block_size)
    out = np.empty((n, heads, length, v.shape[3]), dtype=np.result_type(q.dtype, v.dtype))
    row_sums = np.empty((n, heads, length), dtype=np.float64) if debug else None

    def work(units: range):
        for u in units:
            nh, qb = divmod(u, q_blocks)
            b, h = divmod(nh, heads)
            q0, q1 = qb * block_size, min((qb + 1) * block_size, length)
            qs = q[b, h, q0:q1] * scale
            m = np.full(q1 - q0, -np.inf, dtype=qs.dtype)
            l = np.zeros(q1 - q0, dtype=qs.dtype)
            acc = np.zeros((q1 - q0, v.shape[3]), dtype=out.dtype)
            for k0 in range(0, keys, block_size):
                s = qs @ k[b, h, k0:k0 + block_size].T
                m_new = np.maximum(m, s.max(axis=1))
                alpha = np.exp(m - m_new)
                p = np.exp(s - m_new[:, None])
                l = l * alpha + p.sum(axis=1)
                acc = acc * alpha[:, None] + p @ v[b, h, k0:k0 + block_size]
                m = m_new
            out[b, h, q0:q1] = acc / l[:, None]

            if row_sums is not None:
                # Re-walk the key blocks with the final max/sum to check normalization
                total = np.zeros(q1 - q0, dtype=np.float64)
                for k0 in range(0, keys, block_size):
                    s = qs @ k[b, h, k0:k0 + block_size].T
                    total += (np.exp(s - m[:, None]) / l[:, None]).sum(axis=1)
                row_sums[b, h, q0:q1] = total

    pool.run(work, n * heads * q_blocks)

    if debug:
        return out, row_sums
    return out


# =========================
#  INT8 GEMM
# =========================
def _scale_vector(params: 'QuantParams', length: int, label: str) -> np.ndarray:
    scales = np.asarray(params.scale, dtype=np.float64)
    if scales.size == 1:
        return scales.reshape(())
    if scales.size != length:
        raise ShapeError(f"{label} carries {scales.size} per-channel scales for a dimension of {length}")
    return scales


def int32_accumulate(qa: np.ndarray, qb: np.ndarray) -> np.ndarray:
    """
    Exact int32 matrix product of int8 operands.

    K is processed in blocks of EXACT_K_BLOCK through float32 BLAS; inside a
    block every partial sum is an integer below 2**24, so the float result is
    exact and converts losslessly before the int32 accumulation.
    """
    m, k = qa.shape
    acc = np.zeros((m, qb.shape[1]), dtype=np.int32)
    for k0 in range(0, k, EXACT_K_BLOCK):
        a = qa[:, k0:k0 + EXACT_K_BLOCK].astype(np.float32)
        b = qb[k0:k0 + EXACT_K_BLOCK].astype(np.float32)
        acc += (a @ b).astype(np.int32)
    return acc


def int8_gemm(qa: np.ndarray, qb: np.ndarray, pa: 'QuantParams', pb: 'QuantParams') -> np.ndarray:
    """
    Quantized matrix multiply: int32 accumulation, then rescale.

    Args:
        qa: Quantized left operand [M, K] (int8)
        qb: Quantized right operand [K, N] (int8)
        pa: Params of qa, per tensor or one scale per row
        pb: Params of qb, per tensor or one scale per column

    Returns:
        float32 product [M, N] = (qa @ qb) * pa.scale * pb.scale
    """
    if qa.ndim != 2 or qb.ndim != 2:
        raise ShapeError(f"int8_gemm expects matrices, got {qa.shape} and {qb.shape}")
    if qa.shape[1] != qb.shape[0]:
        raise ShapeError(f"int8_gemm inner dimension mismatch: K={qa.shape[1]} vs K={qb.shape[0]}")

    sa = _scale_vector(pa, qa.shape[0], "left operand")
    sb = _scale_vector(pb, qb.shape[1], "right operand")
    if sa.ndim:
        sa = sa[:, None]

    acc = int32_accumulate(qa, qb)
    return (acc.astype(np.float64) * (sa * sb)).astype(np.float32)


# =========================
#  Activation buffer plan
# =========================
@dataclass
class TensorLifetime:
    """One activation: its size and the op steps where it is produced and last read."""
    name: str
    nbytes: int
    start: int
    end: int


@dataclass
class BufferPlan:
    """Assignment of activations to a small set of reusable arenas."""
    assignment: Dict[str, int] = field(default_factory=dict)
    arena_sizes: List[int] = field(default_factory=list)
    lifetimes: List[TensorLifetime] = field(default_factory=list)

    @property
    def arena_count(self) -> int:
        return len(self.arena_sizes)

    @property
    def naive_count(self) -> int:
        return len(self.lifetimes)

    @property
    def total_bytes(self) -> int:
        return int(sum(self.arena_sizes))

    @property
    def naive_bytes(self) -> int:
        return int(sum(t.nbytes for t in self.lifetimes))

    def allocate(self) -> List[np.ndarray]:
        """Preallocate one byte buffer per arena."""
        return [np.empty(size, dtype=np.uint8) for size in self.arena_sizes]

    def view(self, arenas: List[np.ndarray], name: str, shape: Sequence[int], dtype=np.float32) -> np.ndarray:
        """Typed view of the arena assigned to `name`."""
        dtype = np.dtype(dtype)
        nbytes = int(np.prod(shape)) * dtype.itemsize
        buf = arenas[self.assignment[name]]
        if nbytes > buf.nbytes:
            raise ShapeError(f"{name} needs {nbytes} bytes, arena holds {buf.nbytes}")
        return buf[:nbytes].view(dtype).reshape(shape)


def buffer_plan(lifetimes: Sequence[TensorLifetime]) -> BufferPlan:
    """
    Greedy interval assignment of activations to arenas.

    Tensors are visited by start step; each takes a free arena (one whose
    occupant's last use is strictly before this start), preferring the
    smallest arena that already fits, else the largest free one, which grows.
    A new arena opens only when every arena is busy, so the arena count equals
    the peak number of simultaneously live tensors.
    """
    plan = BufferPlan(lifetimes=list(lifetimes))
    busy_until: List[int] = []

    for t in sorted(lifetimes, key=lambda t: (t.start, -t.nbytes, t.name)):
        if t.end < t.start:
            raise ValueError(f"Lifetime of {t.name} ends before it starts ({t.start} > {t.end})")
        free = [a for a, end in enumerate(busy_until) if end < t.start]
        if free:
            fitting = [a for a in free if plan.arena_sizes[a] >= t.nbytes]
            if fitting:
                arena = min(fitting, key=lambda a: (plan.arena_sizes[a], a))
            else:
                arena = max(free, key=lambda a: (plan.arena_sizes[a], -a))
            plan.arena_sizes[arena] = max(plan.arena_sizes[arena], t.nbytes)
            busy_until[arena] = t.end
        else:
            arena = len(busy_until)
            plan.arena_sizes.append(t.nbytes)
            busy_until.append(t.end)
        plan.assignment[t.name] = arena

    logger.debug(f"Buffer plan: {plan.arena_count} arenas for {plan.naive_count} tensors "
                 f"({plan.total_bytes} vs {plan.naive_bytes} bytes)")
    return plan
