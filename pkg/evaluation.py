#!/usr/bin/env python3
"""
Quality and latency evaluation.

Quality is the Frechet distance between Gaussians fitted to features of
generated and reference images, with features from a fixed seeded random
projection instead of a trained feature network. The reference distribution
is a procedural toy dataset of Gaussian blobs and checkerboards.

Latency is the wall time of one full n-step sample per configuration.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from diffusion import ModelSet, NoiseSchedule, PrecisionPolicy, precision_for_step, sample
from errors import NumericalError, ShapeError
from kernels import GroupNormSpec, fused_mha, groupnorm_baseline, groupnorm_channel_parallel, int8_gemm
from numerics import PrecisionFormat, calibrate, quantize_int8
from runtime import WorkerPool, get_worker_pool
from utils.benchmark import measure

logger = logging.getLogger(__name__)

EIGEN_TOLERANCE = 1e-8
DISTANCE_TOLERANCE = 1e-6


# =========================
#  Toy dataset
# =========================
class ToyDataset:
    """
    Seeded mixture of two pattern families in [-1, 1]:
    1-3 Gaussian blobs with random centres and widths, and checkerboards
    with random cell size, phase and contrast.
    """

    def __init__(self, count: int = 2000, image_size: int = 16, seed: int = 0):
        if count < 1:
            raise ValueError(f"dataset count must be >= 1, got {count}")
        self.count = count
        self.image_size = image_size
        self.seed = seed
        self.images = self._generate()

    def __len__(self) -> int:
        return self.count

    def _generate(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        size = self.image_size
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        out = np.empty((self.count, 1, size, size), dtype=np.float32)
        for i in range(self.count):
            if rng.random() < 0.5:
                img = np.zeros((size, size))
                for _ in range(rng.integers(1, 4)):
                    cy, cx = rng.uniform(0, size - 1, size=2)
                    width = rng.uniform(1.0, max(1.5, size / 4))
                    img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width * width))
                img = 2.0 * np.clip(img, 0.0, 1.0) - 1.0
            else:
                cell = int(rng.choice([2, 4]))
                oy, ox = rng.integers(0, cell, size=2)
                board = ((yy + oy) // cell + (xx + ox) // cell) % 2
                img = rng.uniform(0.5, 1.0) * (2.0 * board - 1.0)
            out[i, 0] = img
        return out

    def halves(self) -> Tuple[np.ndarray, np.ndarray]:
        mid = self.count // 2
        return self.images[:mid], self.images[mid:]


# =========================
#  Features and statistics
# =========================
class FeatureProjector:
    """Fixed random projection of flattened pixels to `dim` features."""

    def __init__(self, input_size: int, dim: int = 32, seed: int = 7919, matrix: Optional[np.ndarray] = None):
        self.input_size = input_size
        self.dim = dim
        self.seed = seed
        if matrix is None:
            rng = np.random.default_rng(seed)
            matrix = rng.normal(0.0, 1.0 / np.sqrt(input_size), size=(input_size, dim))
        if matrix.shape != (input_size, dim):
            raise ShapeError(f"projection matrix has shape {matrix.shape}, expected {(input_size, dim)}")
        self.matrix = np.asarray(matrix, dtype=np.float64)

    def features(self, images: np.ndarray) -> np.ndarray:
        flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        if flat.shape[1] != self.input_size:
            raise ShapeError(f"images flatten to {flat.shape[1]} pixels, projector expects {self.input_size}")
        return flat @ self.matrix

    def save(self, path: str):
        np.save(path, self.matrix, allow_pickle=False)

    @classmethod
    def load(cls, path: str) -> 'FeatureProjector':
        matrix = np.load(path, allow_pickle=False)
        return cls(matrix.shape[0], matrix.shape[1], matrix=matrix)


@dataclass
class FrechetStats:
    mu: np.ndarray      # [D]
    sigma: np.ndarray   # [D, D]
    count: int

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def frechet_stats(features: np.ndarray) -> FrechetStats:
    """Sample mean and unbiased covariance of [N, D] features."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeError(f"features must be [N, D], got {features.shape}")
    n, d = features.shape
    if n < 2:
        raise ValueError(f"need at least 2 samples for a covariance, got {n}")
    if n < d + 1:
        logger.warning(f"Only {n} samples for {d} feature dims; covariance is rank deficient")
    mu = features.mean(axis=0)
    centered = features - mu
    sigma = centered.T @ centered / (n - 1)
    return FrechetStats(mu=mu, sigma=0.5 * (sigma + sigma.T), count=n)


def _psd_sqrt(matrix: np.ndarray, label: str) -> Tuple[np.ndarray, np.ndarray]:
    """Eigenvalues and eigenvectors of a symmetric PSD matrix, small negatives clamped."""
    values, vectors = np.linalg.eigh(0.5 * (matrix + matrix.T))
    if values.min() < -EIGEN_TOLERANCE:
        raise NumericalError(f"{label} has eigenvalue {values.min():.3e} below -{EIGEN_TOLERANCE:.0e}; not PSD")
    return np.clip(values, 0.0, None), vectors


def _root(values: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    return (vectors * np.sqrt(values)) @ vectors.T


def frechet_distance(a: FrechetStats, b: FrechetStats) -> float:
    """
    ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^1/2).

    tr((S_a S_b)^1/2) is the sum of square roots of the eigenvalues of the
    symmetric PSD product S_a^1/2 S_b S_a^1/2. Those roots are the singular
    values of S_b^1/2 S_a^1/2, which are summed directly so that small
    eigenvalues keep full precision; the product itself is still checked
    for negative eigenvalues.
    """
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise ShapeError(f"Frechet stats dimension mismatch: D={a.dim} vs D={b.dim}")
    diff = a.mu - b.mu
    sqrt_a = _root(*_psd_sqrt(a.sigma, "covariance"))
    sqrt_b = _root(*_psd_sqrt(b.sigma, "covariance"))
    _psd_sqrt(sqrt_a @ b.sigma @ sqrt_a, "covariance product")
    root_trace = np.linalg.svd(sqrt_b @ sqrt_a, compute_uv=False).sum()
    distance = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * root_trace)
    if distance < -DISTANCE_TOLERANCE:
        raise NumericalError(f"Frechet distance came out negative ({distance:.3e})")
    return max(distance, 0.0)


# =========================
#  Reports
# =========================
class ReportRow(BaseModel):
    """One configuration of a quality or latency run."""
    label: str
    precision_mix: str
    steps: int
    boundary: int
    frechet: Optional[float] = None
    frechet_per_seed: List[float] = Field(default_factory=list)
    median_s: Optional[float] = None
    p10_s: Optional[float] = None
    p90_s: Optional[float] = None
    repeats: Optional[int] = None


class BenchReport(BaseModel):
    title: str
    rows: List[ReportRow] = Field(default_factory=list)

    def row(self, label: str) -> ReportRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)


class KernelBenchRow(BaseModel):
    kernel: str
    config: str
    threads: int
    median_ns: float
    p10_ns: float
    p90_ns: float


def precision_mix(policy: PrecisionPolicy) -> str:
    """Step count per format, e.g. 'bf16:6/int8:44'."""
    counts: Dict[str, int] = {}
    for i in range(policy.n):
        fmt = precision_for_step(policy, i).value
        counts[fmt] = counts.get(fmt, 0) + 1
    if len(counts) == 1:
        return next(iter(counts))
    return "/".join(f"{f}:{c}" for f, c in counts.items())


def mixed_label(k: int, high: PrecisionFormat = PrecisionFormat.BF16,
                low: PrecisionFormat = PrecisionFormat.INT8) -> str:
    return f"{high.value.upper()} ({2 * k} Steps)/{low.value.upper()}"


def _uniform_rows(n: int, formats: Sequence[PrecisionFormat]) -> List[Tuple[str, PrecisionPolicy]]:
    seen: List[PrecisionFormat] = []
    for fmt in formats:
        if fmt not in seen:
            seen.append(fmt)
    return [(fmt.value.upper(), PrecisionPolicy.uniform(n, fmt)) for fmt in seen]


def default_eval_matrix(n: int = 50, boundaries: Sequence[int] = (3, 5),
                        high: PrecisionFormat = PrecisionFormat.BF16,
                        low: PrecisionFormat = PrecisionFormat.INT8) -> List[Tuple[str, PrecisionPolicy]]:
    """FP32, all-high, all-low (repeats dropped) and one mixed high/low policy per boundary."""
    matrix = _uniform_rows(n, [PrecisionFormat.FP32, high, low])
    for k in boundaries:
        matrix.append((mixed_label(k, high, low), PrecisionPolicy(n=n, k=k, high=high, low=low)))
    return matrix


def default_bench_matrix(n: int = 50, boundary: int = 5, with_fp32: bool = False,
                         high: PrecisionFormat = PrecisionFormat.BF16,
                         low: PrecisionFormat = PrecisionFormat.INT8) -> List[Tuple[str, PrecisionPolicy]]:
    """All-high, mixed and all-low, optionally with an FP32 row first."""
    matrix = [
        _uniform_rows(n, [high])[0],
        (mixed_label(boundary, high, low), PrecisionPolicy(n=n, k=boundary, high=high, low=low)),
        _uniform_rows(n, [low])[0],
    ]
    if with_fp32 and PrecisionFormat.FP32 not in (high, low):
        matrix.insert(0, ("FP32", PrecisionPolicy.uniform(n, PrecisionFormat.FP32)))
    return matrix


def reference_stats(images: np.ndarray, projector: FeatureProjector) -> FrechetStats:
    return frechet_stats(projector.features(images))


def evaluate_config(models: ModelSet, policy: PrecisionPolicy, schedule: NoiseSchedule,
                    reference: FrechetStats, projector: FeatureProjector, n_images: int = 500,
                    seed: int = 0, int8_path: str = "kernel", batch_size: Optional[int] = None,
                    pool: Optional[WorkerPool] = None) -> Tuple[float, np.ndarray]:
    """
    Sample n_images under `policy` and measure their distance to `reference`.

    Returns:
        (Frechet distance, generated images)
    """
    images = sample(models, policy, schedule, seed=seed, num_images=n_images, int8_path=int8_path,
                    batch_size=batch_size, pool=pool)
    if not np.all(np.isfinite(images)):
        raise NumericalError(f"Sampling produced non-finite pixels under {precision_mix(policy)}")
    distance = frechet_distance(frechet_stats(projector.features(images)), reference)
    logger.debug(f"{precision_mix(policy)} seed {seed}: FD {distance:.4f}")
    return distance, images


def run_eval_matrix(models: ModelSet, matrix: Sequence[Tuple[str, PrecisionPolicy]], schedule: NoiseSchedule,
                    reference: FrechetStats, projector: FeatureProjector, n_images: int = 500,
                    seeds: Sequence[int] = (0,), int8_path: str = "kernel", batch_size: Optional[int] = None,
                    pool: Optional[WorkerPool] = None) -> BenchReport:
    """One row per configuration; `frechet` is the median over seeds."""
    report = BenchReport(title="Frechet distance of each precision")
    for label, policy in matrix:
        per_seed = [
            evaluate_config(models, policy, schedule, reference, projector, n_images, seed, int8_path,
                            batch_size, pool)[0]
            for seed in seeds
        ]
        report.rows.append(ReportRow(
            label=label, precision_mix=precision_mix(policy), steps=policy.n, boundary=policy.k,
            frechet=float(np.median(per_seed)), frechet_per_seed=per_seed,
        ))
        logger.info(f"{label}: median FD {np.median(per_seed):.4f} over {len(per_seed)} seed(s)")
    return report


def bench_latency(models: ModelSet, matrix: Sequence[Tuple[str, PrecisionPolicy]], schedule: NoiseSchedule,
                  repeats: int = 20, warmup: int = 3, batch: int = 1, seed: int = 0,
                  int8_path: str = "kernel", pool: Optional[WorkerPool] = None) -> BenchReport:
    """Wall time of one full n-step sample per configuration."""
    if repeats < 20:
        logger.warning(f"Latency percentiles over only {repeats} repeats")
    n = matrix[0][1].n if matrix else 0
    report = BenchReport(title=f"Inference performance ({n} steps)")
    for label, policy in matrix:
        stats = measure(
            lambda: sample(models, policy, schedule, seed=seed, num_images=batch, int8_path=int8_path, pool=pool),
            repeats=repeats, warmup=warmup,
        )
        report.rows.append(ReportRow(
            label=label, precision_mix=precision_mix(policy), steps=policy.n, boundary=policy.k,
            median_s=stats.median_ns / 1e9, p10_s=stats.p10_ns / 1e9, p90_s=stats.p90_ns / 1e9,
            repeats=stats.repeats,
        ))
        logger.info(f"{label}: median {stats.median_ns / 1e9:.4f}s")
    return report


def kernel_benchmarks(pool: Optional[WorkerPool] = None, repeats: int = 20, warmup: int = 3,
                      groupnorm_shape: Tuple[int, int, int, int] = (8, 64, 32, 32), groups: int = 4,
                      mha_shape: Tuple[int, int, int, int] = (1, 2, 256, 32),
                      gemm_shape: Tuple[int, int, int] = (256, 576, 256), seed: int = 0) -> List[KernelBenchRow]:
    """Micro-benchmarks of the GroupNorm, attention and GEMM kernels."""
    pool = pool or get_worker_pool()
    rng = np.random.default_rng(seed)
    rows: List[KernelBenchRow] = []

    def add(kernel: str, config: str, fn):
        stats = measure(fn, repeats=repeats, warmup=warmup)
        rows.append(KernelBenchRow(kernel=kernel, config=config, threads=pool.threads,
                                   median_ns=stats.median_ns, p10_ns=stats.p10_ns, p90_ns=stats.p90_ns))

    x = rng.standard_normal(groupnorm_shape).astype(np.float32)
    spec = GroupNormSpec(num_channels=groupnorm_shape[1], num_groups=groups)
    gn_config = "x".join(map(str, groupnorm_shape)) + f" G={groups}"
    add("groupnorm_baseline", gn_config, lambda: groupnorm_baseline(x, spec, pool))
    add("groupnorm_channel_parallel", gn_config, lambda: groupnorm_channel_parallel(x, spec, pool))

    q, k, v = (rng.standard_normal(mha_shape).astype(np.float32) for _ in range(3))
    add("fused_mha", "x".join(map(str, mha_shape)), lambda: fused_mha(q, k, v, pool))

    m, kdim, n = gemm_shape
    a = rng.standard_normal((m, kdim)).astype(np.float32)
    b = rng.standard_normal((kdim, n)).astype(np.float32)
    pa, pb = calibrate(a), calibrate(b, axis=1)
    qa, qb = quantize_int8(a, pa), quantize_int8(b, pb)
    gemm_config = f"{m}x{kdim}x{n}"
    add("int8_gemm", gemm_config, lambda: int8_gemm(qa, qb, pa, pb))
    add("fp32_gemm", gemm_config, lambda: a @ b)
    return rows
