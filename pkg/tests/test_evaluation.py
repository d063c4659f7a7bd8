#!/usr/bin/env python3
"""
Tests for the toy dataset, the Frechet distance, report construction and
the latency harness.
"""

import os
import sys
import tempfile

from helpers import run_all, tiny_config

import numpy as np

from diffusion import NoiseSchedule, PrecisionPolicy
from errors import NumericalError, ShapeError
from evaluation import (
    FeatureProjector,
    FrechetStats,
    ToyDataset,
    bench_latency,
    default_bench_matrix,
    default_eval_matrix,
    evaluate_config,
    frechet_distance,
    frechet_stats,
    kernel_benchmarks,
    mixed_label,
    precision_mix,
    reference_stats,
    run_eval_matrix,
)
from numerics import PrecisionFormat
from qat import ptq_calibrate
from runtime import WorkerPool
from unet import build_unet
from utils.benchmark import measure


def _stats(mu, sigma):
    return FrechetStats(mu=np.asarray(mu, dtype=np.float64), sigma=np.asarray(sigma, dtype=np.float64), count=10)


def test_toy_dataset():
    ds = ToyDataset(count=50, image_size=8, seed=0)
    assert ds.images.shape == (50, 1, 8, 8) and ds.images.dtype == np.float32
    assert np.all(ds.images >= -1.0) and np.all(ds.images <= 1.0)
    assert np.array_equal(ds.images, ToyDataset(count=50, image_size=8, seed=0).images)
    assert not np.array_equal(ds.images, ToyDataset(count=50, image_size=8, seed=1).images)
    a, b = ds.halves()
    assert len(a) == 25 and len(b) == 25
    try:
        ToyDataset(count=0)
    except ValueError:
        pass
    else:
        raise AssertionError("empty dataset accepted")


def test_frechet_examples():
    eye = np.eye(3)
    assert frechet_distance(_stats(np.zeros(3), eye), _stats(np.zeros(3), eye)) <= 1e-9
    assert abs(frechet_distance(_stats(np.zeros(3), eye), _stats(np.ones(3), eye)) - 3.0) <= 1e-9
    # tr(I + 4I - 2 * 2I) = 1 per dimension
    assert abs(frechet_distance(_stats(np.zeros(2), np.eye(2)), _stats(np.zeros(2), 4 * np.eye(2))) - 2.0) <= 1e-9


def test_frechet_is_symmetric_and_nonnegative():
    rng = np.random.default_rng(0)
    for _ in range(20):
        d = int(rng.integers(1, 8))
        a = frechet_stats(rng.standard_normal((40, d)) @ rng.standard_normal((d, d)))
        b = frechet_stats(rng.standard_normal((40, d)) * 2 + 1)
        ab, ba = frechet_distance(a, b), frechet_distance(b, a)
        assert ab >= 0 and abs(ab - ba) <= 1e-6
        assert frechet_distance(a, a) <= 1e-9


def test_frechet_matches_product_eigenvalues():
    rng = np.random.default_rng(1)
    a = frechet_stats(rng.standard_normal((200, 4)))
    b = frechet_stats(rng.standard_normal((200, 4)) @ np.diag([1.0, 2.0, 0.5, 1.5]) + 0.3)
    # tr((S_a S_b)^1/2) from the eigenvalues of the plain product
    values = np.linalg.eigvals(a.sigma @ b.sigma)
    expected = (np.sum((a.mu - b.mu) ** 2) + np.trace(a.sigma) + np.trace(b.sigma)
                - 2.0 * np.sum(np.sqrt(np.clip(values.real, 0.0, None))))
    assert abs(frechet_distance(a, b) - expected) <= 1e-6 * max(1.0, expected)


def test_frechet_matches_diagonal_closed_form():
    rng = np.random.default_rng(5)
    for _ in range(50):
        d = int(rng.integers(1, 17))
        mu_a, mu_b = rng.normal(size=d), rng.normal(size=d)
        var_a, var_b = rng.uniform(0.1, 5.0, size=d), rng.uniform(0.1, 5.0, size=d)
        expected = float(np.sum((mu_a - mu_b) ** 2) + np.sum(var_a + var_b - 2.0 * np.sqrt(var_a * var_b)))
        got = frechet_distance(_stats(mu_a, np.diag(var_a)), _stats(mu_b, np.diag(var_b)))
        assert abs(got - expected) <= 1e-9 * max(1.0, expected), (d, got, expected)


def test_frechet_self_distance_on_ill_conditioned_stats():
    rng = np.random.default_rng(6)
    for _ in range(20):
        d = int(rng.integers(2, 33))
        n = int(rng.choice([d // 2 + 2, 4 * d]))
        scales = np.logspace(-3, 1, d)[rng.permutation(d)]
        mix = np.linalg.qr(rng.standard_normal((d, d)))[0]
        a = frechet_stats(rng.standard_normal((n, d)) * scales @ mix)
        assert frechet_distance(a, a) <= 1e-9, (d, n)


def test_frechet_stats_converge():
    rng = np.random.default_rng(7)
    mu = np.array([0.5, -1.0, 0.0, 2.0])
    sigma = np.diag([1.0, 0.5, 0.8, 0.3])
    sigma[0, 1] = sigma[1, 0] = 0.2
    stats = frechet_stats(rng.multivariate_normal(mu, sigma, size=100_000))
    assert np.max(np.abs(stats.mu - mu)) <= 0.02
    assert np.linalg.norm(stats.sigma - sigma) <= 0.05


def test_eigenvalue_tolerance_is_absolute():
    eye = _stats(np.zeros(2), np.eye(2))
    nearly = frechet_distance(_stats(np.zeros(2), np.diag([1.0, -5e-9])), eye)
    assert 0.0 <= nearly <= 1.0 + 1e-6
    try:
        frechet_distance(_stats(np.zeros(2), np.diag([1e6, -1e-7])), eye)
    except NumericalError:
        pass
    else:
        raise AssertionError("eigenvalue -1e-7 accepted next to a large one")


def test_frechet_stats_and_errors():
    feats = np.array([[0.0, 1.0], [2.0, 3.0], [4.0, 8.0]])
    stats = frechet_stats(feats)
    assert np.allclose(stats.mu, [2.0, 4.0])
    assert np.allclose(stats.sigma, np.cov(feats, rowvar=False))
    assert stats.count == 3
    for bad in (np.zeros((1, 3)), np.zeros(5)):
        try:
            frechet_stats(bad)
        except (ValueError, ShapeError):
            continue
        raise AssertionError(f"features of shape {bad.shape} accepted")
    try:
        frechet_distance(_stats(np.zeros(2), np.eye(2)), _stats(np.zeros(3), np.eye(3)))
    except ShapeError:
        pass
    else:
        raise AssertionError("dimension mismatch accepted")
    try:
        frechet_distance(_stats(np.zeros(2), -np.eye(2)), _stats(np.zeros(2), np.eye(2)))
    except NumericalError:
        pass
    else:
        raise AssertionError("negative definite covariance accepted")


def test_feature_projector_round_trip():
    proj = FeatureProjector(64, dim=8, seed=3)
    assert np.array_equal(proj.matrix, FeatureProjector(64, dim=8, seed=3).matrix)
    images = ToyDataset(count=10, image_size=8).images
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "projector.npy")
        proj.save(path)
        loaded = FeatureProjector.load(path)
    assert np.array_equal(loaded.features(images), proj.features(images))
    assert proj.features(images).shape == (10, 8)
    try:
        proj.features(np.zeros((2, 1, 4, 4)))
    except ShapeError:
        pass
    else:
        raise AssertionError("wrong image size accepted")


def test_same_distribution_scores_lower():
    ds = ToyDataset(count=800, image_size=8, seed=0)
    proj = FeatureProjector(64, dim=8)
    a, b = ds.halves()
    ref = reference_stats(a, proj)
    same = frechet_distance(reference_stats(b, proj), ref)
    noise = np.random.default_rng(0).standard_normal(b.shape)
    other = frechet_distance(reference_stats(noise, proj), ref)
    assert same < other


def test_labels_and_matrices():
    assert precision_mix(PrecisionPolicy(n=50, k=3)) == "bf16:6/int8:44"
    assert precision_mix(PrecisionPolicy.uniform(50, "fp32")) == "fp32"
    assert mixed_label(3) == "BF16 (6 Steps)/INT8"
    labels = [label for label, _ in default_eval_matrix(50)]
    assert labels == ["FP32", "BF16", "INT8", "BF16 (6 Steps)/INT8", "BF16 (10 Steps)/INT8"]
    bench = default_bench_matrix(50, boundary=5, with_fp32=True)
    assert [label for label, _ in bench] == ["FP32", "BF16", "BF16 (10 Steps)/INT8", "INT8"]
    assert all(policy.n == 50 for _, policy in bench)
    fp32_high = default_eval_matrix(50, high=PrecisionFormat.FP32)
    assert [label for label, _ in fp32_high] == ["FP32", "INT8", "FP32 (6 Steps)/INT8", "FP32 (10 Steps)/INT8"]
    assert fp32_high[2][1].high is PrecisionFormat.FP32 and fp32_high[2][1].low is PrecisionFormat.INT8
    bench = default_bench_matrix(50, boundary=3, with_fp32=True, high=PrecisionFormat.FP32, low=PrecisionFormat.BF16)
    assert [label for label, _ in bench] == ["FP32", "FP32 (6 Steps)/BF16", "BF16"]


def test_eval_matrix_runs_end_to_end():
    schedule = NoiseSchedule()
    teacher = build_unet(tiny_config(), seed=0)
    data = ToyDataset(count=32, image_size=8, seed=0).images
    student = ptq_calibrate(teacher, data, schedule, batches=1, batch_size=8)
    models = {PrecisionFormat.FP32: teacher, PrecisionFormat.BF16: teacher, PrecisionFormat.INT8: student}
    proj = FeatureProjector(64, dim=4)
    ref = reference_stats(data, proj)

    fd, images = evaluate_config(models, PrecisionPolicy(n=4, k=1), schedule, ref, proj, n_images=6, seed=0)
    assert fd >= 0 and images.shape == (6, 1, 8, 8)

    report = run_eval_matrix(models, default_eval_matrix(4, boundaries=(1, 2)), schedule, ref, proj,
                             n_images=6, seeds=(0, 1), batch_size=3)
    assert len(report.rows) == 5
    for row in report.rows:
        assert len(row.frechet_per_seed) == 2
        assert row.frechet == float(np.median(row.frechet_per_seed))
    # k=2 over 4 steps runs every step in BF16
    assert report.row("BF16 (4 Steps)/INT8").frechet == report.row("BF16").frechet


def test_measure_and_latency_bench():
    calls = []
    stats = measure(lambda: calls.append(1), repeats=5, warmup=2)
    assert len(calls) == 7 and stats.repeats == 5
    assert stats.p10_ns <= stats.median_ns <= stats.p90_ns
    try:
        measure(lambda: None, repeats=0)
    except ValueError:
        pass
    else:
        raise AssertionError("zero repeats accepted")

    teacher = build_unet(tiny_config(), seed=0)
    student = ptq_calibrate(teacher, ToyDataset(count=8, image_size=8).images, NoiseSchedule(), batches=1,
                            batch_size=4)
    models = {PrecisionFormat.BF16: teacher, PrecisionFormat.INT8: student}
    report = bench_latency(models, default_bench_matrix(3, boundary=1), NoiseSchedule(), repeats=2, warmup=0)
    assert [r.label for r in report.rows] == ["BF16", "BF16 (2 Steps)/INT8", "INT8"]
    for row in report.rows:
        assert 0 < row.p10_s <= row.median_s <= row.p90_s and row.repeats == 2


def test_kernel_benchmarks():
    with WorkerPool(2) as pool:
        rows = kernel_benchmarks(pool, repeats=2, warmup=0, groupnorm_shape=(2, 8, 8, 8), groups=2,
                                 mha_shape=(1, 2, 16, 4), gemm_shape=(8, 16, 8))
    assert [r.kernel for r in rows] == ["groupnorm_baseline", "groupnorm_channel_parallel", "fused_mha",
                                        "int8_gemm", "fp32_gemm"]
    assert all(r.threads == 2 and r.median_ns > 0 for r in rows)


def main():
    tests = [
        test_toy_dataset,
        test_frechet_examples,
        test_frechet_is_symmetric_and_nonnegative,
        test_frechet_matches_product_eigenvalues,
        test_frechet_matches_diagonal_closed_form,
        test_frechet_self_distance_on_ill_conditioned_stats,
        test_frechet_stats_converge,
        test_eigenvalue_tolerance_is_absolute,
        test_frechet_stats_and_errors,
        test_feature_projector_round_trip,
        test_same_distribution_scores_lower,
        test_labels_and_matrices,
        test_eval_matrix_runs_end_to_end,
        test_measure_and_latency_bench,
        test_kernel_benchmarks,
    ]
    sys.exit(run_all("Testing evaluation", tests))


if __name__ == "__main__":
    main()
