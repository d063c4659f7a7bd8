#!/usr/bin/env python3
"""
Tests for the toy Unet: layout, execution paths per precision format,
quantizer state and end-to-end gradients.
"""

import sys

from helpers import numeric_gradient, rel_error, run_all, tiny_config

import numpy as np
from pydantic import ValidationError

from errors import CalibrationError, ShapeError
from numerics import PrecisionFormat
from runtime import WorkerPool
from tensor import Tape, Tensor, backward, mse_loss
from unet import (
    UnetConfig,
    build_layout,
    build_unet,
    timestep_embedding,
    trace_activation_lifetimes,
    unet_forward,
)


def _inputs(config, batch=2, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, config.in_channels, config.image_size, config.image_size)).astype(np.float32)
    t = rng.integers(0, 1000, size=batch)
    return x, t


def _calibrated_student(teacher, batches=3):
    student = teacher.to_student()
    for seed in range(batches):
        x, t = _inputs(teacher.config, seed=100 + seed)
        unet_forward(student, x, t, PrecisionFormat.INT8, int8_path="fake_quant", observe=True)
    student.freeze_quant_params()
    return student


def test_config_validation():
    for bad in ({"base_channels": 6, "groups": 4}, {"time_dim": 7}, {"image_size": 7},
                {"heads": 3}, {"unknown": 1}):
        try:
            UnetConfig(**bad)
        except ValidationError:
            continue
        raise AssertionError(f"invalid config accepted: {bad}")
    assert UnetConfig().level_channels == [16, 32]


def test_layout_and_initialization():
    config = tiny_config()
    layout = build_layout(config)
    for name in ("time.lin1", "conv_in", "down0.down", "mid.attn.q", "up1.up", "norm_out", "conv_out"):
        assert name in layout, name
    assert layout["conv_in"].shape == (4, 1, 3, 3)
    assert layout["down1.res.skip"].shape[:2] == (8, 4)

    model = build_unet(config, seed=0)
    assert set(model.params) == set(model.expected_param_shapes())
    assert np.all(model.params["norm_out.weight"].data == 1.0)
    assert np.all(model.params["conv_in.bias"].data == 0.0)
    assert model.role == "teacher" and model.quantized_layers == []
    assert build_unet(config, seed=0).parameter_hash() == model.parameter_hash()
    assert build_unet(config, seed=1).parameter_hash() != model.parameter_hash()


def test_timestep_embedding():
    emb = timestep_embedding(np.array([0, 5]), 8)
    assert emb.shape == (2, 8) and emb.dtype == np.float32
    assert np.all(emb[0, :4] == 0.0) and np.all(emb[0, 4:] == 1.0)
    assert abs(emb[1, 0] - np.sin(5.0)) <= 1e-6
    assert abs(emb[1, 3] - np.sin(5.0 / 10000)) <= 1e-6
    assert not np.array_equal(emb[1], timestep_embedding(np.array([6]), 8)[0])
    try:
        timestep_embedding(np.array([1]), 5)
    except ValueError:
        pass
    else:
        raise AssertionError("odd embedding dim accepted")


def test_forward_shapes_for_every_path():
    teacher = build_unet(tiny_config(), seed=0)
    student = _calibrated_student(teacher)
    x, t = _inputs(teacher.config)
    with WorkerPool(2) as pool:
        for fmt in (PrecisionFormat.FP32, PrecisionFormat.BF16):
            out = unet_forward(teacher, x, t, fmt, pool=pool)
            assert out.shape == x.shape and out.dtype == np.float32
            assert np.all(np.isfinite(out.data))
        for path in ("kernel", "simulate", "fake_quant"):
            out = unet_forward(student, x, t, PrecisionFormat.INT8, int8_path=path, pool=pool)
            assert out.shape == x.shape and np.all(np.isfinite(out.data)), path


def test_forward_is_deterministic():
    teacher = build_unet(tiny_config(), seed=3)
    student = _calibrated_student(teacher)
    x, t = _inputs(teacher.config, seed=4)
    for model, fmt in ((teacher, "fp32"), (teacher, "bf16"), (student, "int8")):
        a = unet_forward(model, x, t, fmt, pool=WorkerPool(1)).data
        with WorkerPool(4) as pool:
            b = unet_forward(model, x, t, fmt, pool=pool).data
        assert np.array_equal(a, b), fmt


def test_int8_kernel_matches_simulation():
    teacher = build_unet(tiny_config(), seed=5)
    student = _calibrated_student(teacher)
    for seed in range(3):
        x, t = _inputs(teacher.config, seed=seed)
        kernel = unet_forward(student, x, t, PrecisionFormat.INT8, int8_path="kernel").data
        simulated = unet_forward(student, x, t, PrecisionFormat.INT8, int8_path="simulate").data
        assert np.max(np.abs(kernel - simulated)) <= 1e-4


def test_reduced_precision_stays_close_to_fp32():
    teacher = build_unet(tiny_config(), seed=6)
    student = _calibrated_student(teacher)
    x, t = _inputs(teacher.config, seed=7)
    ref = unet_forward(teacher, x, t).data
    bf16 = unet_forward(teacher, x, t, PrecisionFormat.BF16).data
    int8 = unet_forward(student, x, t, PrecisionFormat.INT8).data
    assert not np.array_equal(bf16, ref)
    assert rel_error(bf16, ref) <= 0.05
    assert rel_error(int8, ref) <= 0.5


def test_student_with_quantizers_disabled_equals_teacher():
    teacher = build_unet(tiny_config(), seed=8)
    student = _calibrated_student(teacher)
    student.quant_enabled = False
    x, t = _inputs(teacher.config, seed=9)
    assert np.array_equal(unet_forward(student, x, t, PrecisionFormat.INT8).data,
                          unet_forward(teacher, x, t).data)
    assert len(student.quantized_layers) == sum(1 for s in student.layers.values() if s.kind != "groupnorm")


def test_calibration_errors():
    teacher = build_unet(tiny_config(), seed=0)
    x, t = _inputs(teacher.config)
    try:
        unet_forward(teacher, x, t, PrecisionFormat.INT8)
    except CalibrationError:
        pass
    else:
        raise AssertionError("teacher ran INT8")

    student = teacher.to_student()
    assert not student.is_calibrated
    try:
        unet_forward(student, x, t, PrecisionFormat.INT8, int8_path="kernel")
    except CalibrationError as e:
        assert "conv_in" in str(e) or "time.lin1" in str(e)
    else:
        raise AssertionError("uncalibrated student ran the integer kernel")

    student.freeze_quant_params()
    assert not student.is_calibrated
    assert student.weight_params and not student.act_params


def test_shape_errors():
    model = build_unet(tiny_config(), seed=0)
    for x, t in ((np.zeros((1, 2, 8, 8)), [0]), (np.zeros((1, 1, 6, 6)), [0]),
                 (np.zeros((2, 1, 8, 8)), [0, 1, 2])):
        try:
            unet_forward(model, x, t)
        except ShapeError:
            continue
        raise AssertionError(f"accepted input {x.shape} with {len(t)} timesteps")


def test_timestep_range():
    model = build_unet(tiny_config(), seed=0)
    x = np.zeros((2, 1, 8, 8), dtype=np.float32)
    assert unet_forward(model, x, [0, 999]).shape == x.shape
    assert unet_forward(model, x, [0, 9], train_steps=10).shape == x.shape
    for t, train_steps in (([-1, 0], 1000), ([0, 1000], 1000), ([0, 10], 10)):
        try:
            unet_forward(model, x, t, train_steps=train_steps)
        except ValueError:
            continue
        raise AssertionError(f"timesteps {t} accepted with train_steps={train_steps}")


def test_quantized_weight_layout():
    student = _calibrated_student(build_unet(tiny_config(), seed=0))
    qw, params = student.quantized_weight("conv_in")
    assert qw.dtype == np.int8 and qw.shape == (9, 4)
    assert params.axis == 1 and len(params.scale) == 4
    assert np.max(np.abs(qw)) == 127
    qw, params = student.quantized_weight("time.lin1")
    assert qw.shape == student.layers["time.lin1"].shape


def test_fake_quant_path_trains_every_weight():
    student = build_unet(tiny_config(), seed=0).to_student()
    x, t = _inputs(student.config)
    with Tape() as tape:
        out = unet_forward(student, x, t, PrecisionFormat.INT8, int8_path="fake_quant", observe=True)
        loss = mse_loss(out, Tensor(np.zeros_like(x)))
    grads = backward(tape, loss)
    assert set(grads) == set(student.params)
    assert np.any(grads["conv_in.weight"] != 0)
    assert all(obs.count == 1 for obs in student.observers.values())


def test_full_network_gradient_matches_finite_differences():
    config = UnetConfig(base_channels=4, channel_mults=[1, 2], groups=2, time_dim=8, image_size=4, heads=2)
    student = build_unet(config, seed=11).to_student().clone(dtype=np.float64)
    student.quant_enabled = False
    rng = np.random.default_rng(12)
    for p in student.params.values():
        p.data += 0.1 * rng.standard_normal(p.shape)

    x = rng.standard_normal((2, 1, 4, 4))
    t = np.array([3, 700])
    target = Tensor(rng.standard_normal(x.shape), dtype=np.float64)

    def loss_value():
        return float(mse_loss(unet_forward(student, x, t, PrecisionFormat.INT8), target).item())

    with Tape() as tape:
        loss = mse_loss(unet_forward(student, x, t, PrecisionFormat.INT8), target)
    grads = backward(tape, loss)

    for name in ("time.lin1.weight", "conv_in.weight", "down0.res.norm1.weight", "mid.attn.q.weight",
                 "mid.attn.proj.bias", "up0.res.skip.weight", "conv_out.bias"):
        param = student.params[name]
        indices = rng.choice(param.size, size=min(6, param.size), replace=False)
        numeric = numeric_gradient(loss_value, param, indices)
        analytic = grads[name].reshape(-1)[indices]
        assert rel_error(analytic, numeric) <= 1e-2, name


def test_activation_lifetimes():
    model = build_unet(tiny_config(), seed=0)
    lifetimes = trace_activation_lifetimes(model, batch=2)
    assert len(lifetimes) > 20
    assert all(lt.start <= lt.end and lt.nbytes > 0 for lt in lifetimes)
    assert lifetimes[-1].end == len(lifetimes) - 1
    assert len({lt.name for lt in lifetimes}) == len(lifetimes)


def main():
    tests = [
        test_config_validation,
        test_layout_and_initialization,
        test_timestep_embedding,
        test_forward_shapes_for_every_path,
        test_forward_is_deterministic,
        test_int8_kernel_matches_simulation,
        test_reduced_precision_stays_close_to_fp32,
        test_student_with_quantizers_disabled_equals_teacher,
        test_calibration_errors,
        test_shape_errors,
        test_timestep_range,
        test_quantized_weight_layout,
        test_fake_quant_path_trains_every_weight,
        test_full_network_gradient_matches_finite_differences,
        test_activation_lifetimes,
    ]
    sys.exit(run_all("Testing Unet", tests))


if __name__ == "__main__":
    main()
