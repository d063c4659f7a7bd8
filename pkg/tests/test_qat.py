#!/usr/bin/env python3
"""
Tests for quantization-aware training with distillation and for the PTQ
calibration baseline.
"""

import os
import sys
import tempfile

from helpers import run_all, tiny_config

import numpy as np
from pydantic import ValidationError

from diffusion import NoiseSchedule, draw_training_noise, forward_diffuse, train_step
from errors import NumericalError
from evaluation import ToyDataset
from numerics import PrecisionFormat
from optim import Adam
from qat import QatConfig, init_qat, observer_ranges, ptq_calibrate, qat_step, run_qat
from unet import build_unet, unet_forward
from utils.jsonl import read_jsonl


def _setup(**overrides):
    config = QatConfig(**{"max_steps": 5, "batch_size": 4, "lr": 1e-3, "seed": 3, **overrides})
    pretrained = build_unet(tiny_config(), seed=0)
    data = ToyDataset(count=32, image_size=8, seed=1).images
    return pretrained, config, data


def test_config_validation():
    for bad in ({"max_steps": 0}, {"kd_weight": -1.0}, {"kd_loss": "kl"}, {"extra": 1}):
        try:
            QatConfig(**bad)
        except ValidationError:
            continue
        raise AssertionError(f"invalid QAT config accepted: {bad}")


def test_init_splits_teacher_and_student():
    pretrained, config, _ = _setup()
    state = init_qat(pretrained, config)
    assert state.teacher.role == "teacher" and state.student.role == "student"
    assert all(not p.requires_grad for p in state.teacher.params.values())
    assert all(p.requires_grad for p in state.student.params.values())
    assert state.teacher.parameter_hash() == state.student.parameter_hash() == pretrained.parameter_hash()
    assert state.student.quant_enabled and not state.student.is_calibrated
    assert set(observer_ranges(state.student).values()) == {None}


def test_step_combines_task_and_distillation():
    pretrained, config, data = _setup(kd_weight=0.5)
    state = init_qat(pretrained, config)
    state, task, kd = qat_step(state, data[:4])
    assert task > 0 and kd > 0
    assert abs(state.last_total - (task + 0.5 * kd)) <= 1e-5 * max(1.0, state.last_total)
    assert state.step == 1
    assert state.student.parameter_hash() != state.teacher.parameter_hash()
    assert state.teacher.parameter_hash() == state.teacher_hash
    assert all(v is not None for v in observer_ranges(state.student).values())


def test_zero_kd_weight_matches_plain_fake_quant_training():
    pretrained, config, data = _setup(kd_weight=0.0)
    state = init_qat(pretrained, config)

    plain = pretrained.to_student()
    optimizer = Adam(plain.params, lr=config.lr)
    rng = np.random.default_rng(config.seed)

    for i in range(3):
        batch = data[4 * i:4 * i + 4]
        state, task, _ = qat_step(state, batch)
        value = train_step(plain, batch, state.schedule, optimizer, rng, fmt=PrecisionFormat.INT8,
                           int8_path="fake_quant", observe=True)
        assert task == value, f"step {i}"

    for name, p in plain.params.items():
        assert np.array_equal(p.data, state.student.params[name].data), name
    assert observer_ranges(plain) == observer_ranges(state.student)


def test_run_qat_freezes_and_logs():
    pretrained, config, data = _setup(log_every=2)
    state = init_qat(pretrained, config)
    with tempfile.TemporaryDirectory() as tmp:
        log = os.path.join(tmp, "qat.jsonl")
        student = run_qat(state, data, log_path=log)
        records = read_jsonl(log)
    assert student is state.student and state.step == 5
    assert student.is_calibrated
    assert set(student.act_params) == set(student.quantized_layers)
    assert [r["step"] for r in records] == [1, 3, 5]
    assert set(records[0]) == {"step", "task_loss", "kd_loss", "total", "observer_ranges"}
    assert len(state.history) == 5

    x = data[:2]
    out = unet_forward(student, x, np.array([10, 900]), PrecisionFormat.INT8)
    assert np.all(np.isfinite(out.data))


def test_run_qat_step_limits():
    pretrained, config, data = _setup()
    state = init_qat(pretrained, config)
    run_qat(state, data, steps=0)
    assert state.step == 0 and not state.student.is_calibrated
    try:
        run_qat(state, data, steps=6)
    except ValueError:
        pass
    else:
        raise AssertionError("more steps than max_steps accepted")
    run_qat(state, data)
    try:
        qat_step(state, data[:4])
    except ValueError:
        pass
    else:
        raise AssertionError("step past max_steps accepted")


def test_non_finite_loss_is_reported():
    pretrained, config, data = _setup(kd_weight=float("inf"))
    state = init_qat(pretrained, config)
    try:
        qat_step(state, data[:4])
    except NumericalError as e:
        assert "QAT step 0" in str(e)
    else:
        raise AssertionError("infinite loss accepted")
    assert state.step == 0


def test_qat_is_reproducible():
    hashes = []
    for _ in range(2):
        pretrained, config, data = _setup()
        state = init_qat(pretrained, config)
        run_qat(state, data, steps=2)
        hashes.append(state.student.parameter_hash())
    assert hashes[0] == hashes[1]


def test_quantized_student_starts_away_from_teacher():
    pretrained, config, data = _setup()
    state = init_qat(pretrained, config)
    _, _, kd = qat_step(state, data[:4])
    assert kd > 0


def test_single_step_run_updates_once():
    pretrained, config, data = _setup()
    state = init_qat(pretrained, config)
    before = {name: p.data.copy() for name, p in state.student.params.items()}
    run_qat(state, data, steps=1)
    assert state.optimizer.step_count == 1 and state.step == 1 and len(state.history) == 1
    for name in state.student.quantized_layers:
        assert not np.array_equal(before[f"{name}.weight"], state.student.params[f"{name}.weight"].data), name
    for name, p in state.teacher.params.items():
        assert np.array_equal(before[name], p.data), name


def test_split_run_matches_single_run():
    pretrained, config, data = _setup()
    whole = init_qat(pretrained, config)
    run_qat(whole, data, steps=5)

    split = init_qat(pretrained, config)
    run_qat(split, data, steps=2)
    assert split.student.is_calibrated
    run_qat(split, data, steps=3)

    assert [r["total"] for r in split.history] == [r["total"] for r in whole.history]
    assert split.student.parameter_hash() == whole.student.parameter_hash()
    assert observer_ranges(split.student) == observer_ranges(whole.student)
    for name, params in whole.student.act_params.items():
        assert params == split.student.act_params[name], name


def _int8_gap(student, teacher, schedule, data, seed):
    rng = np.random.default_rng(seed)
    x0 = data[:8]
    t, eps = draw_training_noise(rng, schedule, x0.shape)
    x_t = forward_diffuse(schedule, x0, t, eps)
    out_s = unet_forward(student, x_t, t, PrecisionFormat.INT8).data
    out_t = unet_forward(teacher, x_t, t, PrecisionFormat.FP32).data
    return float(np.mean((out_s - out_t) ** 2))


def test_strong_distillation_keeps_student_near_teacher():
    gaps = {0.0: [], 1e3: []}
    for seed in range(3):
        for kd_weight in gaps:
            pretrained, config, data = _setup(kd_weight=kd_weight, max_steps=10, lr=5e-3, seed=seed)
            state = init_qat(pretrained, config)
            student = run_qat(state, data)
            gaps[kd_weight].append(_int8_gap(student, state.teacher, state.schedule, data, seed=100 + seed))
    assert np.median(gaps[1e3]) < np.median(gaps[0.0]), gaps


def test_ptq_calibration_keeps_weights():
    pretrained, _, data = _setup()
    student = ptq_calibrate(pretrained, data, NoiseSchedule(), batches=2, batch_size=4, seed=0)
    assert student.is_calibrated
    assert student.parameter_hash() == pretrained.parameter_hash()
    assert all(obs.count == 2 for obs in student.observers.values())
    try:
        ptq_calibrate(pretrained, data[:0], NoiseSchedule())
    except ValueError:
        pass
    else:
        raise AssertionError("empty calibration set accepted")


def main():
    tests = [
        test_config_validation,
        test_init_splits_teacher_and_student,
        test_step_combines_task_and_distillation,
        test_zero_kd_weight_matches_plain_fake_quant_training,
        test_run_qat_freezes_and_logs,
        test_run_qat_step_limits,
        test_non_finite_loss_is_reported,
        test_qat_is_reproducible,
        test_quantized_student_starts_away_from_teacher,
        test_single_step_run_updates_once,
        test_split_run_matches_single_run,
        test_strong_distillation_keeps_student_near_teacher,
        test_ptq_calibration_keeps_weights,
    ]
    sys.exit(run_all("Testing QAT", tests))


if __name__ == "__main__":
    main()
