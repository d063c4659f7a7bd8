#!/usr/bin/env python3
"""
Quantization-aware training of the student Unet with knowledge distillation.

The pretrained Unet is copied twice: a frozen float teacher and a student
with fake-quant on every conv and linear layer. Each step draws one
(x0, t, eps) triple, runs the teacher without gradients and the student on
the tape, and minimizes

    total = mse(o_S, eps) + kd_weight * mse(o_S, o_T)

over the student weights only. Activation observers are updated by the
student forwards; after the last step their ranges are frozen together with
per-channel weight scales. Scales are not learned.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from diffusion import NoiseSchedule, draw_training_noise, forward_diffuse
from errors import NumericalError
from numerics import PrecisionFormat
from optim import Adam
from tensor import Tape, Tensor, add, mse_loss, mul_scalar
from unet import UnetModel, unet_forward
from utils.jsonl import JsonlWriter

try:
    from tqdm import tqdm
except ImportError:  # progress bars are optional
    tqdm = None

logger = logging.getLogger(__name__)


class QatConfig(BaseModel):
    """QAT hyperparameters."""
    model_config = ConfigDict(extra="forbid")

    max_steps: int = Field(500, ge=1, description="Number of QAT steps N")
    kd_weight: float = Field(1.0, ge=0, description="Weight of the distillation loss")
    lr: float = Field(1e-3, ge=0)
    batch_size: int = Field(32, ge=1)
    kd_loss: Literal["mse"] = "mse"
    seed: int = 0
    log_every: int = Field(10, ge=1)
    ptq_batches: int = Field(8, ge=1, description="Calibration batches for the PTQ baseline")


@dataclass
class QatState:
    teacher: UnetModel
    student: UnetModel
    optimizer: Adam
    config: QatConfig
    schedule: NoiseSchedule
    rng: np.random.Generator
    teacher_hash: str
    step: int = 0
    last_total: float = float("nan")
    history: List[Dict[str, float]] = field(default_factory=list)


def init_qat(pretrained: UnetModel, config: Optional[QatConfig] = None,
             schedule: Optional[NoiseSchedule] = None) -> QatState:
    """Frozen float teacher plus a fake-quantized student with the same weights."""
    config = config or QatConfig()
    teacher = pretrained.clone(role="teacher")
    teacher.precision = {}
    teacher.quant_enabled = False
    teacher.set_requires_grad(False)

    student = pretrained.to_student()
    student.set_requires_grad(True)

    state = QatState(
        teacher=teacher,
        student=student,
        optimizer=Adam(student.params, lr=config.lr),
        config=config,
        schedule=schedule or NoiseSchedule(),
        rng=np.random.default_rng(config.seed),
        teacher_hash=teacher.parameter_hash(),
    )
    logger.info(f"QAT initialized: {len(student.quantized_layers)} quantized layers, kd_weight={config.kd_weight}")
    return state


def observer_ranges(model: UnetModel) -> Dict[str, Optional[float]]:
    return {name: obs.running_max for name, obs in sorted(model.observers.items())}


def qat_step(state: QatState, batch: np.ndarray) -> Tuple[QatState, float, float]:
    """
    One distillation step on `batch` (clean images).

    Returns:
        (state, task_loss, kd_loss); state.last_total holds the combined loss

    Raises:
        NumericalError: The combined loss is not finite
    """
    if state.step >= state.config.max_steps:
        raise ValueError(f"QAT already ran its {state.config.max_steps} steps")

    t, eps = draw_training_noise(state.rng, state.schedule, batch.shape)
    x_t = forward_diffuse(state.schedule, batch, t, eps)

    o_t = unet_forward(state.teacher, x_t, t, PrecisionFormat.FP32, train_steps=state.schedule.train_steps)

    with Tape() as tape:
        tape.watch(*state.student.params.values())
        o_s = unet_forward(state.student, x_t, t, PrecisionFormat.INT8, int8_path="fake_quant", observe=True,
                           train_steps=state.schedule.train_steps)
        task = mse_loss(o_s, Tensor(eps, dtype=o_s.dtype))
        kd = mse_loss(o_s, o_t.detach())
        total = add(task, mul_scalar(kd, state.config.kd_weight))

    task_value, kd_value, total_value = task.item(), kd.item(), total.item()
    if not np.isfinite(total_value):
        raise NumericalError(
            f"QAT step {state.step}: non-finite total loss {total_value} (task {task_value}, kd {kd_value})"
        )

    grads = tape.backward(total)
    state.optimizer.step(grads)
    state.step += 1
    state.last_total = total_value
    return state, task_value, kd_value


def run_qat(state: QatState, dataset: np.ndarray, steps: Optional[int] = None,
            log_path: Optional[str] = None, progress: bool = False) -> UnetModel:
    """
    Run `steps` QAT steps (default config.max_steps) on uniformly sampled
    batches, then freeze the student's QuantParams.

    With steps=0 nothing is trained or frozen.
    """
    if len(dataset) == 0:
        raise ValueError("QAT needs a nonempty dataset")
    cfg = state.config
    steps = cfg.max_steps if steps is None else steps
    if steps > cfg.max_steps - state.step:
        raise ValueError(f"{steps} steps requested but only {cfg.max_steps - state.step} remain")

    iterator = range(steps)
    if progress and tqdm is not None:
        iterator = tqdm(iterator, desc="qat", unit="step")

    with JsonlWriter(log_path) as log:
        for k in iterator:
            idx = state.rng.integers(0, len(dataset), size=cfg.batch_size)
            state, task_loss, kd_loss = qat_step(state, dataset[idx])
            record = {"step": state.step, "task_loss": task_loss, "kd_loss": kd_loss, "total": state.last_total}
            state.history.append(record)
            if k % cfg.log_every == 0 or k == steps - 1:
                log.write({**record, "observer_ranges": observer_ranges(state.student)})
                logger.debug(f"QAT step {state.step}: task {task_loss:.5f} kd {kd_loss:.5f}")

    if steps > 0:
        state.student.freeze_quant_params()
        if state.teacher.parameter_hash() != state.teacher_hash:
            raise NumericalError("Teacher parameters changed during QAT")
        logger.info(f"QAT finished after {state.step} steps; QuantParams frozen")
    return state.student


def ptq_calibrate(pretrained: UnetModel, dataset: np.ndarray, schedule: NoiseSchedule,
                  batches: int = 8, batch_size: int = 32, seed: int = 0) -> UnetModel:
    """
    Post-training quantization baseline: observe activations on a few
    diffused batches, no weight updates, then freeze.
    """
    if len(dataset) == 0:
        raise ValueError("PTQ calibration needs a nonempty dataset")
    student = pretrained.to_student()
    rng = np.random.default_rng(seed)
    for _ in range(batches):
        idx = rng.integers(0, len(dataset), size=batch_size)
        batch = dataset[idx]
        t, eps = draw_training_noise(rng, schedule, batch.shape)
        x_t = forward_diffuse(schedule, batch, t, eps)
        unet_forward(student, x_t, t, PrecisionFormat.INT8, int8_path="fake_quant", observe=True,
                     train_steps=schedule.train_steps)
    student.freeze_quant_params()
    logger.info(f"PTQ calibration done over {batches} batches")
    return student
