#!/usr/bin/env python3
"""
DDPM forward/reverse processes, the training loop and the time-dependent
mixed-precision policy.

Sampling runs n strided steps over the training grid. Step i = 0 is the
noisiest step (start of denoising). A PrecisionPolicy with boundary k runs
the first k and the last k steps in the high format and everything in
between in the low format.
"""

import logging
import math
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from errors import CalibrationError, NumericalError, ShapeError
from numerics import PrecisionFormat
from optim import Adam
from runtime import WorkerPool
from tensor import Tape, Tensor, mse_loss
from unet import UnetModel, unet_forward
from utils.jsonl import JsonlWriter

try:
    from tqdm import tqdm
except ImportError:  # progress bars are optional
    tqdm = None

logger = logging.getLogger(__name__)

Predictor = Callable[[np.ndarray, np.ndarray], Tensor]
ModelSet = Union[UnetModel, Mapping[PrecisionFormat, UnetModel]]


class NoiseSchedule:
    """Linear beta schedule with its alpha and cumulative alpha-bar arrays."""

    def __init__(self, train_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        if train_steps < 1:
            raise ValueError(f"train_steps must be >= 1, got {train_steps}")
        if not 0 < beta_start < 1 or not 0 < beta_end < 1:
            raise ValueError(f"betas must lie in (0, 1), got {beta_start}..{beta_end}")
        if train_steps > 1 and not beta_start < beta_end:
            raise ValueError(f"beta_start must be below beta_end, got {beta_start} >= {beta_end}")
        self.train_steps = train_steps
        self.betas = np.linspace(beta_start, beta_end, train_steps, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def __len__(self) -> int:
        return self.train_steps

    def check_timesteps(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.train_steps):
            raise ValueError(f"timestep out of range [0, {self.train_steps}): {t.min()}..{t.max()}")
        return t.astype(np.int64)


class PrecisionPolicy(BaseModel):
    """
    Time-dependent precision schedule.

    n total sampling steps; the first k and last k use `high`, the rest `low`.
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    n: int = Field(..., ge=1)
    k: int = Field(..., ge=0)
    high: PrecisionFormat = PrecisionFormat.BF16
    low: PrecisionFormat = PrecisionFormat.INT8

    @field_validator("high", "low", mode="before")
    @classmethod
    def _parse_format(cls, v):
        return PrecisionFormat.parse(v)

    @model_validator(mode="after")
    def _check(self) -> 'PrecisionPolicy':
        if self.k > math.ceil(self.n / 2):
            raise ValueError(f"boundary k={self.k} exceeds ceil(n/2)={math.ceil(self.n / 2)} for n={self.n}")
        degenerate = self.k == 0 or 2 * self.k >= self.n
        if self.high == self.low and not degenerate:
            raise ValueError(f"high and low formats are both {self.high.value}; use k=0 for a uniform policy")
        return self

    @classmethod
    def uniform(cls, n: int, fmt) -> 'PrecisionPolicy':
        fmt = PrecisionFormat.parse(fmt)
        return cls(n=n, k=0, high=fmt, low=fmt)

    @property
    def formats(self) -> List[PrecisionFormat]:
        return sorted({precision_for_step(self, i) for i in range(self.n)}, key=lambda f: f.value)

    @property
    def high_steps(self) -> int:
        return min(2 * self.k, self.n)


def precision_for_step(policy: PrecisionPolicy, i: int) -> PrecisionFormat:
    """high iff i < k or i >= n - k, else low."""
    if not 0 <= i < policy.n:
        raise IndexError(f"step index {i} out of range [0, {policy.n})")
    return policy.high if i < policy.k or i >= policy.n - policy.k else policy.low


def step_formats(policy: PrecisionPolicy) -> List[str]:
    return [precision_for_step(policy, i).value for i in range(policy.n)]


def sampling_timesteps(schedule: NoiseSchedule, n: int) -> List[int]:
    """Trailing strided grid: step i uses T - 1 - i * (T // n)."""
    if not 1 <= n <= schedule.train_steps:
        raise ValueError(f"need 1 <= n <= {schedule.train_steps} sampling steps, got {n}")
    stride = schedule.train_steps // n
    return [schedule.train_steps - 1 - i * stride for i in range(n)]


# =========================
#  Forward / reverse process
# =========================
def forward_diffuse(schedule: NoiseSchedule, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """x_t = sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps, with t per sample or shared."""
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 shape {x0.shape} does not match noise shape {eps.shape}")
    t = schedule.check_timesteps(t)
    ab = schedule.alpha_bars[t]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return out.astype(x0.dtype, copy=False)


def reverse_step(schedule: NoiseSchedule, x: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int,
                 noise: Optional[np.ndarray] = None) -> np.ndarray:
    """
    One ancestral update from t to t_prev (t_prev = -1 means the clean image).

    alpha = ab_t / ab_prev, beta = 1 - alpha,
    x_prev = (x - beta / sqrt(1 - ab_t) * eps_hat) / sqrt(alpha) + sigma * noise,
    sigma^2 = beta * (1 - ab_prev) / (1 - ab_t). No clipping.
    """
    ab = float(schedule.alpha_bars[t])
    ab_prev = float(schedule.alpha_bars[t_prev]) if t_prev >= 0 else 1.0
    alpha = ab / ab_prev
    beta = 1.0 - alpha
    out = (x - (beta / math.sqrt(1.0 - ab)) * eps_hat) * (1.0 / math.sqrt(alpha))
    if noise is not None and t_prev >= 0:
        sigma = math.sqrt(beta * (1.0 - ab_prev) / (1.0 - ab))
        out = out + sigma * noise
    return out.astype(x.dtype, copy=False)


def _resolve_models(models: ModelSet, policy: PrecisionPolicy) -> Dict[PrecisionFormat, UnetModel]:
    resolved: Dict[PrecisionFormat, UnetModel] = {}
    for fmt in policy.formats:
        if isinstance(models, UnetModel):
            model = models
        else:
            model = models.get(fmt)
            if model is None:
                raise CalibrationError(f"No model supplied for {fmt.value} steps")
        if fmt is PrecisionFormat.INT8 and model.quant_enabled and not model.is_calibrated:
            raise CalibrationError(f"INT8 steps requested but the {model.role} model is not calibrated")
        resolved[fmt] = model
    return resolved


def sample(models: ModelSet, policy: PrecisionPolicy, schedule: NoiseSchedule, seed: int = 0,
           num_images: int = 1, stochastic: bool = True, int8_path: str = "kernel",
           batch_size: Optional[int] = None, pool: Optional[WorkerPool] = None,
           predictor: Optional[Callable[[np.ndarray, int, PrecisionFormat], np.ndarray]] = None) -> np.ndarray:
    """
    Strided DDPM ancestral sampling under a precision policy.

    Args:
        models: One model for every format, or a mapping format -> model
        policy: Steps n, boundary k and the two formats
        schedule: Training noise schedule
        seed: Seed of the initial noise and of every per-step noise draw
        num_images: Number of images to generate
        stochastic: False zeroes the variance term
        int8_path: INT8 execution path passed to unet_forward
        batch_size: Images per chunk (default: all at once); chunk c draws
            from its own generator seeded with (seed, c)
        pool: Worker pool for the kernels
        predictor: Replaces the Unet with fn(x, t, fmt) -> noise estimate

    Returns:
        Images [num_images, C, H, W] (float32)
    """
    resolved = _resolve_models(models, policy) if predictor is None else {}
    if isinstance(models, UnetModel):
        cfg = models.config
    elif models:
        cfg = next(iter(models.values())).config
    else:
        raise ValueError("sample needs at least one model to know the image shape")
    shape = (cfg.in_channels, cfg.image_size, cfg.image_size)

    timesteps = sampling_timesteps(schedule, policy.n)
    formats = [precision_for_step(policy, i) for i in range(policy.n)]
    batch_size = batch_size or num_images
    chunks = []
    for c, start in enumerate(range(0, num_images, batch_size)):
        count = min(batch_size, num_images - start)
        rng = np.random.default_rng([seed, c])
        x = rng.standard_normal((count,) + shape).astype(np.float32)
        for i, t in enumerate(timesteps):
            t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else -1
            fmt = formats[i]
            if predictor is not None:
                eps_hat = predictor(x, t, fmt)
            else:
                eps_hat = unet_forward(resolved[fmt], x, t, fmt, int8_path=int8_path, pool=pool,
                                          train_steps=schedule.train_steps).data
            noise = rng.standard_normal(x.shape).astype(np.float32) if stochastic and t_prev >= 0 else None
            x = reverse_step(schedule, x, eps_hat, t, t_prev, noise)
        chunks.append(x)
        logger.debug(f"Sampled chunk {c} ({count} images, {policy.n} steps)")
    return np.concatenate(chunks, axis=0)


# =========================
#  Training
# =========================
def draw_training_noise(rng: np.random.Generator, schedule: NoiseSchedule,
                        shape: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Uniform timesteps and standard normal noise for one batch."""
    t = rng.integers(0, schedule.train_steps, size=shape[0])
    eps = rng.standard_normal(shape).astype(np.float32)
    return t, eps


def train_step(model: UnetModel, batch: np.ndarray, schedule: NoiseSchedule, optimizer: Adam,
               rng: np.random.Generator, fmt=PrecisionFormat.FP32, int8_path: str = "fake_quant",
               observe: bool = False, predictor: Optional[Predictor] = None, step: int = 0) -> float:
    """
    One epsilon-prediction update: loss = mse(eps_hat, eps).

    Raises:
        NumericalError: The loss is not finite
    """
    t, eps = draw_training_noise(rng, schedule, batch.shape)
    x_t = forward_diffuse(schedule, batch, t, eps)

    with Tape() as tape:
        tape.watch(*model.params.values())
        if predictor is not None:
            eps_hat = predictor(x_t, t)
        else:
            eps_hat = unet_forward(model, x_t, t, fmt, int8_path=int8_path, observe=observe,
                                   train_steps=schedule.train_steps)
        loss = mse_loss(eps_hat, Tensor(eps, dtype=eps_hat.dtype))

    value = loss.item()
    if not np.isfinite(value):
        raise NumericalError(f"Training step {step}: non-finite loss {value}")

    grads = tape.backward(loss) if tape.produced(loss) else {}
    optimizer.step(grads)
    return value


def train_model(model: UnetModel, images: np.ndarray, schedule: NoiseSchedule, steps: int,
                batch_size: int = 32, lr: float = 1e-3, seed: int = 0, log_path: Optional[str] = None,
                log_every: int = 50, progress: bool = False) -> List[float]:
    """
    Plain FP32 denoising training of `model` on `images`.

    Returns:
        Loss of every step
    """
    if len(images) == 0:
        raise ValueError("training needs a nonempty dataset")
    rng = np.random.default_rng(seed)
    optimizer = Adam(model.params, lr=lr)
    losses: List[float] = []

    iterator = range(steps)
    if progress and tqdm is not None:
        iterator = tqdm(iterator, desc="train", unit="step")

    with JsonlWriter(log_path) as log:
        for step in iterator:
            idx = rng.integers(0, len(images), size=batch_size)
            loss = train_step(model, images[idx], schedule, optimizer, rng, step=step)
            losses.append(loss)
            if step % log_every == 0 or step == steps - 1:
                log.write({"step": step, "loss": loss})
                logger.debug(f"step {step}: loss {loss:.5f}")

    if losses:
        logger.info(f"Trained {steps} steps, final loss {losses[-1]:.5f}")
    return losses
