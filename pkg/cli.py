#!/usr/bin/env python3
"""
qdiff command line.

    python cli.py train  [--config run.json] [--set train.steps=2000]
    python cli.py qat    [--ptq-only]
    python cli.py sample [--steps 50] [--boundary 3] [--seed 0] [--compare]
    python cli.py eval
    python cli.py bench  [--with-fp32]

Every command reads one JSON RunConfig (or the defaults), applies --set
overrides and writes its artifacts under the output directory. Exit codes:
0 ok, 2 configuration or input-file error, 3 runtime or numerical error; a
failure prints exactly one JSON line {"error": ..., "message": ...} on
stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from diffusion import NoiseSchedule, PrecisionPolicy, sample, step_formats, train_model
from errors import CheckpointError, ConfigError, QDiffError
from evaluation import (
    FeatureProjector,
    ToyDataset,
    bench_latency,
    default_bench_matrix,
    default_eval_matrix,
    kernel_benchmarks,
    reference_stats,
    run_eval_matrix,
)
from kernels import buffer_plan
from numerics import PrecisionFormat
from qat import QatConfig, init_qat, ptq_calibrate, run_qat
from runtime import WorkerPool, close_worker_pool, get_worker_pool, set_worker_pool
from unet import UnetConfig, UnetModel, build_unet, trace_activation_lifetimes
from utils.checkpoint import load_model, save_model
from utils.overrides import OverrideHandler
from display.images import IMAGE_FORMATS, comparison_grid, save_samples, write_image
from display.report import (
    buffer_plan_summary,
    write_kernel_csv,
    write_report_csv,
    write_report_markdown,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


# =========================
#  Configuration
# =========================
class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScheduleConfig(_Section):
    train_steps: int = Field(1000, ge=1)
    beta_start: float = Field(1e-4, gt=0, lt=1)
    beta_end: float = Field(0.02, gt=0, lt=1)

    def build(self) -> NoiseSchedule:
        return NoiseSchedule(self.train_steps, self.beta_start, self.beta_end)


class TrainConfig(_Section):
    steps: int = Field(2000, ge=0)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(1e-3, ge=0)
    seed: int = 0
    log_every: int = Field(50, ge=1)


class PolicyConfig(_Section):
    steps: int = Field(50, ge=1)
    boundary: int = Field(3, ge=0)
    high: PrecisionFormat = PrecisionFormat.BF16
    low: PrecisionFormat = PrecisionFormat.INT8

    def build(self, steps: Optional[int] = None, boundary: Optional[int] = None) -> PrecisionPolicy:
        return PrecisionPolicy(n=self.steps if steps is None else steps,
                               k=self.boundary if boundary is None else boundary,
                               high=self.high, low=self.low)


class DatasetConfig(_Section):
    seed: int = 0
    count: int = Field(2000, ge=2)


class EvalConfig(_Section):
    n_images: int = Field(500, ge=2)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4], min_length=1)
    feature_dim: int = Field(32, ge=1)
    projection_seed: int = 7919
    sample_batch: int = Field(100, ge=1)
    boundaries: List[int] = Field(default_factory=lambda: [3, 5])


class BenchConfig(_Section):
    repeats: int = Field(20, ge=1)
    warmup: int = Field(3, ge=0)
    batch: int = Field(1, ge=1)
    boundary: int = Field(5, ge=0)
    kernel_repeats: int = Field(20, ge=1)


class RunConfig(_Section):
    """Everything one command needs."""
    unet: UnetConfig = Field(default_factory=UnetConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    qat: QatConfig = Field(default_factory=QatConfig)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)
    output_dir: str = "runs"
    threads: Optional[int] = Field(None, ge=1)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunConfig':
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            first = e.errors()[0]
            key = ".".join(str(p) for p in first["loc"])
            if first["type"] == "extra_forbidden":
                raise ConfigError(f"Unknown config key '{key}'", key=key)
            raise ConfigError(f"Invalid value for '{key}': {first['msg']}", key=key)

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Sequence[str] = ()) -> 'RunConfig':
        """Read JSON from `path` (defaults when None) and apply `key=value` overrides."""
        data: Dict[str, Any] = {}
        if path:
            if not os.path.isfile(path):
                raise ConfigError(f"Config file not found: {path}")
            try:
                with open(path, "r", encoding="utf-8") as fh:
                    data = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"Config file {path} is not valid JSON: {e}")
            if not isinstance(data, dict):
                raise ConfigError(f"Config file {path} must hold a JSON object")
        if overrides:
            schema = cls().model_dump(mode="json")
            data = OverrideHandler.apply(data, overrides, schema)
        return cls.from_dict(data)

    def dump(self, path: Optional[str] = None) -> str:
        text = json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"
        if path:
            parent = os.path.dirname(path)
            if parent:
                os.makedirs(parent, exist_ok=True)
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text

    def path(self, *parts: str) -> str:
        return os.path.join(self.output_dir, *parts)


# =========================
#  Commands
# =========================
def _dataset(cfg: RunConfig) -> ToyDataset:
    return ToyDataset(count=cfg.dataset.count, image_size=cfg.unet.image_size, seed=cfg.dataset.seed)


def _load_models(cfg: RunConfig, teacher_path: Optional[str], student_path: Optional[str],
                 formats: Sequence[PrecisionFormat]) -> Dict[PrecisionFormat, UnetModel]:
    """Teacher serves FP32 and BF16 steps, the quantized student serves INT8 steps."""
    models: Dict[PrecisionFormat, UnetModel] = {}
    if any(f is not PrecisionFormat.INT8 for f in formats):
        teacher = load_model(teacher_path or cfg.path("teacher.ckpt"))
        models[PrecisionFormat.FP32] = teacher
        models[PrecisionFormat.BF16] = teacher
    if PrecisionFormat.INT8 in formats:
        models[PrecisionFormat.INT8] = load_model(student_path or cfg.path("student.ckpt"))
    return models


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    dataset = _dataset(cfg)
    model = build_unet(cfg.unet, seed=cfg.train.seed)
    losses = train_model(
        model, dataset.images, cfg.schedule.build(), steps=cfg.train.steps, batch_size=cfg.train.batch_size,
        lr=cfg.train.lr, seed=cfg.train.seed, log_path=cfg.path("train_log.jsonl"),
        log_every=cfg.train.log_every, progress=args.progress,
    )
    out = args.output or cfg.path("teacher.ckpt")
    save_model(model, out)
    final = f"{losses[-1]:.5f}" if losses else "n/a"
    print(f"✅ Trained {cfg.train.steps} steps (final loss {final})")
    print(f"📄 Checkpoint: {out}")
    return EXIT_OK


def cmd_qat(cfg: RunConfig, args: argparse.Namespace) -> int:
    pretrained = load_model(args.checkpoint or cfg.path("teacher.ckpt"))
    dataset = _dataset(cfg)
    schedule = cfg.schedule.build()
    if args.ptq_only:
        student = ptq_calibrate(pretrained, dataset.images, schedule, batches=cfg.qat.ptq_batches,
                                batch_size=cfg.qat.batch_size, seed=cfg.qat.seed)
        out = args.output or cfg.path("ptq.ckpt")
        save_model(student, out)
        print(f"✅ PTQ calibration over {cfg.qat.ptq_batches} batches")
    else:
        state = init_qat(pretrained, cfg.qat, schedule)
        student = run_qat(state, dataset.images, log_path=cfg.path("qat_log.jsonl"), progress=args.progress)
        out = args.output or cfg.path("student.ckpt")
        save_model(student, out)
        last = state.history[-1] if state.history else {}
        print(f"✅ QAT finished after {state.step} steps "
              f"(task {last.get('task_loss', float('nan')):.5f}, kd {last.get('kd_loss', float('nan')):.5f})")
    print(f"📄 Checkpoint: {out}")
    return EXIT_OK


def cmd_sample(cfg: RunConfig, args: argparse.Namespace) -> int:
    policy = cfg.policy.build(args.steps, args.boundary)
    formats = policy.formats
    if args.compare:
        formats = sorted(set(formats) | {policy.high}, key=lambda f: f.value)
    models = _load_models(cfg, args.teacher, args.student, formats)
    schedule = cfg.schedule.build()
    seed = cfg.train.seed if args.seed is None else args.seed

    images = sample(models, policy, schedule, seed=seed, num_images=args.num_images)
    out_dir = args.output or cfg.path("samples")
    save_samples(out_dir, images)

    sidecar = {
        "policy": policy.model_dump(mode="json"),
        "seed": seed,
        "num_images": args.num_images,
        "step_formats": step_formats(policy),
    }
    with open(os.path.join(out_dir, "samples.json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")

    if args.compare:
        reference = sample(models, PrecisionPolicy.uniform(policy.n, policy.high), schedule, seed=seed,
                           num_images=args.num_images)
        grid = comparison_grid(images, reference)
        for ext in IMAGE_FORMATS:
            write_image(os.path.join(out_dir, f"compare_grid.{ext}"), grid)
        gap = float(np.mean(np.abs(images - reference)))
        print(f"🔍 Mean absolute difference vs all-{policy.high.value}: {gap:.5f}")

    print(f"✅ Sampled {args.num_images} images, {policy.n} steps, boundary {policy.k}")
    print(f"📄 Images: {out_dir}")
    return EXIT_OK


def _projector(cfg: RunConfig) -> FeatureProjector:
    path = cfg.path("projector.npy")
    pixels = cfg.unet.in_channels * cfg.unet.image_size ** 2
    if os.path.isfile(path):
        projector = FeatureProjector.load(path)
        if projector.matrix.shape == (pixels, cfg.eval.feature_dim):
            return projector
        logger.warning(f"Stored projection {path} does not match the config; regenerating")
    projector = FeatureProjector(pixels, cfg.eval.feature_dim, seed=cfg.eval.projection_seed)
    os.makedirs(cfg.output_dir, exist_ok=True)
    projector.save(path)
    return projector


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    n = cfg.policy.steps if args.steps is None else args.steps
    matrix = default_eval_matrix(n, cfg.eval.boundaries, high=cfg.policy.high, low=cfg.policy.low)
    models = _load_models(cfg, args.teacher, args.student, list(PrecisionFormat))
    projector = _projector(cfg)
    reference = reference_stats(_dataset(cfg).images, projector)
    report = run_eval_matrix(
        models, matrix, cfg.schedule.build(), reference, projector, n_images=cfg.eval.n_images,
        seeds=cfg.eval.seeds, batch_size=cfg.eval.sample_batch,
    )
    csv_path = args.output or cfg.path("eval.csv")
    write_report_csv(report, csv_path)
    write_report_markdown(report, os.path.splitext(csv_path)[0] + ".md", metric="frechet")
    for row in report.rows:
        print(f"   • {row.label}: {row.frechet:.4f}")
    print(f"✅ Evaluated {len(report.rows)} configurations")
    print(f"📄 Report: {csv_path}")
    return EXIT_OK


def cmd_bench(cfg: RunConfig, args: argparse.Namespace) -> int:
    n = cfg.policy.steps if args.steps is None else args.steps
    matrix = default_bench_matrix(n, cfg.bench.boundary, with_fp32=args.with_fp32, high=cfg.policy.high,
                                  low=cfg.policy.low)
    models = _load_models(cfg, args.teacher, args.student, list(PrecisionFormat))
    pool = get_worker_pool()

    report = bench_latency(models, matrix, cfg.schedule.build(), repeats=cfg.bench.repeats,
                           warmup=cfg.bench.warmup, batch=cfg.bench.batch, seed=cfg.train.seed, pool=pool)
    csv_path = args.output or cfg.path("bench.csv")
    write_report_csv(report, csv_path)
    write_report_markdown(report, os.path.splitext(csv_path)[0] + ".md", metric="latency")

    kernel_rows = kernel_benchmarks(pool, repeats=cfg.bench.kernel_repeats, warmup=cfg.bench.warmup)
    write_kernel_csv(kernel_rows, cfg.path("kernels.csv"))

    plan = buffer_plan(trace_activation_lifetimes(models[PrecisionFormat.FP32], batch=cfg.bench.batch))
    summary = buffer_plan_summary(plan)
    with open(cfg.path("buffer_plan.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    for row in report.rows:
        print(f"   • {row.label}: {row.median_s:.4f}s (p10 {row.p10_s:.4f}s, p90 {row.p90_s:.4f}s)")
    print(f"   • buffer plan: {summary['arenas']} arenas for {summary['activations']} activations")
    print(f"✅ Benchmarked {len(report.rows)} configurations on {pool.threads} thread(s)")
    print(f"📄 Report: {csv_path}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "qat": cmd_qat,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


# =========================
#  Entry point
# =========================
class _ArgumentParser(argparse.ArgumentParser):
    """Argument errors become ConfigError instead of a usage dump."""

    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="qdiff", description="Quantized diffusion runtime")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config value (repeatable)")
    common.add_argument("--threads", type=int, help="Worker threads (default: QDIFF_THREADS or core count)")
    common.add_argument("--output", help="Output file or directory of the command")
    common.add_argument("--log-level", help="Logging level (default: QDIFF_LOG_LEVEL or INFO)")
    common.add_argument("--progress", action="store_true", help="Show progress bars when tqdm is installed")

    models = argparse.ArgumentParser(add_help=False)
    models.add_argument("--teacher", help="Teacher checkpoint (default: <output_dir>/teacher.ckpt)")
    models.add_argument("--student", help="Student checkpoint (default: <output_dir>/student.ckpt)")
    models.add_argument("--steps", type=int, help="Sampling steps n (default: policy.steps)")

    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)
    sub.add_parser("train", parents=[common], help="Train the float Unet")

    qat = sub.add_parser("qat", parents=[common], help="QAT with distillation (or PTQ baseline)")
    qat.add_argument("--checkpoint", help="Pretrained checkpoint (default: <output_dir>/teacher.ckpt)")
    qat.add_argument("--ptq-only", action="store_true", help="Calibrate only, no training")

    smp = sub.add_parser("sample", parents=[common, models], help="Sample images under a precision policy")
    smp.add_argument("--boundary", type=int, help="Boundary steps k (default: policy.boundary)")
    smp.add_argument("--seed", type=int, help="Sampling seed (default: train.seed)")
    smp.add_argument("--num-images", type=int, default=16)
    smp.add_argument("--compare", action="store_true", help="Also write a grid against the all-high run")

    sub.add_parser("eval", parents=[common, models], help="Frechet distance of the precision-policy matrix")

    bench = sub.add_parser("bench", parents=[common, models], help="Latency and kernel benchmarks")
    bench.add_argument("--with-fp32", action="store_true", help="Add an FP32 row")
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    try:
        args = build_parser().parse_args(argv)
        level = (args.log_level or os.getenv("QDIFF_LOG_LEVEL") or "INFO").upper()
        if not isinstance(logging.getLevelName(level), int):
            raise ConfigError(f"Unknown log level {level!r}", key="log-level")
        logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

        cfg = RunConfig.load(args.config, args.overrides)
        threads = cfg.threads if args.threads is None else args.threads
        if threads is not None and threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {threads}", key="threads")
        set_worker_pool(WorkerPool(threads))
        os.makedirs(cfg.output_dir, exist_ok=True)
        cfg.dump(cfg.path(f"{args.command}_config.json"))
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, CheckpointError) as e:
        return _fail(e.kind, str(e), EXIT_CONFIG)
    except ValidationError as e:
        return _fail("config", str(e).splitlines()[0], EXIT_CONFIG)
    except FileNotFoundError as e:
        return _fail("config", str(e), EXIT_CONFIG)
    except QDiffError as e:
        return _fail(e.kind, str(e), EXIT_RUNTIME)
    except Exception as e:
        logger.debug("Unhandled error", exc_info=True)
        return _fail("runtime", f"{type(e).__name__}: {e}", EXIT_RUNTIME)
    finally:
        close_worker_pool()


if __name__ == "__main__":
    sys.exit(main())
