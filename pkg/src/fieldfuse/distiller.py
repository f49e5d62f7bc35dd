"""Distilling a composed scene into one voxel field.

The student starts as a copy of the background field, extended to cover every
placed entry. Training then runs two phases:

* supervised: rays from the training cameras are sampled through the
  composition, samples whose winning opacity falls below a threshold are
  dropped, and the student's activated density and color are regressed onto
  the winner's values at the survivors;
* RGB: a short phase of pixel loss between student renders and composed
  renders of the same rays.

``fit_from_images`` is the reference point for speed: the same optimizer and
ray machinery trained on pixels alone from a constant field.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _kernels as K
from .composer import ComposedScene, to_local
from .field import VACUUM_RAW, VoxelField, logit, query_points, softplus_inverse
from .renderer import EARLY_STOP, RenderConfig, mean_psnr, render_image, render_rays
from .sampling import RayBatch, intervals, random_rays


class ConfigError(ValueError):
    pass


@dataclass
class DistillConfig:
    prune_alpha_threshold: float = 1e-2
    lambda_sigma: float = 1.0
    lambda_color: float = 1.0
    supervised_iters: int = 2000
    rgb_iters: int = 500
    batch_rays: int = 4096
    step: float = 0.02
    learning_rate: float = 0.05
    density_learning_rate: float = 1.0
    rgb_lr_scale: float = 0.3
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-15
    seed: int = 0
    jitter: bool = True
    early_stop: bool = True
    background: tuple = (0.0, 0.0, 0.0)
    init_raw_density: float = -2.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        problems = []
        if not 0.0 <= self.prune_alpha_threshold < 1.0:
            problems.append("prune_alpha_threshold must lie in [0, 1)")
        for name in ("lambda_sigma", "lambda_color"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        for name in ("supervised_iters", "rgb_iters"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 0:
                problems.append(f"{name} must be a non-negative integer")
        if self.batch_rays < 1:
            problems.append("batch_rays must be >= 1")
        for name in ("step", "learning_rate", "density_learning_rate", "rgb_lr_scale", "epsilon"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be > 0")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                problems.append(f"{name} must lie in [0, 1)")
        if len(self.background) != 3:
            problems.append("background must have 3 channels")
        if problems:
            raise ConfigError("; ".join(problems))

    def render_config(self, workers=1) -> RenderConfig:
        return RenderConfig(step=self.step, background=tuple(self.background),
                            early_stop=self.early_stop, workers=workers)

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in dataclasses.fields(self)]

    def to_text(self) -> str:
        lines = []
        for name, value in self.items():
            if isinstance(value, tuple):
                value = " ".join(repr(float(v)) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source="<config>", **overrides) -> DistillConfig:
        """Parse ``key = value`` lines; unknown keys and bad values name the field."""
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ConfigError(f"{source}:{lineno}: unknown config field '{key}'")
            values[key] = _parse_value(key, raw, kinds[key], f"{source}:{lineno}")
        values.update(overrides)
        try:
            return cls(**values)
        except ConfigError as exc:
            raise ConfigError(f"{source}: {exc}") from None


def _parse_value(key, raw, kind, where):
    try:
        if kind == "bool":
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "tuple":
            vals = tuple(float(v) for v in raw.split())
            if len(vals) != 3:
                raise ValueError(raw)
            return vals
    except ValueError:
        raise ConfigError(f"{where}: invalid value for '{key}': {raw!r}") from None
    raise ConfigError(f"{where}: unsupported field type for '{key}'")


class TrainBatch(NamedTuple):
    positions: np.ndarray
    delta: float
    target_sigma: np.ndarray
    target_color: np.ndarray
    ray_index: np.ndarray
    total_samples: int

    def __len__(self):
        return self.positions.shape[0]


class Gradient(NamedTuple):
    density: np.ndarray
    color: np.ndarray

    @classmethod
    def zeros_like(cls, fld: VoxelField) -> Gradient:
        return cls(np.zeros_like(fld.density), np.zeros_like(fld.color))


@dataclass
class OptimizerState:
    first_moment: Gradient
    second_moment: Gradient
    step_count: int = 0

    @classmethod
    def for_field(cls, fld: VoxelField) -> OptimizerState:
        return cls(Gradient.zeros_like(fld), Gradient.zeros_like(fld))


def raw_density_floor(threshold, step, scales, margin=1e-6):
    """Per-entry raw density below which a sample's alpha cannot reach ``threshold``.

    Alpha is monotone in world density ``softplus(raw) / scale``, so the floor
    is the inverse at the threshold density, lowered by ``margin`` to stay
    conservative under rounding.
    """
    scales = np.asarray(scales, dtype=np.float64)
    if threshold <= 0.0:
        return np.full(scales.shape, -np.inf)
    sigma = -math.log1p(-min(threshold, 1.0 - 1e-16)) / step
    return softplus_inverse(sigma * scales) - margin


def select_points(scene: ComposedScene, rays: RayBatch, cfg: DistillConfig) -> TrainBatch:
    """Sample rays through the composition and keep the sufficiently opaque samples."""
    lo, hi = scene.bounds()
    t0, counts = intervals(rays, lo, hi, cfg.step)
    total = int(counts.sum())
    pos = np.empty((total, 3))
    sigma = np.empty(total)
    color = np.empty((total, 3))
    ray_idx = np.empty(total, dtype=np.int64)
    packed = scene.packed()
    floor = raw_density_floor(cfg.prune_alpha_threshold, cfg.step, packed.scale)
    occ, occ_off = scene.cell_occupancy(floor)
    kept = K.select_samples(np.ascontiguousarray(rays.origins),
                            np.ascontiguousarray(rays.directions), t0, counts,
                            np.ascontiguousarray(rays.u), float(cfg.step),
                            float(cfg.prune_alpha_threshold), floor, occ, occ_off,
                            *packed.kernel_args, pos, sigma, color, ray_idx)
    return TrainBatch(pos[:kept], float(cfg.step), sigma[:kept], color[:kept],
                      ray_idx[:kept], total)


def _field_args(student: VoxelField):
    return (student.density.reshape(-1), student.color.reshape(-1),
            np.array([student.resolution], dtype=np.int64),
            student.bbox_min.reshape(1, 3), student.bbox_max.reshape(1, 3))


def supervised_loss_and_grad(student: VoxelField, batch: TrainBatch, cfg: DistillConfig):
    """Weighted squared error on activated density and color at the batch points."""
    grad = Gradient.zeros_like(student)
    dens, col, res, bmin, bmax = _field_args(student)
    loss = K.supervised_grad(np.ascontiguousarray(batch.positions), batch.target_sigma,
                             np.ascontiguousarray(batch.target_color),
                             float(cfg.lambda_sigma), float(cfg.lambda_color),
                             dens, col, res, bmin, bmax,
                             grad.density.reshape(-1), grad.color.reshape(-1))
    return float(loss), grad


def rgb_loss_and_grad(student: VoxelField, rays: RayBatch, target_pixels, cfg: DistillConfig,
                      return_colors=False):
    """Pixel MSE of student-composited rays against targets."""
    grad = Gradient.zeros_like(student)
    t0, counts = intervals(rays, student.bbox_min, student.bbox_max, cfg.step)
    dens, col, res, bmin, bmax = _field_args(student)
    colors = np.empty((len(rays), 3))
    loss = K.rgb_grad(np.ascontiguousarray(rays.origins), np.ascontiguousarray(rays.directions),
                      t0, counts, np.ascontiguousarray(rays.u), float(cfg.step),
                      np.asarray(cfg.background, dtype=np.float64),
                      EARLY_STOP if cfg.early_stop else 0.0,
                      np.ascontiguousarray(target_pixels, dtype=np.float64),
                      dens, col, res, bmin, bmax,
                      grad.density.reshape(-1), grad.color.reshape(-1), colors)
    if return_colors:
        return float(loss), grad, colors
    return float(loss), grad


def optimizer_step(student: VoxelField, grad: Gradient, state: OptimizerState,
                   cfg: DistillConfig, lr_scale: float = 1.0) -> None:
    """Lazy Adam: only entries with a nonzero gradient move or update their moments.

    Raw density takes ``density_learning_rate``; raw color takes ``learning_rate``.
    Both are multiplied by ``lr_scale``.
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    groups = ((cfg.density_learning_rate, student.density, grad.density,
               state.first_moment.density, state.second_moment.density),
              (cfg.learning_rate, student.color, grad.color, state.first_moment.color,
               state.second_moment.color))
    for lr, param, g, m, v in groups:
        pf, gf, mf, vf = param.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1)
        idx = np.flatnonzero(gf)
        if idx.size == 0:
            continue
        gi = gf[idx]
        mi = cfg.beta1 * mf[idx] + (1.0 - cfg.beta1) * gi
        vi = cfg.beta2 * vf[idx] + (1.0 - cfg.beta2) * gi * gi
        mf[idx] = mi
        vf[idx] = vi
        pf[idx] -= lr_scale * lr * (mi / bc1) / (np.sqrt(vi / bc2) + cfg.epsilon)


def init_student(scene: ComposedScene) -> VoxelField:
    """Background field extended over the union box at the background voxel size."""
    bg, placement = scene.background
    lo, hi = scene.bounds()
    if placement.is_identity:
        voxel = bg.voxel_size
        grow_lo = np.maximum(np.ceil((bg.bbox_min - lo) / voxel - 1e-6), 0).astype(int)
        grow_hi = np.maximum(np.ceil((hi - bg.bbox_max) / voxel - 1e-6), 0).astype(int)
        if not grow_lo.any() and not grow_hi.any():
            return bg.copy()
        res = np.array(bg.resolution) + grow_lo + grow_hi
        out = VoxelField.constant(bg.bbox_min - grow_lo * voxel, bg.bbox_max + grow_hi * voxel, res)
        sl = tuple(slice(a, a + n) for a, n in zip(grow_lo, bg.resolution))
        out.density[sl] = bg.density
        out.color[sl] = bg.color
        return out
    voxel = float(np.min(bg.voxel_size)) * placement.scale
    res = np.maximum(np.ceil((hi - lo) / voxel - 1e-6).astype(int) + 1, 2)
    out = VoxelField.constant(lo, lo + (res - 1) * voxel, res)
    pos = out.vertex_positions().reshape(-1, 3)
    sigma, color = query_points(bg, to_local(placement, pos))
    with np.errstate(divide="ignore"):
        out.density = np.maximum(softplus_inverse(sigma / placement.scale),
                                 VACUUM_RAW).reshape(out.resolution)
        out.color = np.clip(logit(np.clip(color, 1e-9, 1 - 1e-9)), -20, 20).reshape(
            out.resolution + (3,))
    return out


class HeldOutEvaluator:
    """Mean PSNR of student renders against cached composed renders."""

    def __init__(self, scene: ComposedScene, cameras, cfg: DistillConfig, workers=1):
        self.cameras = list(cameras)
        self.render_cfg = cfg.render_config(workers)
        self.targets = [render_image(scene, cam, self.render_cfg) for cam in self.cameras]

    def render(self, student: VoxelField):
        return [render_image(student, cam, self.render_cfg) for cam in self.cameras]

    def __call__(self, student: VoxelField) -> float:
        return mean_psnr(self.render(student), self.targets)


class LogRow(NamedTuple):
    iteration: int
    phase: str
    loss: float
    wall_ms: float


class Checkpoint(NamedTuple):
    phase: str
    iteration: int
    train_seconds: float
    psnr: float


@dataclass
class TrainResult:
    student: VoxelField
    config: DistillConfig
    log: list = field(default_factory=list)
    durations: dict = field(default_factory=dict)
    checkpoints: list = field(default_factory=list)
    supervised_student: VoxelField | None = None
    surviving_samples: int = 0
    total_samples: int = 0

    def time_to_psnr(self, target: float) -> float:
        """Training seconds at the first checkpoint reaching ``target`` (inf if never)."""
        for cp in self.checkpoints:
            if cp.psnr >= target:
                return cp.train_seconds
        return math.inf

    def final_loss(self, phase: str) -> float:
        rows = [r for r in self.log if r.phase == phase]
        return rows[-1].loss if rows else float("nan")


class _Clock:
    """Training wall clock that excludes evaluation time."""

    def __init__(self):
        self.elapsed = 0.0
        self._start = None

    def start(self):
        self._start = time.perf_counter()

    def stop(self):
        self.elapsed += time.perf_counter() - self._start
        self._start = None


def _maybe_eval(result, clock, evaluator, eval_every, phase, it, last, stop_at_psnr):
    if evaluator is None or not (last or (eval_every and it % eval_every == 0)):
        return False
    value = evaluator(result.student)
    result.checkpoints.append(Checkpoint(phase, it, clock.elapsed, value))
    return stop_at_psnr is not None and value >= stop_at_psnr


def fuse(scene: ComposedScene, train_cameras, cfg: DistillConfig, evaluator=None,
         eval_every=0, workers=1, stop_at_psnr=None) -> TrainResult:
    """Distill ``scene`` into a single field.

    With an ``evaluator`` the student is scored after initialization, every
    ``eval_every`` iterations and at the end of each phase; scoring time is
    excluded from ``durations`` and checkpoint times.
    """
    clock = _Clock()
    rng = np.random.default_rng(cfg.seed)
    render_cfg = cfg.render_config(workers)
    clock.start()
    student = init_student(scene)
    clock.stop()
    result = TrainResult(student, cfg)
    result.durations["init"] = clock.elapsed
    _maybe_eval(result, clock, evaluator, eval_every, "init", 0, True, None)

    state = OptimizerState.for_field(student)
    phase_start = clock.elapsed
    done = False
    for it in range(1, cfg.supervised_iters + 1):
        clock.start()
        rays, _ = random_rays(train_cameras, cfg.batch_rays, rng, jitter=cfg.jitter)
        batch = select_points(scene, rays, cfg)
        loss, grad = supervised_loss_and_grad(student, batch, cfg)
        optimizer_step(student, grad, state, cfg)
        result.surviving_samples += len(batch)
        result.total_samples += batch.total_samples
        clock.stop()
        result.log.append(LogRow(it, "supervised", loss, clock.elapsed * 1e3))
        last = it == cfg.supervised_iters
        if _maybe_eval(result, clock, evaluator, eval_every, "supervised", it, last, stop_at_psnr):
            done = True
            break
    result.durations["supervised"] = clock.elapsed - phase_start
    if cfg.supervised_iters and not done:
        result.supervised_student = student.copy()

    state = OptimizerState.for_field(student)
    phase_start = clock.elapsed
    for it in range(1, (0 if done else cfg.rgb_iters) + 1):
        clock.start()
        rays, _ = random_rays(train_cameras, cfg.batch_rays, rng, jitter=cfg.jitter)
        targets = render_rays(scene, rays, render_cfg)
        loss, grad = rgb_loss_and_grad(student, rays, targets, cfg)
        optimizer_step(student, grad, state, cfg, cfg.rgb_lr_scale)
        clock.stop()
        result.log.append(LogRow(it, "rgb", loss, clock.elapsed * 1e3))
        last = it == cfg.rgb_iters
        if _maybe_eval(result, clock, evaluator, eval_every, "rgb", it, last, stop_at_psnr):
            break
    result.durations["rgb"] = clock.elapsed - phase_start
    result.durations["total"] = clock.elapsed
    return result


def fit_from_images(images, cameras, cfg: DistillConfig, bbox_min, bbox_max, resolution,
                    iters=None, evaluator=None, eval_every=0, stop_at_psnr=None,
                    max_seconds=None) -> TrainResult:
    """Train a constant-initialized field on pixels only (the retraining baseline).

    ``iters`` defaults to the combined supervised and RGB budget of ``cfg``.
    Training stops early once ``stop_at_psnr`` is reached or ``max_seconds`` of
    training time have elapsed.
    """
    clock = _Clock()
    rng = np.random.default_rng(cfg.seed)
    iters = cfg.supervised_iters + cfg.rgb_iters if iters is None else iters
    pixels = [img.pixels for img in images]
    student = VoxelField.constant(bbox_min, bbox_max, resolution, cfg.init_raw_density, 0.0)
    result = TrainResult(student, cfg)
    _maybe_eval(result, clock, evaluator, eval_every, "rgb", 0, True, None)
    state = OptimizerState.for_field(student)
    for it in range(1, iters + 1):
        clock.start()
        rays, where = random_rays(cameras, cfg.batch_rays, rng, jitter=cfg.jitter)
        targets = np.empty((len(rays), 3))
        for c, px in enumerate(pixels):
            sel = where[:, 0] == c
            targets[sel] = px[where[sel, 1], where[sel, 2]]
        loss, grad = rgb_loss_and_grad(student, rays, targets, cfg)
        optimizer_step(student, grad, state, cfg)
        clock.stop()
        result.log.append(LogRow(it, "rgb", loss, clock.elapsed * 1e3))
        last = it == iters or (max_seconds is not None and clock.elapsed >= max_seconds)
        if _maybe_eval(result, clock, evaluator, eval_every, "rgb", it, last, stop_at_psnr) or last:
            break
    result.durations["rgb"] = result.durations["total"] = clock.elapsed
    return result


def smoothed(values, window=50):
    """Exponential moving average with span ``window``."""
    a = 2.0 / (window + 1.0)
    out = np.empty(len(values))
    acc = values[0] if len(values) else 0.0
    for i, v in enumerate(values):
        acc = a * v + (1.0 - a) * acc
        out[i] = acc
    return out


def format_report(result: TrainResult, extra=None) -> str:
    """Training report: one ``iter`` line per step, then ``summary`` key/values."""
    lines = ["# iter <iteration> phase <phase> loss <value> wall_ms <cumulative training ms>"]
    for row in result.log:
        lines.append(f"iter {row.iteration} phase {row.phase} loss {row.loss:.9g} "
                     f"wall_ms {row.wall_ms:.3f}")
    for cp in result.checkpoints:
        lines.append(f"eval phase {cp.phase} iter {cp.iteration} train_s {cp.train_seconds:.4f} "
                     f"psnr {cp.psnr:.4f}")
    summary = {f"duration_{k}_s": f"{v:.4f}" for k, v in result.durations.items()}
    summary["final_loss_supervised"] = f"{result.final_loss('supervised'):.9g}"
    summary["final_loss_rgb"] = f"{result.final_loss('rgb'):.9g}"
    summary["surviving_samples"] = str(result.surviving_samples)
    summary["total_samples"] = str(result.total_samples)
    summary["student_resolution"] = " ".join(str(n) for n in result.student.resolution)
    if result.checkpoints:
        summary["final_psnr"] = f"{result.checkpoints[-1].psnr:.4f}"
    summary.update(extra or {})
    for name, value in result.config.items():
        if isinstance(value, tuple):
            value = " ".join(repr(float(v)) for v in value)
        summary[f"config.{name}"] = str(value)
    lines.extend(f"summary {k} {v}" for k, v in summary.items())
    return "\n".join(lines) + "\n"
