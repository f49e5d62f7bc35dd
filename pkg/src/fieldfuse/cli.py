"""Command-line driver: ``gen``, ``render``, ``fuse``, ``bench`` and ``psnr``.

Every verb exits 0 on success and 1 with a one-line diagnostic on failure.
Wall-clock fields are the only parts of any output that differ between
reruns with the same inputs and seed.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import dataclass, field
from typing import NamedTuple

from .composer import SceneError, load_scene, save_scene
from .distiller import ConfigError, DistillConfig, HeldOutEvaluator, format_report, fuse
from .field import FieldError, footprint_bytes, load_field, save_field
from .renderer import RenderConfig, mean_psnr, psnr, read_raw, render_image, write_ppm, write_raw
from .sampling import CameraError, load_cameras, save_cameras
from .scenegen import BENCH_FAMILY, SpecError, bench_spec_text, parse_spec, spec_text

TRAIN_CAMERAS = "cameras_train.txt"
HELD_OUT_CAMERAS = "cameras_heldout.txt"
SCENE_FILE = "scene.txt"


class CliError(Exception):
    pass


def _load_config(args, **overrides) -> DistillConfig:
    text, source = "", "<defaults>"
    if args.config:
        with open(args.config) as fh:
            text, source = fh.read(), args.config
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.no_jitter:
        overrides["jitter"] = False
    if args.oracle:
        overrides["early_stop"] = False
    return DistillConfig.from_text(text, source, **overrides)


def _read_spec(arg):
    if os.path.exists(arg):
        with open(arg) as fh:
            return parse_spec(fh.read(), arg)
    try:
        text = spec_text(arg)
    except SpecError:
        raise CliError(f"no spec file or builtin scene named '{arg}'") from None
    return parse_spec(text, arg)


def write_scene_dir(spec, out_dir, seed=None):
    """Field, scene and camera files for a parsed spec; returns the scene path."""
    os.makedirs(out_dir, exist_ok=True)
    scene, train, held = spec.build(seed)
    names = [f"{f.name}.frf" for f in spec.fields]
    for fld, name in zip(scene.fields, names):
        save_field(fld, os.path.join(out_dir, name))
    path = os.path.join(out_dir, SCENE_FILE)
    save_scene(scene, path, names)
    save_cameras(train, os.path.join(out_dir, TRAIN_CAMERAS))
    save_cameras(held, os.path.join(out_dir, HELD_OUT_CAMERAS))
    return path


def cmd_gen(args):
    spec = _read_spec(args.spec)
    path = write_scene_dir(spec, args.out_dir, args.seed)
    print(f"wrote {len(spec.fields)} fields, {path} and camera files to {args.out_dir}")


def _render_cfg(args, step):
    return RenderConfig(step=step, early_stop=not args.oracle, workers=args.workers,
                        jitter=False, seed=args.seed or 0)


def time_interleaved(sources, cameras, cfg, frames, warmup=1):
    """Mean milliseconds per frame for each source, timed in interleaved rounds.

    Every source renders ``warmup`` untimed frames, then each round renders one
    timed frame per source, so slow drift in machine speed affects all sources
    alike. Returns the per-source means and each source's image per camera.
    """
    for source in sources:
        for k in range(warmup):
            render_image(source, cameras[k % len(cameras)], cfg)
    totals = [0.0] * len(sources)
    images = [dict() for _ in sources]
    for k in range(frames):
        cam = k % len(cameras)
        for i, source in enumerate(sources):
            start = time.perf_counter()
            images[i][cam] = render_image(source, cameras[cam], cfg)
            totals[i] += time.perf_counter() - start
    ms = [t * 1e3 / max(frames, 1) for t in totals]
    return ms, [[im[c] for c in sorted(im)] for im in images]


def cmd_render(args):
    scene = load_scene(args.scene)
    cameras = load_cameras(args.cameras)
    if not cameras:
        raise CliError(f"{args.cameras}: no cameras")
    cfg = _render_cfg(args, args.step)
    if args.fused:
        source, mode = load_field(args.fused), "fused"
        payload = footprint_bytes(source)
    else:
        source, mode = scene, "composed"
        payload = scene.payload_bytes()
    os.makedirs(args.out_dir, exist_ok=True)
    render_image(source, cameras[0], cfg)  # warm-up, untimed
    rows = [f"# render scene {args.scene} cameras {args.cameras} step {cfg.step} "
            f"early_stop {str(cfg.early_stop).lower()} workers {cfg.workers}"]
    for k, cam in enumerate(cameras):
        start = time.perf_counter()
        image = render_image(source, cam, cfg)
        ms = (time.perf_counter() - start) * 1e3
        name = cam.name or f"cam{k:02d}"
        write_ppm(image, os.path.join(args.out_dir, f"{name}.ppm"))
        write_raw(image, os.path.join(args.out_dir, f"{name}.f32"))
        live = 1 if args.fused else len(scene.entries)
        rows.append(f"frame {name} mode {mode} live_fields {live} "
                    f"ms {ms:.3f} payload_bytes {payload}")
    report = args.report or os.path.join(args.out_dir, "render_report.txt")
    with open(report, "a") as fh:
        fh.write("\n".join(rows) + "\n")
    print(f"rendered {len(cameras)} {mode} frames to {args.out_dir}")


def _sibling(path, name):
    return os.path.join(os.path.dirname(os.path.abspath(path)), name)


def cmd_fuse(args):
    from .plotting import plot_training

    cfg = _load_config(args)
    scene = load_scene(args.scene)
    train = load_cameras(args.cameras or _sibling(args.scene, TRAIN_CAMERAS))
    held_path = args.held_out or _sibling(args.scene, HELD_OUT_CAMERAS)
    evaluator = None
    if os.path.exists(held_path) and not args.no_eval:
        evaluator = HeldOutEvaluator(scene, load_cameras(held_path), cfg, args.workers)
    result = fuse(scene, train, cfg, evaluator=evaluator, eval_every=args.eval_every,
                  workers=args.workers)
    save_field(result.student, args.out_field)
    extra = {"scene": args.scene, "train_cameras": len(train),
             "student_payload_bytes": footprint_bytes(result.student),
             "composed_payload_bytes": scene.payload_bytes()}
    if evaluator is not None:
        extra["psnr_heldout"] = f"{result.checkpoints[-1].psnr:.4f}"
        if result.supervised_student is not None:
            extra["psnr_heldout_supervised_only"] = f"{evaluator(result.supervised_student):.4f}"
    report = args.report or args.out_field + ".report.txt"
    with open(report, "w") as fh:
        fh.write(format_report(result, extra))
    plot_training(result, os.path.splitext(report)[0] + ".png")
    print(f"wrote {args.out_field} and {report}")


class BenchRow(NamedTuple):
    num_fields: int
    mode: str
    render_ms: float
    payload_bytes: int
    psnr: float


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = ["# fieldfuse bench report", "# config <key> <value>",
                 "# row <num_fields> <mode> <render_ms_per_frame> <field_payload_bytes> "
                 "<psnr_vs_composed>"]
        lines += [f"config {k} {v}" for k, v in self.config.items()]
        lines += [f"row {r.num_fields} {r.mode} {r.render_ms:.3f} {r.payload_bytes} {r.psnr:.2f}"
                  for r in self.rows]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> BenchReport:
        out = cls()
        for line in text.splitlines():
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "config":
                out.config[parts[1]] = " ".join(parts[2:])
            elif parts[0] == "row":
                out.rows.append(BenchRow(int(parts[1]), parts[2], float(parts[3]),
                                         int(parts[4]), float(parts[5])))
        return out

    def select(self, mode):
        return {r.num_fields: r for r in self.rows if r.mode == mode}


def run_bench(n_list, cfg: DistillConfig, frames=5, resolution=64, width=200, height=200,
              step=0.02, workers=1, early_stop=True, seed=0, out_dir=None, log=print):
    """Composed vs fused render time, payload and quality for each entry count.

    All scenes of the family share one camera rig, so every source is timed on
    the same held-out views after all fusions finish.
    """
    render_cfg = RenderConfig(step=step, early_stop=early_stop, workers=workers)
    report = BenchReport(config={
        "family": BENCH_FAMILY, "n_list": " ".join(str(n) for n in n_list),
        "resolution": resolution, "image_size": f"{width}x{height}", "frames": frames,
        "warmup_frames": 1, "timing": "interleaved", "render_step": step,
        "early_stop": str(early_stop).lower(),
        "seed": seed, "workers": workers})
    for name, value in cfg.items():
        if isinstance(value, tuple):
            value = " ".join(repr(float(v)) for v in value)
        report.config[f"distill.{name}"] = value
    sources, payloads = [], []
    for n in n_list:
        spec = parse_spec(bench_spec_text(n, resolution, width, height), f"{BENCH_FAMILY}-{n}")
        if out_dir is not None:
            write_scene_dir(spec, os.path.join(out_dir, f"n{n}"), seed)
        scene, train, held = spec.build(seed)
        student = fuse(scene, train, cfg, workers=workers).student
        if out_dir is not None:
            save_field(student, os.path.join(out_dir, f"n{n}", "fused.frf"))
        sources += [scene, student]
        payloads += [scene.payload_bytes(), footprint_bytes(student)]
        log(f"N={n}: fused")
    ms, images = time_interleaved(sources, held, render_cfg, frames)
    for k, n in enumerate(n_list):
        c, f = 2 * k, 2 * k + 1
        quality = mean_psnr(images[f], images[c])
        report.rows.append(BenchRow(n, "composed", ms[c], payloads[c], 99.0))
        report.rows.append(BenchRow(n, "fused", ms[f], payloads[f], quality))
        log(f"N={n}: composed {ms[c]:.1f} ms, fused {ms[f]:.1f} ms, fused PSNR {quality:.2f} dB")
    return report


def cmd_bench(args):
    from .plotting import plot_bench

    if args.family != BENCH_FAMILY:
        raise CliError(f"unknown scene family '{args.family}'; known: {BENCH_FAMILY}")
    if not args.n:
        raise CliError("bench needs at least one entry count")
    cfg = _load_config(args)
    report = run_bench(args.n, cfg, args.frames, args.resolution, args.width, args.height,
                       args.step, args.workers, not args.oracle, cfg.seed, args.artifacts)
    with open(args.out_report, "w") as fh:
        fh.write(report.to_text())
    plot_bench(report.rows, os.path.splitext(args.out_report)[0] + ".png")
    print(f"wrote {args.out_report}")


def cmd_psnr(args):
    a, b = read_raw(args.image_a), read_raw(args.image_b)
    if a.pixels.shape != b.pixels.shape:
        raise CliError(f"image size mismatch: {a.width}x{a.height} vs {b.width}x{b.height}")
    print(f"{psnr(a, b):.2f}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="distillation config file (key = value lines)")
    common.add_argument("--seed", type=int, help="seed for camera rigs, sampling and training")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="parallel width for rendering; never changes outputs")
    common.add_argument("--no-jitter", action="store_true",
                        help="sample ray midpoints during training")
    common.add_argument("--oracle", action="store_true",
                        help="disable early ray termination")

    parser = argparse.ArgumentParser(prog="fieldfuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen", parents=[common], help="write fields, scene and cameras from a spec")
    p.add_argument("spec", help="scene spec file or builtin scene name")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("render", parents=[common], help="render a scene for a camera file")
    p.add_argument("scene")
    p.add_argument("cameras")
    p.add_argument("out_dir")
    p.add_argument("--fused", metavar="FIELD", help="render this fused field instead")
    p.add_argument("--step", type=float, default=0.02)
    p.add_argument("--report", help="timing log to append to (default: out_dir/render_report.txt)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("fuse", parents=[common], help="distill a scene into one field")
    p.add_argument("scene")
    p.add_argument("out_field")
    p.add_argument("--cameras", help=f"training cameras (default: {TRAIN_CAMERAS} beside scene)")
    p.add_argument("--held-out", help=f"evaluation cameras (default: {HELD_OUT_CAMERAS})")
    p.add_argument("--no-eval", action="store_true", help="skip held-out evaluation")
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--report", help="training report path (default: <out_field>.report.txt)")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("bench", parents=[common], help="composed vs fused scaling benchmark")
    p.add_argument("out_report")
    p.add_argument("--family", default=BENCH_FAMILY)
    p.add_argument("--n", type=int, nargs="+", default=[1, 2, 4, 8])
    p.add_argument("--frames", type=int, default=5)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--width", type=int, default=200)
    p.add_argument("--height", type=int, default=200)
    p.add_argument("--step", type=float, default=0.02)
    p.add_argument("--artifacts", help="also write each scene and fused field here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("psnr", help="PSNR between two raw f32 images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.set_defaults(func=cmd_psnr)
    return parser


_EXPECTED = (CliError, ConfigError, SceneError, SpecError, FieldError, CameraError, ValueError,
             OSError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except _EXPECTED as exc:
        print(f"fieldfuse {args.verb}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
