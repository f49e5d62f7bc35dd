import hashlib
import os

import numpy as np
import pytest

from fieldfuse.cli import BenchReport, main, run_bench
from fieldfuse.distiller import DistillConfig
from fieldfuse.field import footprint_bytes, load_field
from fieldfuse.renderer import ImageBuffer, write_raw

SMALL_SPEC = """\
seed 2
field room resolution 12 12 12 bbox -1 -1 -1 1 1 1
primitive box half 0.9 0.1 0.9 translation 0 -0.8 0 density 30 albedo 0.6 0.5 0.4
primitive sphere radius 0.3 density 20 albedo 0.2 0.6 0.9
background room
cameras train 3 held_out 2 width 20 height 16 fov 50 radius 2.6 elevation 0.8 1.2 target 0 0 0
"""


def digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@pytest.fixture
def small_scene(tmp_path):
    spec = tmp_path / "small.spec"
    spec.write_text(SMALL_SPEC)
    out = tmp_path / "scene"
    assert main(["gen", str(spec), str(out)]) == 0
    return out


@pytest.fixture
def zero_config(tmp_path):
    path = tmp_path / "zero.cfg"
    path.write_text("supervised_iters = 0\nrgb_iters = 0\n")
    return path


class TestGen:
    def test_builtin_writes_three_fields(self, tmp_path):
        out = tmp_path / "room"
        assert main(["gen", "room-3obj", str(out)]) == 0
        names = sorted(os.listdir(out))
        assert [n for n in names if n.endswith(".frf")] == ["ball.frf", "crate.frf", "room.frf"]
        for name in ("scene.txt", "cameras_train.txt", "cameras_heldout.txt"):
            assert name in names

    def test_rerun_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["gen", "room-3obj", str(a), "--seed", "4"]) == 0
        assert main(["gen", "room-3obj", str(b), "--seed", "4"]) == 0
        for name in sorted(os.listdir(a)):
            assert digest(a / name) == digest(b / name), name

    def test_malformed_line_named(self, tmp_path, capsys):
        spec = tmp_path / "bad.spec"
        spec.write_text(SMALL_SPEC.replace("primitive sphere", "primitive cone"))
        assert main(["gen", str(spec), str(tmp_path / "out")]) != 0
        err = capsys.readouterr().err.strip()
        assert len(err.splitlines()) == 1 and "bad.spec:4:" in err

    def test_unknown_builtin(self, tmp_path, capsys):
        assert main(["gen", "no-such-scene", str(tmp_path / "out")]) != 0
        assert "no-such-scene" in capsys.readouterr().err


class TestRenderAndFuse:
    def test_zero_iteration_fuse_is_passthrough(self, small_scene, zero_config, tmp_path):
        out = tmp_path / "fused.frf"
        assert main(["fuse", str(small_scene / "scene.txt"), str(out),
                     "--config", str(zero_config)]) == 0
        assert digest(out) == digest(small_scene / "room.frf")

    def test_composed_matches_fused_single_field(self, small_scene, zero_config, tmp_path):
        fused = tmp_path / "fused.frf"
        scene = str(small_scene / "scene.txt")
        cams = str(small_scene / "cameras_heldout.txt")
        assert main(["fuse", scene, str(fused), "--config", str(zero_config), "--no-eval"]) == 0
        assert main(["render", scene, cams, str(tmp_path / "c")]) == 0
        assert main(["render", scene, cams, str(tmp_path / "f"), "--fused", str(fused)]) == 0
        dumps = sorted(n for n in os.listdir(tmp_path / "c") if n.endswith(".f32"))
        assert len(dumps) == 2
        for name in dumps:
            assert digest(tmp_path / "c" / name) == digest(tmp_path / "f" / name)
        assert len([n for n in os.listdir(tmp_path / "c") if n.endswith(".ppm")]) == 2

    def test_render_appends_timing_rows(self, small_scene, tmp_path):
        scene = str(small_scene / "scene.txt")
        cams = str(small_scene / "cameras_heldout.txt")
        report = tmp_path / "timing.txt"
        for _ in range(2):
            assert main(["render", scene, cams, str(tmp_path / "c"), "--report", str(report)]) == 0
        frames = [ln for ln in report.read_text().splitlines() if ln.startswith("frame")]
        assert len(frames) == 4
        assert all("mode composed" in ln and " ms " in ln for ln in frames)

    def test_missing_file(self, tmp_path, capsys):
        assert main(["render", str(tmp_path / "none.txt"), "x", str(tmp_path / "o")]) != 0
        assert "none.txt" in capsys.readouterr().err

    def test_fuse_report_schema(self, small_scene, tmp_path):
        cfg = tmp_path / "short.cfg"
        cfg.write_text("supervised_iters = 4\nrgb_iters = 3\nbatch_rays = 128\n")
        out = tmp_path / "fused.frf"
        assert main(["fuse", str(small_scene / "scene.txt"), str(out), "--config", str(cfg),
                     "--seed", "3"]) == 0
        text = (tmp_path / "fused.frf.report.txt").read_text()
        keys = {ln.split()[1] for ln in text.splitlines() if ln.startswith("summary")}
        for key in ("duration_supervised_s", "duration_rgb_s", "final_loss_supervised",
                    "final_loss_rgb", "psnr_heldout", "config.seed", "config.rgb_lr_scale"):
            assert key in keys
        assert "summary config.seed 3" in text
        assert (tmp_path / "fused.frf.report.png").stat().st_size > 0
        iters = [ln for ln in text.splitlines() if ln.startswith("iter")]
        assert len(iters) == 7

    def test_fuse_deterministic(self, small_scene, tmp_path):
        cfg = tmp_path / "short.cfg"
        cfg.write_text("supervised_iters = 3\nrgb_iters = 2\nbatch_rays = 64\n")
        outs = [tmp_path / "a.frf", tmp_path / "b.frf"]
        for out in outs:
            assert main(["fuse", str(small_scene / "scene.txt"), str(out), "--config", str(cfg),
                         "--no-eval", "--workers", "1" if out == outs[0] else "3"]) == 0
        assert digest(outs[0]) == digest(outs[1])

    def test_bad_config_names_field(self, small_scene, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("learning_rate = -1\n")
        assert main(["fuse", str(small_scene / "scene.txt"), str(tmp_path / "x.frf"),
                     "--config", str(cfg)]) != 0
        assert "learning_rate" in capsys.readouterr().err


class TestBench:
    CFG = DistillConfig(supervised_iters=2, rgb_iters=0, batch_rays=64)

    def test_single_entry_payloads_equal(self):
        report = run_bench([1], self.CFG, frames=5, resolution=8, width=12, height=12,
                           log=lambda *_: None)
        rows = {r.mode: r for r in report.rows}
        assert rows["composed"].payload_bytes == rows["fused"].payload_bytes
        assert rows["composed"].payload_bytes == 8 ** 3 * 16 + 40

    def test_payload_arithmetic(self):
        report = run_bench([1, 2, 8], self.CFG, frames=5, resolution=8, width=12, height=12,
                           log=lambda *_: None)
        composed, fused = report.select("composed"), report.select("fused")
        single = composed[1].payload_bytes
        for n in (1, 2, 8):
            assert composed[n].payload_bytes == n * single
            assert fused[n].payload_bytes == single

    def test_cli_writes_report_and_figure(self, tmp_path):
        cfg = tmp_path / "tiny.cfg"
        cfg.write_text("supervised_iters = 2\nrgb_iters = 0\nbatch_rays = 64\n")
        out = tmp_path / "bench.txt"
        assert main(["bench", str(out), "--n", "1", "2", "--config", str(cfg), "--resolution",
                     "8", "--width", "12", "--height", "12", "--frames", "5"]) == 0
        report = BenchReport.from_text(out.read_text())
        assert [(r.num_fields, r.mode) for r in report.rows] == [
            (1, "composed"), (1, "fused"), (2, "composed"), (2, "fused")]
        assert report.config["frames"] == "5" and report.config["warmup_frames"] == "1"
        assert report.config["distill.supervised_iters"] == "2"
        assert (tmp_path / "bench.png").stat().st_size > 0

    def test_report_round_trip(self):
        report = run_bench([1], self.CFG, frames=5, resolution=8, width=8, height=8,
                           log=lambda *_: None)
        again = BenchReport.from_text(report.to_text())
        assert again.to_text() == report.to_text()

    def test_unknown_family(self, tmp_path, capsys):
        assert main(["bench", str(tmp_path / "b.txt"), "--family", "forest"]) != 0
        assert "forest" in capsys.readouterr().err


class TestPsnr:
    def write(self, path, pixels):
        write_raw(ImageBuffer(np.asarray(pixels, dtype=np.float32)), path)
        return str(path)

    def test_self_is_capped(self, tmp_path, capsys):
        a = self.write(tmp_path / "a.f32", np.random.default_rng(0).random((5, 7, 3)))
        assert main(["psnr", a, a]) == 0
        assert capsys.readouterr().out.strip() == "99.00"

    def test_constant_offset(self, tmp_path, capsys):
        base = np.full((4, 6, 3), 0.25)
        a = self.write(tmp_path / "a.f32", base)
        b = self.write(tmp_path / "b.f32", base + 0.1)
        assert main(["psnr", a, b]) == 0
        assert capsys.readouterr().out.strip() == "20.00"

    def test_size_mismatch(self, tmp_path, capsys):
        a = self.write(tmp_path / "a.f32", np.zeros((4, 6, 3)))
        b = self.write(tmp_path / "b.f32", np.zeros((6, 4, 3)))
        assert main(["psnr", a, b]) != 0
        err = capsys.readouterr().err
        assert "mismatch" in err and len(err.strip().splitlines()) == 1


def test_loaded_field_footprint(small_scene):
    assert footprint_bytes(load_field(small_scene / "room.frf")) == 12 ** 3 * 16 + 40
