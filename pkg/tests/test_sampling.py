import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fieldfuse.sampling import (
    Camera, CameraError, Ray, camera_rays, format_cameras, intervals, load_cameras,
    parse_cameras, pixel_ray, project, random_rays, ray_aabb, sample_ray, save_cameras,
)


def identity_camera(w=64, h=48, f=None):
    f = f or w
    return Camera(f, f, w / 2, h / 2, w, h, np.eye(3), np.zeros(3))


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


class TestPixelRay:
    def test_principal_ray(self):
        cam = identity_camera()
        ray = pixel_ray(cam, cam.cx - 0.5, cam.cy - 0.5)
        assert np.allclose(ray.direction, (0, 0, 1), atol=1e-12)

    def test_hand_backprojection(self):
        # principal point at the left edge keeps pixel cx + fx inside the image
        cam = Camera(32, 32, 0.0, 16.0, 32, 32, np.eye(3), np.zeros(3))
        ray = pixel_ray(cam, cam.cx + cam.fx - 0.5, cam.cy - 0.5)
        assert np.allclose(ray.direction, np.array([1, 0, 1]) / math.sqrt(2), atol=1e-12)

    @pytest.mark.parametrize("px,py", [(-1, 0), (0, -0.1), (64, 0), (0, 48)])
    def test_out_of_range(self, px, py):
        with pytest.raises(CameraError):
            pixel_ray(identity_camera(), px, py)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_unit_and_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        cam = Camera(rng.uniform(20, 200), rng.uniform(20, 200), rng.uniform(0, 64),
                     rng.uniform(0, 48), 64, 48, random_rotation(rng), rng.normal(size=3))
        px, py = rng.integers(0, 64), rng.integers(0, 48)
        ray = pixel_ray(cam, px, py)
        assert abs(np.linalg.norm(ray.direction) - 1) < 1e-6
        back = project(cam, ray.origin + 3.7 * ray.direction)
        assert np.allclose(back, (px + 0.5, py + 0.5), atol=1e-4)

    def test_camera_rays_row_major(self):
        cam = identity_camera(w=5, h=3)
        rays = camera_rays(cam)
        ray = pixel_ray(cam, 4, 1)
        assert np.allclose(rays.directions[1 * 5 + 4], ray.direction)

    def test_bad_rotation(self):
        with pytest.raises(CameraError):
            Camera(1, 1, 0, 0, 2, 2, np.diag([1, 1, -1]), np.zeros(3))


class TestRayAabb:
    def test_slab_hand_calculation(self):
        ray = Ray(np.array([-2.0, 0, 0]), np.array([1.0, 0, 0]), 0.0, 1e3)
        assert ray_aabb(ray, (-0.5,) * 3, (0.5,) * 3) == pytest.approx((1.5, 2.5))

    def test_parallel_miss(self):
        ray = Ray(np.array([-2.0, 0.7, 0]), np.array([1.0, 0, 0]), 0.0, 1e3)
        assert ray_aabb(ray, (-0.5,) * 3, (0.5,) * 3) is None

    def test_inside_origin(self):
        ray = Ray(np.zeros(3), np.array([0, 0.6, 0.8]), 0.0, 1e3)
        t0, t1 = ray_aabb(ray, (-0.5,) * 3, (0.5,) * 3)
        assert t0 == 0.0 and t1 == pytest.approx(0.5 / 0.8)

    def test_respects_t_range(self):
        ray = Ray(np.array([-2.0, 0, 0]), np.array([1.0, 0, 0]), 1.8, 2.2)
        assert ray_aabb(ray, (-0.5,) * 3, (0.5,) * 3) == pytest.approx((1.8, 2.2))
        ray = Ray(np.array([-2.0, 0, 0]), np.array([1.0, 0, 0]), 0.0, 1.0)
        assert ray_aabb(ray, (-0.5,) * 3, (0.5,) * 3) is None

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_against_dense_marching(self, seed):
        rng = np.random.default_rng(seed)
        lo = rng.uniform(-1, 0, 3)
        hi = lo + rng.uniform(0.2, 1.5, 3)
        o = rng.uniform(-3, 3, 3)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        ts = np.linspace(0, 10, 20001)
        inside = np.all((o + ts[:, None] * d >= lo) & (o + ts[:, None] * d <= hi), axis=1)
        got = ray_aabb(Ray(o, d, 0.0, 10.0), lo, hi)
        if inside.sum() < 3:
            return
        assert got is not None
        assert got[0] == pytest.approx(ts[inside][0], abs=1e-3)
        assert got[1] == pytest.approx(ts[inside][-1], abs=1e-3)


class TestSampleRay:
    def test_short_interval_empty(self):
        ray = Ray(np.zeros(3), np.array([1.0, 0, 0]), 0.0, 0.2)
        assert sample_ray(ray, 0.25) == []

    def test_hand_arithmetic(self):
        ray = Ray(np.zeros(3), np.array([0, 0, 1.0]), 0.0, 1.0)
        samples = sample_ray(ray, 0.25)
        assert [s.t for s in samples] == [0.125, 0.375, 0.625, 0.875]
        assert all(s.delta == 0.25 for s in samples)
        assert np.allclose(samples[2].position, (0, 0, 0.625))

    def test_jitter_deterministic(self):
        ray = Ray(np.zeros(3), np.array([0, 0, 1.0]), 0.0, 1.0)
        a = sample_ray(ray, 0.1, jitter=True, seed=7)
        b = sample_ray(ray, 0.1, jitter=True, seed=7)
        assert [s.t for s in a] == [s.t for s in b]
        assert a[0].t != 0.05

    def test_box_interval(self):
        ray = Ray(np.array([-2.0, 0, 0]), np.array([1.0, 0, 0]), 0.0, 1e3)
        samples = sample_ray(ray, 0.25, (-0.5,) * 3, (0.5,) * 3)
        assert [s.t for s in samples] == [1.625, 1.875, 2.125, 2.375]

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 5), st.floats(0, 5), st.floats(0.01, 1), st.booleans(),
           st.integers(0, 1000))
    def test_delta_sum_bound(self, a, length, step, jitter, seed):
        ray = Ray(np.zeros(3), np.array([1.0, 0, 0]), a, a + length)
        samples = sample_ray(ray, step, jitter=jitter, seed=seed)
        assert sum(s.delta for s in samples) <= length + step + 1e-12
        for s in samples:
            assert a <= s.t <= a + length + 1e-12

    def test_batch_intervals_match_single(self):
        rng = np.random.default_rng(3)
        cam = Camera.look_at((0, 0.5, -3), (0, 0, 0), (0, -1, 0), 16, 12, 60)
        rays = camera_rays(cam)
        t0, counts = intervals(rays, (-1,) * 3, (1,) * 3, 0.05)
        for i in rng.integers(0, len(rays), 40):
            ray = Ray(rays.origins[i], rays.directions[i], 0.0, 1e3)
            samples = sample_ray(ray, 0.05, (-1,) * 3, (1,) * 3)
            assert counts[i] == len(samples)
            if samples:
                assert t0[i] + 0.5 * 0.05 == pytest.approx(samples[0].t, abs=1e-12)

    def test_random_rays_seeded(self):
        cams = [identity_camera(), Camera.look_at((3, 0, 0), (0, 0, 0), (0, -1, 0), 64, 48, 50)]
        a, wa = random_rays(cams, 100, np.random.default_rng(1))
        b, wb = random_rays(cams, 100, np.random.default_rng(1))
        assert np.array_equal(wa, wb) and np.array_equal(a.directions, b.directions)
        assert np.array_equal(a.u, b.u)
        assert np.all((a.u >= 0) & (a.u < 1))


class TestCameraFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        cams = [Camera(50.5, 51.25, 31.0, 23.5, 64, 48, random_rotation(rng), rng.normal(size=3),
                       f"cam{i}") for i in range(3)]
        save_cameras(cams, tmp_path / "c.txt")
        back = load_cameras(tmp_path / "c.txt")
        assert len(back) == 3
        for a, b in zip(cams, back):
            assert a.name == b.name and a.same_pose(b)
            assert (a.fx, a.fy, a.cx, a.cy, a.width, a.height) == (b.fx, b.fy, b.cx, b.cy,
                                                                   b.width, b.height)

    def test_error_names_line(self):
        text = format_cameras([identity_camera()]).replace("fx ", "fx nope ", 1)
        with pytest.raises(CameraError, match=r":\d+:"):
            parse_cameras(text)
