import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fieldfuse.field import (
    HEADER_BYTES, FieldError, VoxelField, alpha_from_density, crop_field, footprint_bytes,
    from_bytes, load_field, quantize, query_param_gradient, query_point, query_points,
    save_field, to_bytes,
)


def random_field(rng, res=(5, 4, 6), lo=(-1.0, -0.5, 0.0), hi=(1.0, 0.7, 2.0), scale=2.0):
    res = tuple(res)
    return VoxelField(lo, hi, rng.normal(0, scale, res), rng.normal(0, scale, res + (3,)))


def oracle_raw(field, p):
    """Independent 8-corner interpolation written out longhand."""
    lo, hi = field.bbox_min, field.bbox_max
    n = np.array(field.resolution)
    g = [(p[a] - lo[a]) / (hi[a] - lo[a]) * (n[a] - 1) for a in range(3)]
    i0 = [min(int(math.floor(g[a])), n[a] - 2) for a in range(3)]
    f = [g[a] - i0[a] for a in range(3)]
    dens = 0.0
    col = np.zeros(3)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((f[0] if dx else 1 - f[0]) * (f[1] if dy else 1 - f[1])
                     * (f[2] if dz else 1 - f[2]))
                dens += w * field.density[i0[0] + dx, i0[1] + dy, i0[2] + dz]
                col += w * field.color[i0[0] + dx, i0[1] + dy, i0[2] + dz]
    return dens, col


def softplus(x):
    return math.log1p(math.exp(x)) if x < 30 else x + math.log1p(math.exp(-x))


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


class TestQueryPoint:
    def test_outside_is_vacuum(self):
        f = random_field(np.random.default_rng(0))
        for p in [(-1.01, 0, 1), (0, 0.71, 1), (0, 0, 2.5), (5, 5, 5)]:
            s = query_point(f, p)
            assert s.sigma == 0.0 and s.color == (0.0, 0.0, 0.0)

    def test_constant_field(self):
        f = VoxelField.constant((0, 0, 0), (1, 1, 1), (3, 4, 5), 0.7, (-1.0, 0.0, 2.0))
        for p in np.random.default_rng(1).random((20, 3)):
            s = query_point(f, p)
            assert s.sigma == pytest.approx(softplus(0.7), rel=1e-12)
            assert s.color == pytest.approx((sigmoid(-1.0), 0.5, sigmoid(2.0)), rel=1e-12)

    def test_linear_ramp_reproduced_before_activation(self):
        res = (6, 3, 4)
        f = VoxelField.constant((-1, 0, 0), (2, 1, 1), res)
        xs = np.linspace(-1, 2, res[0])
        f.density[:] = (0.3 * xs - 0.2)[:, None, None]
        for p in np.random.default_rng(2).uniform((-1, 0, 0), (2, 1, 1), (50, 3)):
            raw, _ = oracle_raw(f, p)
            assert raw == pytest.approx(0.3 * p[0] - 0.2, abs=1e-12)
            assert query_point(f, p).sigma == pytest.approx(softplus(raw), rel=1e-12)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(3)
        f = random_field(rng)
        pts = rng.uniform(f.bbox_min, f.bbox_max, (300, 3))
        sigma, color = query_points(f, pts)
        for p, s, c in zip(pts, sigma, color):
            raw, rawc = oracle_raw(f, p)
            assert s == pytest.approx(softplus(raw), rel=1e-12)
            assert c == pytest.approx([sigmoid(v) for v in rawc], rel=1e-12)

    def test_deterministic(self):
        f = random_field(np.random.default_rng(4))
        pts = np.random.default_rng(5).uniform(-1, 1, (100, 3))
        a = query_points(f, pts)
        b = query_points(f, pts)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-60, 60))
    def test_activation_bounds_and_convexity(self, seed, shift):
        rng = np.random.default_rng(seed)
        f = random_field(rng, scale=30.0)
        f.density += shift
        pts = rng.uniform(f.bbox_min, f.bbox_max, (20, 3))
        sigma, color = query_points(f, pts)
        assert np.all(sigma >= 0)
        assert np.all((color >= 0) & (color <= 1))
        for p in pts:
            raw, _ = oracle_raw(f, p)
            g = (p - f.bbox_min) / (f.bbox_max - f.bbox_min) * (np.array(f.resolution) - 1)
            i0 = np.minimum(np.floor(g).astype(int), np.array(f.resolution) - 2)
            cell = f.density[i0[0]:i0[0] + 2, i0[1]:i0[1] + 2, i0[2]:i0[2] + 2]
            assert cell.min() - 1e-9 <= raw <= cell.max() + 1e-9


class TestAlpha:
    def test_zero_density_transparent(self):
        assert alpha_from_density(0.0, 0.01) == 0.0

    def test_unit(self):
        assert alpha_from_density(1.0, 1.0) == pytest.approx(1 - math.exp(-1), abs=1e-12)
        assert alpha_from_density(1.0, 1.0) == pytest.approx(0.632121, abs=1e-6)

    @pytest.mark.parametrize("delta", [1e-3, 0.02, 0.5, 3.0])
    def test_half(self, delta):
        assert alpha_from_density(math.log(2) / delta, delta) == pytest.approx(0.5, abs=1e-12)


class TestParamGradient:
    def test_at_vertex(self):
        f = random_field(np.random.default_rng(6))
        p = f.vertex_positions()[2, 1, 3]
        g = query_param_gradient(f, p)
        hit = [tuple(ix) == (2, 1, 3) for ix in g.indices]
        assert sum(hit) == 1
        assert g.weights[hit.index(True)] == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(np.delete(g.weights, hit.index(True)), 0.0, atol=1e-12)

    def test_at_cell_center(self):
        f = random_field(np.random.default_rng(7))
        vox = f.voxel_size
        p = f.bbox_min + vox * (np.array([1, 2, 0]) + 0.5)
        g = query_param_gradient(f, p)
        assert np.allclose(g.weights, 1 / 8)
        raw, rawc = oracle_raw(f, p)
        assert np.allclose(g.d_sigma, sigmoid(raw) / 8)
        sc = np.array([sigmoid(v) for v in rawc])
        assert np.allclose(g.d_color, (sc * (1 - sc))[None, :] / 8)

    def test_outside_raises(self):
        f = random_field(np.random.default_rng(8))
        with pytest.raises(FieldError):
            query_param_gradient(f, (3.0, 0, 0))

    def test_finite_differences(self):
        """Each of the 8 vertex derivatives against central differences, 1,000 probes."""
        rng = np.random.default_rng(9)
        h = 1e-4
        ok = total = 0
        for _ in range(125):
            f = random_field(rng, res=tuple(rng.integers(2, 6, 3)))
            p = rng.uniform(f.bbox_min, f.bbox_max)
            g = query_param_gradient(f, p)
            for c, (i, j, k) in enumerate(g.indices):
                ch = rng.integers(3)
                old_d, old_c = f.density[i, j, k], f.color[i, j, k, ch]
                f.density[i, j, k] = old_d + h
                up = query_point(f, p).sigma
                f.density[i, j, k] = old_d - h
                dn = query_point(f, p).sigma
                f.density[i, j, k] = old_d
                f.color[i, j, k, ch] = old_c + h
                cup = query_point(f, p).color[ch]
                f.color[i, j, k, ch] = old_c - h
                cdn = query_point(f, p).color[ch]
                f.color[i, j, k, ch] = old_c
                for a, n in ((g.d_sigma[c], (up - dn) / (2 * h)),
                             (g.d_color[c, ch], (cup - cdn) / (2 * h))):
                    total += 1
                    ok += abs(a - n) <= 1e-4 * max(abs(a), abs(n), 1e-8)
        assert total == 2000
        assert ok / total >= 0.99


class TestCrop:
    def test_superset_is_noop(self):
        f = random_field(np.random.default_rng(10))
        out = crop_field(f, f.bbox_min - 1, f.bbox_max + 1)
        assert out.equals(f) and out is not f

    def test_empty_intersection(self):
        f = random_field(np.random.default_rng(11))
        with pytest.raises(FieldError):
            crop_field(f, (5, 5, 5), (6, 6, 6))
        # Box inside the field but between lattice vertices.
        v = f.voxel_size
        with pytest.raises(FieldError):
            crop_field(f, f.bbox_min + 0.2 * v, f.bbox_min + 0.8 * v)

    def test_inside_bit_identical(self):
        f = random_field(np.random.default_rng(12))
        out = crop_field(f, (-1, -0.5, 0), (0.1, 0.7, 2))
        pos = f.vertex_positions()
        keep = pos[..., 0] <= 0.1
        assert np.array_equal(out.density[keep], f.density[keep])
        assert np.array_equal(out.color, f.color)
        sig, _ = query_points(out, pos[~keep])
        assert np.all(sig < 1e-6)


class TestFootprintAndIO:
    def test_64_cubed(self):
        f = VoxelField.constant((0, 0, 0), (1, 1, 1), (64, 64, 64))
        assert footprint_bytes(f) == 4_194_304 + HEADER_BYTES
        assert 64 ** 3 * 4 * 4 == 4_194_304

    def test_independent_of_values(self):
        rng = np.random.default_rng(13)
        a, b = random_field(rng), random_field(rng)
        assert footprint_bytes(a) == footprint_bytes(b) == len(to_bytes(a))

    def test_round_trip_bit_exact(self, tmp_path):
        f = quantize(random_field(np.random.default_rng(14)))
        save_field(f, tmp_path / "a.frf")
        g = load_field(tmp_path / "a.frf")
        assert g.equals(f)
        assert to_bytes(g) == (tmp_path / "a.frf").read_bytes()

    def test_file_layout(self):
        f = VoxelField.constant((0, 0, 0), (1, 2, 3), (2, 3, 4))
        f.density[1, 2, 3] = 7.0
        f.color[1, 0, 0] = (1.0, 2.0, 3.0)
        data = to_bytes(f)
        assert data[:4] == b"FRF1"
        dens = np.frombuffer(data, "<f4", 24, HEADER_BYTES)
        # x-fastest: index = x + Nx * (y + Ny * z)
        assert dens[1 + 2 * (2 + 3 * 3)] == 7.0
        col = np.frombuffer(data, "<f4", 72, HEADER_BYTES + 96)
        assert list(col[3:6]) == [1.0, 2.0, 3.0]

    def test_bad_magic(self):
        with pytest.raises(FieldError):
            from_bytes(b"XXXX" + bytes(100))
