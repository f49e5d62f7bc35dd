"""Dense voxel radiance fields.

A field stores raw (pre-activation) density and RGB at the vertices of a
regular lattice spanning an axis-aligned box. Queries interpolate the raw
values trilinearly and only then activate them: ``softplus`` for density and
``sigmoid`` for color. Lattice vertices sit exactly on the box corners, so a
resolution of ``N`` gives ``N - 1`` cells along that axis.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _kernels as K

MAGIC = b"FRF1"
HEADER_BYTES = 4 + 3 * 4 + 6 * 4
CHANNELS = 4
SCALAR_BYTES = 4
#: Raw density written into cropped-away vertices; softplus(-20) ~ 2e-9.
VACUUM_RAW = -20.0


class FieldError(ValueError):
    pass


@dataclass(eq=False)
class VoxelField:
    """Raw density ``(Nx, Ny, Nz)`` and raw color ``(Nx, Ny, Nz, 3)`` over a box."""

    bbox_min: np.ndarray
    bbox_max: np.ndarray
    density: np.ndarray
    color: np.ndarray

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64).reshape(3)
        self.density = np.ascontiguousarray(self.density, dtype=np.float64)
        self.color = np.ascontiguousarray(self.color, dtype=np.float64)
        if not np.all(self.bbox_min < self.bbox_max):
            raise FieldError(f"bbox_min {self.bbox_min} must be < bbox_max {self.bbox_max}")
        if self.density.ndim != 3 or min(self.density.shape) < 2:
            raise FieldError(f"density grid must be 3-D with >= 2 vertices per axis, "
                             f"got shape {self.density.shape}")
        if self.color.shape != self.density.shape + (3,):
            raise FieldError(f"color grid shape {self.color.shape} does not match "
                             f"density {self.density.shape}")

    @classmethod
    def constant(cls, bbox_min, bbox_max, resolution, raw_density=VACUUM_RAW, raw_color=0.0):
        res = tuple(int(n) for n in resolution)
        dens = np.full(res, float(raw_density))
        col = np.empty(res + (3,))
        col[...] = raw_color
        return cls(bbox_min, bbox_max, dens, col)

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.density.shape)

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / (np.array(self.resolution) - 1)

    def vertex_positions(self) -> np.ndarray:
        """World positions of all vertices, shape ``(Nx, Ny, Nz, 3)``."""
        axes = [np.linspace(self.bbox_min[a], self.bbox_max[a], self.resolution[a])
                for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def copy(self) -> VoxelField:
        return VoxelField(self.bbox_min.copy(), self.bbox_max.copy(),
                          self.density.copy(), self.color.copy())

    def bounds(self):
        return self.bbox_min, self.bbox_max

    def packed(self) -> Packed:
        return pack_entries([self], np.eye(3)[None], np.zeros((1, 3)), np.ones(1))

    def equals(self, other: VoxelField) -> bool:
        return (np.array_equal(self.bbox_min, other.bbox_min)
                and np.array_equal(self.bbox_max, other.bbox_max)
                and np.array_equal(self.density, other.density)
                and np.array_equal(self.color, other.color))


class FieldSample(NamedTuple):
    sigma: float
    color: tuple[float, float, float]


class VertexGradient(NamedTuple):
    """Sparse derivative of one query with respect to its 8 cell vertices.

    ``indices`` are ``(i, j, k)`` lattice triples. ``d_sigma[c]`` is the
    derivative of sigma with respect to the raw density at vertex ``c`` and
    ``d_color[c, ch]`` that of color channel ``ch`` with respect to the raw
    color channel ``ch`` at vertex ``c``. Cross-channel terms are zero.
    """

    indices: np.ndarray
    weights: np.ndarray
    d_sigma: np.ndarray
    d_color: np.ndarray


class Packed(NamedTuple):
    dens: np.ndarray
    col: np.ndarray
    res: np.ndarray
    off: np.ndarray
    bmin: np.ndarray
    bmax: np.ndarray
    rot: np.ndarray
    trans: np.ndarray
    scale: np.ndarray

    @property
    def kernel_args(self):
        return tuple(self)


def pack_entries(fields, rotations, translations, scales) -> Packed:
    """Concatenate field grids for the compiled kernels (views when single)."""
    if len(fields) == 1:
        dens = fields[0].density.reshape(-1)
        col = fields[0].color.reshape(-1)
    else:
        dens = np.concatenate([f.density.reshape(-1) for f in fields])
        col = np.concatenate([f.color.reshape(-1) for f in fields])
    sizes = [f.density.size for f in fields]
    off = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    return Packed(
        dens, col,
        np.array([f.resolution for f in fields], dtype=np.int64).reshape(-1, 3),
        off,
        np.array([f.bbox_min for f in fields], dtype=np.float64).reshape(-1, 3),
        np.array([f.bbox_max for f in fields], dtype=np.float64).reshape(-1, 3),
        np.ascontiguousarray(rotations, dtype=np.float64).reshape(-1, 3, 3),
        np.ascontiguousarray(translations, dtype=np.float64).reshape(-1, 3),
        np.ascontiguousarray(scales, dtype=np.float64).reshape(-1),
    )


def query_packed(packed: Packed, points: np.ndarray):
    """Vectorized max-sigma query; returns ``(sigma, color, winner)``."""
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    sigma = np.empty(n)
    color = np.empty((n, 3))
    winner = np.empty(n, dtype=np.int64)
    K.query_points(pts, *packed.kernel_args, sigma, color, winner, 0, n)
    return sigma, color, winner


def query_points(field: VoxelField, points: np.ndarray):
    """Activated ``(sigma, color)`` at many points; zero outside the box."""
    sigma, color, _ = query_packed(field.packed(), points)
    return sigma, color


def query_point(field: VoxelField, p) -> FieldSample:
    sigma, color = query_points(field, np.asarray(p, dtype=np.float64).reshape(1, 3))
    return FieldSample(float(sigma[0]), tuple(float(c) for c in color[0]))


def alpha_from_density(sigma, delta):
    """Opacity of a step of length ``delta`` through density ``sigma``."""
    return -np.expm1(-np.asarray(sigma, dtype=np.float64) * delta)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def logit(y):
    y = np.asarray(y, dtype=np.float64)
    return np.log(y) - np.log1p(-y)


def query_param_gradient(field: VoxelField, p) -> VertexGradient:
    p = np.asarray(p, dtype=np.float64).reshape(3)
    if np.any(p < field.bbox_min) or np.any(p > field.bbox_max):
        raise FieldError(f"gradient requested outside the field box at {p.tolist()}")
    res = np.array(field.resolution)
    g = (p - field.bbox_min) / (field.bbox_max - field.bbox_min) * (res - 1)
    base = np.clip(np.floor(g).astype(np.int64), 0, res - 2)
    frac = g - base
    corners = np.array([[a, b, c] for a in (0, 1) for b in (0, 1) for c in (0, 1)])
    indices = base + corners
    weights = np.prod(np.where(corners == 1, frac, 1.0 - frac), axis=1)
    i, j, k = indices.T
    raw_d = np.dot(weights, field.density[i, j, k])
    raw_c = weights @ field.color[i, j, k]
    sig_c = _sigmoid(raw_c)
    d_sigma = weights * _sigmoid(raw_d)
    d_color = weights[:, None] * (sig_c * (1.0 - sig_c))[None, :]
    return VertexGradient(indices, weights, d_sigma, d_color)


def crop_field(field: VoxelField, sub_min, sub_max) -> VoxelField:
    """Keep geometry inside ``[sub_min, sub_max]``; empty every other vertex."""
    sub_min = np.asarray(sub_min, dtype=np.float64)
    sub_max = np.asarray(sub_max, dtype=np.float64)
    pos = field.vertex_positions()
    inside = np.all((pos >= sub_min) & (pos <= sub_max), axis=-1)
    if not inside.any():
        raise FieldError("crop box contains no lattice vertex of the field")
    out = field.copy()
    out.density[~inside] = VACUUM_RAW
    return out


def footprint_bytes(field: VoxelField) -> int:
    return math.prod(field.resolution) * CHANNELS * SCALAR_BYTES + HEADER_BYTES


def to_bytes(field: VoxelField) -> bytes:
    nx, ny, nz = field.resolution
    head = MAGIC + struct.pack("<3I6f", nx, ny, nz, *field.bbox_min, *field.bbox_max)
    # File order is x-fastest; in-memory (Nx, Ny, Nz) C order is z-fastest.
    dens = field.density.transpose(2, 1, 0).astype("<f4").tobytes()
    col = field.color.transpose(2, 1, 0, 3).astype("<f4").tobytes()
    return head + dens + col


def from_bytes(data: bytes) -> VoxelField:
    if data[:4] != MAGIC:
        raise FieldError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    nx, ny, nz, *box = struct.unpack_from("<3I6f", data, 4)
    n = nx * ny * nz
    expected = HEADER_BYTES + n * CHANNELS * SCALAR_BYTES
    if len(data) != expected:
        raise FieldError(f"field payload is {len(data)} bytes, expected {expected}")
    dens = np.frombuffer(data, "<f4", n, HEADER_BYTES).reshape(nz, ny, nx)
    col = np.frombuffer(data, "<f4", 3 * n, HEADER_BYTES + 4 * n).reshape(nz, ny, nx, 3)
    return VoxelField(np.array(box[:3]), np.array(box[3:]),
                      dens.transpose(2, 1, 0).astype(np.float64),
                      col.transpose(2, 1, 0, 3).astype(np.float64))


def save_field(field: VoxelField, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(field))


def load_field(path) -> VoxelField:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def quantize(field: VoxelField) -> VoxelField:
    """Round parameters and box to float32 so the field survives a save/load unchanged."""
    return VoxelField(field.bbox_min.astype(np.float32).astype(np.float64),
                      field.bbox_max.astype(np.float32).astype(np.float64),
                      field.density.astype(np.float32).astype(np.float64),
                      field.color.astype(np.float32).astype(np.float64))
