"""Pinhole cameras, rays and uniform ray sampling.

Camera frame follows the usual vision convention: +x right, +y down, +z
forward. ``pose_rotation``/``pose_translation`` map camera coordinates to
world coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _kernels as K


class CameraError(ValueError):
    pass


@dataclass(eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise CameraError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise CameraError("image size must be positive")
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or np.linalg.det(r) < 0:
            raise CameraError("rotation must be orthonormal with determinant +1")

    @classmethod
    def look_at(cls, eye, target, up, width, height, fov_deg, name=""):
        """Camera at ``eye`` looking at ``target`` with a horizontal field of view."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward], axis=1)
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height, rot, eye, name)

    def same_pose(self, other: Camera) -> bool:
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))


class Ray(NamedTuple):
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float


class SamplePoint(NamedTuple):
    position: np.ndarray
    t: float
    delta: float


class RayBatch(NamedTuple):
    """Structure-of-arrays rays; ``u`` is the per-ray sample offset in [0, 1)."""

    origins: np.ndarray
    directions: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    u: np.ndarray

    def __len__(self):
        return self.origins.shape[0]

    def subset(self, sel) -> RayBatch:
        return RayBatch(*(a[sel] for a in self))


DEFAULT_T_NEAR = 0.0
DEFAULT_T_FAR = 1e3


def pixel_directions(camera: Camera, px, py) -> np.ndarray:
    """Unit world directions through the centers of pixels ``(px, py)``."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    d_cam = np.stack([(px + 0.5 - camera.cx) / camera.fx,
                      (py + 0.5 - camera.cy) / camera.fy,
                      np.ones_like(px)], axis=-1)
    d = d_cam @ camera.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def pixel_ray(camera: Camera, px, py, t_near=DEFAULT_T_NEAR, t_far=DEFAULT_T_FAR) -> Ray:
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise CameraError(f"pixel ({px}, {py}) outside {camera.width}x{camera.height} image")
    d = pixel_directions(camera, np.array([px]), np.array([py]))[0]
    return Ray(camera.translation.copy(), d, float(t_near), float(t_far))


def project(camera: Camera, points) -> np.ndarray:
    """World points to continuous pixel coordinates (pixel centers at +0.5)."""
    p = (np.asarray(points, dtype=np.float64) - camera.translation) @ camera.rotation
    return np.stack([camera.fx * p[..., 0] / p[..., 2] + camera.cx,
                     camera.fy * p[..., 1] / p[..., 2] + camera.cy], axis=-1)


def camera_rays(camera: Camera, t_near=DEFAULT_T_NEAR, t_far=DEFAULT_T_FAR,
                jitter=False, seed=0) -> RayBatch:
    """All pixel rays of a camera in row-major pixel order."""
    py, px = np.mgrid[0:camera.height, 0:camera.width]
    d = pixel_directions(camera, px.reshape(-1), py.reshape(-1))
    n = d.shape[0]
    return RayBatch(np.broadcast_to(camera.translation, (n, 3)).copy(), d,
                    np.full(n, float(t_near)), np.full(n, float(t_far)),
                    jitter_offsets(n, jitter, seed))


def jitter_offsets(n, jitter, seed) -> np.ndarray:
    if not jitter:
        return np.full(n, 0.5)
    return np.random.default_rng(seed).random(n)


def random_rays(cameras, n_rays, rng: np.random.Generator, t_near=DEFAULT_T_NEAR,
                t_far=DEFAULT_T_FAR, jitter=True):
    """Rays through uniformly drawn pixels of uniformly drawn cameras.

    Returns the batch and the ``(camera, row, col)`` index of every ray.
    """
    cam_idx = rng.integers(0, len(cameras), n_rays)
    origins = np.empty((n_rays, 3))
    dirs = np.empty((n_rays, 3))
    rows = np.empty(n_rays, dtype=np.int64)
    cols = np.empty(n_rays, dtype=np.int64)
    for c, cam in enumerate(cameras):
        sel = np.nonzero(cam_idx == c)[0]
        if sel.size == 0:
            continue
        rows[sel] = rng.integers(0, cam.height, sel.size)
        cols[sel] = rng.integers(0, cam.width, sel.size)
        origins[sel] = cam.translation
        dirs[sel] = pixel_directions(cam, cols[sel], rows[sel])
    u = rng.random(n_rays) if jitter else np.full(n_rays, 0.5)
    batch = RayBatch(origins, dirs, np.full(n_rays, float(t_near)),
                     np.full(n_rays, float(t_far)), u)
    return batch, np.stack([cam_idx, rows, cols], axis=1)


def ray_aabb(ray: Ray, bbox_min, bbox_max):
    """Entry/exit parameters of a ray in a box, or None when they miss."""
    lo = np.asarray(bbox_min, dtype=np.float64)
    hi = np.asarray(bbox_max, dtype=np.float64)
    o, d = ray.origin, ray.direction
    ok, t0, t1 = K.slab(o[0], o[1], o[2], d[0], d[1], d[2], lo, hi, ray.t_near, ray.t_far)
    return (t0, t1) if ok else None


def intervals(rays: RayBatch, bbox_min, bbox_max, step):
    """Per-ray sampling start and sample count for a batch."""
    n = len(rays)
    t0 = np.empty(n)
    counts = np.empty(n, dtype=np.int64)
    K.ray_intervals(np.ascontiguousarray(rays.origins), np.ascontiguousarray(rays.directions),
                    np.ascontiguousarray(rays.t_near), np.ascontiguousarray(rays.t_far),
                    np.asarray(bbox_min, dtype=np.float64), np.asarray(bbox_max, dtype=np.float64),
                    float(step), t0, counts)
    return t0, counts


def sample_ray(ray: Ray, step, bbox_min=None, bbox_max=None, jitter=False, seed=0):
    """Uniform samples ``t = t_enter + (i + u) * step`` along a ray.

    Without a box the interval is ``[t_near, t_far]``. The offset ``u`` is 0.5
    or, with jitter, the first draw of a generator seeded with ``seed``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if bbox_min is None:
        span = (ray.t_near, ray.t_far) if ray.t_near <= ray.t_far else None
    else:
        span = ray_aabb(ray, bbox_min, bbox_max)
    if span is None:
        return []
    t_enter, t_exit = span
    u = float(jitter_offsets(1, jitter, seed)[0])
    n = int(math.floor((t_exit - t_enter) / step))
    out = []
    for i in range(n):
        t = t_enter + (i + u) * step
        out.append(SamplePoint(ray.origin + t * ray.direction, t, float(step)))
    return out


# Camera files: one record per camera, ``camera <name>`` opens it, ``end``
# closes it, fields are ``key value...`` lines, ``#`` starts a comment.
_CAMERA_KEYS = {"fx": 1, "fy": 1, "cx": 1, "cy": 1, "width": 1, "height": 1,
                "rotation": 9, "translation": 3}


def format_cameras(cameras) -> str:
    lines = []
    for cam in cameras:
        lines.append(f"camera {cam.name or 'cam'}")
        for key in ("fx", "fy", "cx", "cy"):
            lines.append(f"  {key} {getattr(cam, key)!r}")
        lines.append(f"  width {cam.width}")
        lines.append(f"  height {cam.height}")
        lines.append("  rotation " + " ".join(repr(float(v)) for v in cam.rotation.reshape(-1)))
        lines.append("  translation " + " ".join(repr(float(v)) for v in cam.translation))
        lines.append("end")
    return "\n".join(lines) + "\n"


def parse_cameras(text: str, source="<cameras>"):
    cameras = []
    record = None
    name = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        tokens = line.split("#", 1)[0].split()
        if not tokens:
            continue
        key, vals = tokens[0], tokens[1:]
        where = f"{source}:{lineno}"
        if key == "camera":
            if record is not None:
                raise CameraError(f"{where}: 'camera' before closing 'end'")
            record, name = {}, " ".join(vals)
        elif key == "end":
            if record is None:
                raise CameraError(f"{where}: 'end' without 'camera'")
            missing = sorted(set(_CAMERA_KEYS) - set(record))
            if missing:
                raise CameraError(f"{where}: camera missing {', '.join(missing)}")
            try:
                cameras.append(Camera(record["fx"][0], record["fy"][0], record["cx"][0],
                                      record["cy"][0], int(record["width"][0]),
                                      int(record["height"][0]), record["rotation"],
                                      record["translation"], name))
            except CameraError as exc:
                raise CameraError(f"{where}: {exc}") from None
            record = None
        elif key in _CAMERA_KEYS:
            if record is None:
                raise CameraError(f"{where}: '{key}' outside a camera record")
            if len(vals) != _CAMERA_KEYS[key]:
                raise CameraError(f"{where}: '{key}' expects {_CAMERA_KEYS[key]} values")
            try:
                record[key] = [float(v) for v in vals]
            except ValueError:
                raise CameraError(f"{where}: non-numeric value in '{key}'") from None
        else:
            raise CameraError(f"{where}: unknown key '{key}'")
    if record is not None:
        raise CameraError(f"{source}: unterminated camera record")
    return cameras


def save_cameras(cameras, path):
    with open(path, "w") as fh:
        fh.write(format_cameras(cameras))


def load_cameras(path):
    with open(path) as fh:
        return parse_cameras(fh.read(), str(path))
