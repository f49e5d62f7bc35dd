"""Alpha compositing, image synthesis and image metrics."""

from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .field import alpha_from_density
from .sampling import Camera, RayBatch, camera_rays, intervals

#: Transmittance below which marching stops.
EARLY_STOP = 1e-4
PSNR_CAP = 99.0


@dataclass
class RenderConfig:
    step: float = 0.02
    background: tuple = (0.0, 0.0, 0.0)
    t_near: float = 0.0
    t_far: float = 1e3
    jitter: bool = False
    seed: int = 0
    early_stop: bool = True
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("render step must be positive")

    @property
    def stop_transmittance(self) -> float:
        return EARLY_STOP if self.early_stop else 0.0


@dataclass(eq=False)
class ImageBuffer:
    """Row-major ``(height, width, 3)`` float image."""

    pixels: np.ndarray

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def composite_ray(samples, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Front-to-back compositing of ``(alpha, color)`` pairs over a background."""
    out = np.zeros(3)
    trans = 1.0
    for alpha, color in samples:
        out += trans * alpha * np.asarray(color, dtype=np.float64)
        trans *= 1.0 - alpha
    return out + trans * np.asarray(background, dtype=np.float64)


def compositing_weights(alphas):
    """Per-sample weights ``T_i * alpha_i`` and the residual transmittance."""
    alphas = np.asarray(alphas, dtype=np.float64)
    trans = np.concatenate([[1.0], np.cumprod(1.0 - alphas)])
    return trans[:-1] * alphas, trans[-1]


def composite_ray_gradient(samples, background, d_color_out):
    """Reverse-mode derivatives of :func:`composite_ray`.

    Returns ``(d_alpha, d_color)`` with shapes ``(n,)`` and ``(n, 3)``.
    """
    n = len(samples)
    alphas = np.array([a for a, _ in samples], dtype=np.float64).reshape(n)
    colors = np.array([c for _, c in samples], dtype=np.float64).reshape(n, 3)
    g = np.asarray(d_color_out, dtype=np.float64)
    trans = np.concatenate([[1.0], np.cumprod(1.0 - alphas)])[:-1]
    d_alpha = np.empty(n)
    behind = np.asarray(background, dtype=np.float64).copy()
    for i in range(n - 1, -1, -1):
        d_alpha[i] = trans[i] * np.dot(g, colors[i] - behind)
        behind = alphas[i] * colors[i] + (1.0 - alphas[i]) * behind
    d_color = (trans * alphas)[:, None] * g[None, :]
    return d_alpha, d_color


def _chunks(n, workers):
    workers = max(1, min(int(workers), n)) if n else 1
    bounds = np.linspace(0, n, workers + 1).astype(np.int64)
    return list(zip(bounds[:-1], bounds[1:]))


def run_chunked(kernel, n, workers, *args):
    """Run ``kernel(*args, start, stop)`` over disjoint ranges of ``[0, n)``."""
    chunks = _chunks(n, workers)
    if len(chunks) == 1:
        kernel(*args, *chunks[0])
        return
    with ThreadPoolExecutor(len(chunks)) as pool:
        for fut in [pool.submit(kernel, *args, a, b) for a, b in chunks]:
            fut.result()


def render_rays(scene, rays: RayBatch, cfg: RenderConfig) -> np.ndarray:
    """Composited colors ``(n, 3)`` of a ray batch through a scene.

    ``scene`` is anything exposing ``bounds()`` plus either ``packed()`` (the
    compiled path) or ``query(points) -> (sigma, color)``.
    """
    lo, hi = scene.bounds()
    t0, counts = intervals(rays, lo, hi, cfg.step)
    bg = np.asarray(cfg.background, dtype=np.float64)
    if not hasattr(scene, "packed"):
        return _render_generic(scene, rays, t0, counts, cfg, bg)
    out = np.empty((len(rays), 3))
    run_chunked(K.render_rays, len(rays), cfg.workers,
                np.ascontiguousarray(rays.origins), np.ascontiguousarray(rays.directions),
                t0, counts, np.ascontiguousarray(rays.u), float(cfg.step), bg,
                cfg.stop_transmittance, *scene.packed().kernel_args, out)
    return out


def _render_generic(scene, rays, t0, counts, cfg, bg):
    ray_id = np.repeat(np.arange(len(rays)), counts)
    first = np.concatenate([[0], np.cumsum(counts)[:-1]])
    i = np.arange(ray_id.size) - np.repeat(first, counts)
    t = t0[ray_id] + (i + rays.u[ray_id]) * cfg.step
    pts = rays.origins[ray_id] + t[:, None] * rays.directions[ray_id]
    sigma, color = scene.query(pts)
    alpha = alpha_from_density(sigma, cfg.step)
    out = np.empty((len(rays), 3))
    for r in range(len(rays)):
        sl = slice(first[r], first[r] + counts[r])
        out[r] = composite_ray(zip(alpha[sl], color[sl]), bg)
    return out


def render_image(scene, camera: Camera, cfg: RenderConfig) -> ImageBuffer:
    rays = camera_rays(camera, cfg.t_near, cfg.t_far, cfg.jitter, cfg.seed)
    colors = render_rays(scene, rays, cfg)
    return ImageBuffer(colors.reshape(camera.height, camera.width, 3))


def psnr(a: ImageBuffer, b: ImageBuffer) -> float:
    pa = a.pixels if isinstance(a, ImageBuffer) else np.asarray(a)
    pb = b.pixels if isinstance(b, ImageBuffer) else np.asarray(b)
    if pa.shape != pb.shape:
        raise ValueError(f"image size mismatch: {pa.shape} vs {pb.shape}")
    mse = float(np.mean((pa.astype(np.float64) - pb.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def mean_psnr(images_a, images_b) -> float:
    return float(np.mean([psnr(a, b) for a, b in zip(images_a, images_b)]))


def write_ppm(image: ImageBuffer, path) -> None:
    data = np.round(np.clip(image.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{image.width} {image.height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> ImageBuffer:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise ValueError(f"{path}: only binary P6 images with maxval 255 are supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw, np.uint8, w * h * 3, pos + 1)
    return ImageBuffer(data.reshape(h, w, 3).astype(np.float64) / 255.0)


def write_raw(image: ImageBuffer, path) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<2I", image.width, image.height))
        fh.write(image.pixels.astype("<f4").tobytes())


def read_raw(path) -> ImageBuffer:
    with open(path, "rb") as fh:
        raw = fh.read()
    w, h = struct.unpack_from("<2I", raw)
    if len(raw) != 8 + 12 * w * h:
        raise ValueError(f"{path}: expected {8 + 12 * w * h} bytes, found {len(raw)}")
    return ImageBuffer(np.frombuffer(raw, "<f4", 3 * w * h, 8).reshape(h, w, 3)
                       .astype(np.float64))
