"""Compose voxel radiance fields and distill the composition into one field."""

from .composer import ComposedScene, Placement, query_composed, render_composed, to_local
from .distiller import DistillConfig, fit_from_images, fuse
from .field import VoxelField, alpha_from_density, footprint_bytes, query_point
from .renderer import ImageBuffer, RenderConfig, psnr, render_image
from .sampling import Camera, Ray, pixel_ray, ray_aabb, sample_ray
from .scenegen import make_desk_scene, rasterize_primitives

__version__ = "0.1.0"

__all__ = [
    "Camera", "ComposedScene", "DistillConfig", "ImageBuffer", "Placement", "Ray",
    "RenderConfig", "VoxelField", "alpha_from_density", "fit_from_images", "footprint_bytes",
    "fuse", "make_desk_scene", "pixel_ray", "psnr", "query_composed", "query_point",
    "rasterize_primitives", "ray_aabb", "render_composed", "render_image", "sample_ray",
    "to_local",
]
