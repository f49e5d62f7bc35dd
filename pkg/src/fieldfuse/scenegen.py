"""Analytic teacher fields and the standard desk scenes.

Scene spec grammar (``#`` comments, one directive per line)::

    seed <int>
    field <name> resolution <nx> <ny> <nz> bbox <x0> <y0> <z0> <x1> <y1> <z1>
    place [translation x y z] [quaternion w x y z] [scale s]
    primitive <sphere radius r | box half hx hy hz | torus major R minor r>
              density <sigma> albedo <r> <g> <b> [softness w]
              [translation x y z] [quaternion w x y z] [scale s]
    background <field name>
    cameras train <n> held_out <m> width <w> height <h> fov <deg> radius <r>
            elevation <y_train> <y_held_out> target <x> <y> <z>

``place`` and ``primitive`` attach to the most recent ``field``. Primitive
poses live in the field's local frame; ``place`` puts the field in the world.
``softness`` defaults to 1.5 voxel widths of the enclosing field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .composer import ComposedScene, Placement, to_local
from .field import VACUUM_RAW, VoxelField, logit, softplus_inverse
from .sampling import Camera

COLOR_CLAMP = 20.0


class SpecError(ValueError):
    pass


@dataclass
class PrimitiveSpec:
    shape: str
    size: tuple
    density_value: float
    albedo: tuple
    softness: float | None = None
    pose: Placement = dc_field(default_factory=Placement)

    def __post_init__(self):
        if self.shape not in _SHAPES:
            raise SpecError(f"unknown primitive shape '{self.shape}'")
        if len(self.size) != _SHAPES[self.shape][1]:
            raise SpecError(f"{self.shape} takes {_SHAPES[self.shape][1]} size values")
        if self.density_value < 0:
            raise SpecError("density_value must be >= 0")
        if self.softness is not None and self.softness < 0:
            raise SpecError("softness must be >= 0")
        if any(not 0.0 <= a <= 1.0 for a in self.albedo):
            raise SpecError("albedo channels must lie in [0, 1]")

    def signed_distance(self, points) -> np.ndarray:
        local = to_local(self.pose, points)
        return _SHAPES[self.shape][0](local, self.size) * self.pose.scale


def _sdf_sphere(p, size):
    return np.linalg.norm(p, axis=-1) - size[0]


def _sdf_box(p, size):
    q = np.abs(p) - np.asarray(size)
    return (np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            + np.minimum(q.max(axis=-1), 0.0))


def _sdf_torus(p, size):
    ring = np.hypot(p[..., 0], p[..., 2]) - size[0]
    return np.hypot(ring, p[..., 1]) - size[1]


_SHAPES = {"sphere": (_sdf_sphere, 1), "box": (_sdf_box, 3), "torus": (_sdf_torus, 2)}
_SIZE_KEYS = {"sphere": ("radius", 1), "box": ("half", 3), "torus": ("major", 1, "minor", 1)}


def smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def occupancy(sdf, softness):
    if softness == 0:
        return (sdf <= 0).astype(np.float64)
    return smoothstep(0.5 - sdf / softness)


def rasterize_primitives(specs, bbox_min, bbox_max, resolution) -> VoxelField:
    """Voxelize primitives: max density, albedo of the nearest surface."""
    out = VoxelField.constant(bbox_min, bbox_max, resolution)
    if not specs:
        return out
    pos = out.vertex_positions()
    default_soft = 1.5 * float(np.max(out.voxel_size))
    sigma = np.zeros(out.resolution)
    nearest = np.full(out.resolution, np.inf)
    albedo = np.zeros(out.resolution + (3,))
    for spec in specs:
        d = spec.signed_distance(pos)
        soft = default_soft if spec.softness is None else spec.softness
        sigma = np.maximum(sigma, spec.density_value * occupancy(d, soft))
        closer = d < nearest
        nearest = np.where(closer, d, nearest)
        albedo[closer] = spec.albedo
    with np.errstate(divide="ignore"):
        out.density = np.maximum(softplus_inverse(sigma), VACUUM_RAW)
        out.color = np.clip(logit(albedo), -COLOR_CLAMP, COLOR_CLAMP)
    return out


@dataclass
class FieldSpec:
    name: str
    resolution: tuple
    bbox_min: tuple
    bbox_max: tuple
    placement: Placement = dc_field(default_factory=Placement)
    primitives: list = dc_field(default_factory=list)

    def build(self) -> VoxelField:
        return rasterize_primitives(self.primitives, self.bbox_min, self.bbox_max, self.resolution)


@dataclass
class RigSpec:
    train: int = 16
    held_out: int = 4
    width: int = 200
    height: int = 200
    fov: float = 50.0
    radius: float = 2.6
    elevation: tuple = (1.0, 1.3)
    target: tuple = (0.0, -0.45, 0.0)


@dataclass
class SceneSpec:
    fields: list
    background: str
    rig: RigSpec
    seed: int = 0

    def build(self, seed=None):
        seed = self.seed if seed is None else seed
        names = [f.name for f in self.fields]
        scene = ComposedScene([(f.build(), f.placement) for f in self.fields],
                              names.index(self.background))
        train, held = camera_ring(self.rig, seed)
        return scene, train, held


def camera_ring(rig: RigSpec, seed=0):
    """Train cameras evenly on a ring; held-out cameras at a different height, between them."""
    phase = np.random.default_rng(seed).uniform(0.0, 2.0 * math.pi / rig.train)

    def ring(n, y, offset, prefix):
        cams = []
        for k in range(n):
            a = phase + offset + 2.0 * math.pi * k / n
            eye = (rig.radius * math.cos(a), y, rig.radius * math.sin(a))
            cams.append(Camera.look_at(eye, rig.target, (0, 1, 0), rig.width, rig.height,
                                       rig.fov, f"{prefix}_{k:02d}"))
        return cams

    train = ring(rig.train, rig.elevation[0], 0.0, "train")
    held = ring(rig.held_out, rig.elevation[1], math.pi / rig.train, "heldout")
    return train, held


def _floats(tokens, n, where, key):
    vals = tokens[:n]
    if len(vals) != n:
        raise SpecError(f"{where}: '{key}' expects {n} values")
    try:
        return [float(v) for v in vals]
    except ValueError:
        raise SpecError(f"{where}: non-numeric value in '{key}'") from None


def _options(tokens, arity, where):
    opts = {}
    while tokens:
        key = tokens[0]
        if key not in arity:
            raise SpecError(f"{where}: unknown option '{key}'")
        opts[key] = _floats(tokens[1:], arity[key], where, key)
        tokens = tokens[1 + arity[key]:]
    return opts


def _placement(opts, where):
    try:
        return Placement.from_quaternion(opts.get("quaternion", (1, 0, 0, 0)),
                                         opts.get("translation", (0, 0, 0)),
                                         opts.get("scale", [1.0])[0])
    except ValueError as exc:
        raise SpecError(f"{where}: {exc}") from None


def parse_spec(text: str, source="<spec>") -> SceneSpec:
    fields, background, rig, seed = [], None, RigSpec(), 0
    pose_keys = {"translation": 3, "quaternion": 4, "scale": 1}
    for lineno, line in enumerate(text.splitlines(), 1):
        tokens = line.split("#", 1)[0].split()
        if not tokens:
            continue
        where = f"{source}:{lineno}"
        key, rest = tokens[0], tokens[1:]
        if key == "seed":
            if len(rest) != 1 or not rest[0].isdigit():
                raise SpecError(f"{where}: expected 'seed <int>'")
            seed = int(rest[0])
        elif key == "field":
            if not rest:
                raise SpecError(f"{where}: field needs a name")
            opts = _options(rest[1:], {"resolution": 3, "bbox": 6}, where)
            if "resolution" not in opts or "bbox" not in opts:
                raise SpecError(f"{where}: field needs resolution and bbox")
            res = tuple(int(v) for v in opts["resolution"])
            if min(res) < 2:
                raise SpecError(f"{where}: resolution must be >= 2 per axis")
            box = opts["bbox"]
            if not all(box[a] < box[a + 3] for a in range(3)):
                raise SpecError(f"{where}: bbox min must be below max")
            fields.append(FieldSpec(rest[0], res, tuple(box[:3]), tuple(box[3:])))
        elif key in ("place", "primitive"):
            if not fields:
                raise SpecError(f"{where}: '{key}' before any field")
            if key == "place":
                fields[-1].placement = _placement(_options(rest, pose_keys, where), where)
                continue
            if not rest or rest[0] not in _SHAPES:
                raise SpecError(f"{where}: primitive shape must be one of {sorted(_SHAPES)}")
            shape = rest[0]
            size_spec = _SIZE_KEYS[shape]
            arity = dict(pose_keys, density=1, albedo=3, softness=1)
            arity.update(zip(size_spec[::2], size_spec[1::2]))
            opts = _options(rest[1:], arity, where)
            size_keys = size_spec[::2]
            for req in (*size_keys, "density", "albedo"):
                if req not in opts:
                    raise SpecError(f"{where}: {shape} primitive needs '{req}'")
            size = tuple(v for k in size_keys for v in opts[k])
            try:
                fields[-1].primitives.append(PrimitiveSpec(
                    shape, size, opts["density"][0], tuple(opts["albedo"]),
                    opts["softness"][0] if "softness" in opts else None,
                    _placement(opts, where)))
            except SpecError as exc:
                raise SpecError(f"{where}: {exc}") from None
        elif key == "background":
            if len(rest) != 1:
                raise SpecError(f"{where}: expected 'background <field name>'")
            background = rest[0]
        elif key == "cameras":
            opts = _options(rest, {"train": 1, "held_out": 1, "width": 1, "height": 1,
                                   "fov": 1, "radius": 1, "elevation": 2, "target": 3}, where)
            rig = RigSpec(
                int(opts.get("train", [rig.train])[0]), int(opts.get("held_out", [rig.held_out])[0]),
                int(opts.get("width", [rig.width])[0]), int(opts.get("height", [rig.height])[0]),
                opts.get("fov", [rig.fov])[0], opts.get("radius", [rig.radius])[0],
                tuple(opts.get("elevation", rig.elevation)), tuple(opts.get("target", rig.target)))
        else:
            raise SpecError(f"{where}: unknown directive '{key}'")
    if not fields:
        raise SpecError(f"{source}: no fields defined")
    names = [f.name for f in fields]
    if len(set(names)) != len(names):
        raise SpecError(f"{source}: duplicate field names")
    if background is None:
        background = names[0]
    if background not in names:
        raise SpecError(f"{source}: background '{background}' is not a field")
    return SceneSpec(fields, background, rig, seed)


_ROOM = """\
field room resolution 64 64 64 bbox -1 -1 -1 1 1 1
primitive box half 1 0.14 1 translation 0 -0.88 0 density 40 albedo 0.62 0.5 0.36
primitive box half 0.11 0.4 0.11 translation 0.72 -0.34 0.72 density 40 albedo 0.25 0.55 0.3
primitive box half 0.11 0.4 0.11 translation -0.72 -0.34 0.72 density 40 albedo 0.8 0.78 0.7
primitive box half 0.11 0.4 0.11 translation 0.72 -0.34 -0.72 density 40 albedo 0.3 0.32 0.6
primitive box half 0.11 0.4 0.11 translation -0.72 -0.34 -0.72 density 40 albedo 0.7 0.3 0.5
"""

BUILTIN_SPECS = {
    "room-3obj": _ROOM + """\
field ball resolution 64 64 64 bbox -1 -1 -1 1 1 1
place translation -0.28 -0.49 0.12 scale 0.27
primitive sphere radius 0.85 density 12 albedo 0.88 0.22 0.15
field crate resolution 64 64 64 bbox -0.4 -0.4 -0.4 0.4 0.4 0.4
place translation 0.3 -0.6 -0.2 quaternion 0.9238795 0 0.3826834 0
primitive box half 0.22 0.13 0.16 density 40 albedo 0.2 0.45 0.9
primitive torus major 0.12 minor 0.04 translation 0 0.16 0 density 40 albedo 0.95 0.85 0.2
background room
cameras train 16 held_out 4 width 200 height 200 fov 50 radius 2.6 elevation 1.0 1.3 target 0 -0.45 0
""",
    "wall": """\
field wall resolution 16 16 16 bbox -1 -1 -1 1 1 1
primitive box half 0.9 0.9 0.2 density 30 albedo 0.7 0.4 0.25
background wall
cameras train 8 held_out 2 width 32 height 32 fov 40 radius 3 elevation 0.0 0.3 target 0 0 0
""",
    "sphere": """\
field sphere resolution 48 48 48 bbox -1 -1 -1 1 1 1
primitive sphere radius 0.6 density 30 albedo 0.8 0.3 0.2
background sphere
cameras train 8 held_out 2 width 64 height 64 fov 45 radius 3 elevation 0.5 0.9 target 0 0 0
""",
}
SCENE_NAMES = tuple(BUILTIN_SPECS)

_BENCH_OBJECTS = [
    ("sphere radius 0.2", (-0.35, -0.54, 0.2), (0.88, 0.22, 0.15)),
    ("box half 0.16 0.12 0.14", (0.32, -0.62, -0.25), (0.2, 0.45, 0.9)),
    ("torus major 0.14 minor 0.05", (0.05, -0.69, 0.42), (0.95, 0.85, 0.2)),
    ("sphere radius 0.14", (0.38, -0.6, 0.3), (0.3, 0.8, 0.4)),
    ("box half 0.1 0.18 0.1", (-0.3, -0.56, -0.38), (0.9, 0.5, 0.1)),
    ("sphere radius 0.12", (0.0, -0.62, -0.05), (0.6, 0.2, 0.8)),
    ("box half 0.12 0.08 0.2", (-0.5, -0.66, -0.05), (0.4, 0.9, 0.9)),
]
BENCH_FAMILY = "room-objects"


def bench_spec_text(n: int, resolution=64, width=200, height=200) -> str:
    """``n`` full-box fields: the room plus ``n - 1`` objects, each in its own lattice."""
    if not 1 <= n <= len(_BENCH_OBJECTS) + 1:
        raise SpecError(f"bench family supports 1..{len(_BENCH_OBJECTS) + 1} entries, got {n}")
    r = resolution
    room = _ROOM.replace("resolution 64 64 64", f"resolution {r} {r} {r}")
    lines = [room]
    for k, (shape, pos, alb) in enumerate(_BENCH_OBJECTS[:n - 1]):
        lines.append(f"field obj{k} resolution {r} {r} {r} bbox -1 -1 -1 1 1 1\n"
                     f"primitive {shape} translation {pos[0]} {pos[1]} {pos[2]} "
                     f"density 40 albedo {alb[0]} {alb[1]} {alb[2]}\n")
    lines.append("background room\n")
    lines.append(f"cameras train 16 held_out 4 width {width} height {height} fov 50 "
                 f"radius 2.6 elevation 1.0 1.3 target 0 -0.45 0\n")
    return "".join(lines)


def spec_text(name: str) -> str:
    if name in BUILTIN_SPECS:
        return BUILTIN_SPECS[name]
    if name.startswith(BENCH_FAMILY + "-"):
        try:
            return bench_spec_text(int(name[len(BENCH_FAMILY) + 1:]))
        except ValueError:
            pass
    raise SpecError(f"unknown scene '{name}'; known: {', '.join(SCENE_NAMES)}, "
                    f"{BENCH_FAMILY}-<n>")


def make_desk_scene(name: str = "room-3obj", seed: int = 0):
    """Return ``(scene, train_cameras, held_out_cameras)`` for a named scene."""
    return parse_spec(spec_text(name), name).build(seed)
