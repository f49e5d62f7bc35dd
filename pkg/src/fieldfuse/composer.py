"""Scenes assembled from several placed fields.

At every sample the entry with the larger opacity wins. All entries share
the sample step, so opacity ordering equals world-density ordering and the
selection compares densities directly. Local densities are divided by the
placement scale so optical depth survives resizing.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation

from .field import FieldSample, Packed, VoxelField, footprint_bytes, load_field, pack_entries, query_packed
from .renderer import ImageBuffer, RenderConfig, render_image


class SceneError(ValueError):
    pass


@dataclass(eq=False)
class Placement:
    """Similarity transform ``x_world = scale * R @ x_local + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.scale = float(self.scale)
        if self.scale <= 0:
            raise SceneError("placement scale must be positive")
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or np.linalg.det(r) <= 0:
            raise SceneError("placement rotation must be orthonormal with determinant +1")

    @classmethod
    def from_quaternion(cls, wxyz, translation=(0, 0, 0), scale=1.0):
        w, x, y, z = wxyz
        return cls(Rotation.from_quat([x, y, z, w]).as_matrix(), translation, scale)

    @property
    def is_identity(self) -> bool:
        return (np.array_equal(self.rotation, np.eye(3)) and not self.translation.any()
                and self.scale == 1.0)

    def to_world(self, p_local):
        return self.scale * np.asarray(p_local, dtype=np.float64) @ self.rotation.T + self.translation


def to_local(placement: Placement, p_world):
    return (np.asarray(p_world, dtype=np.float64) - placement.translation) @ placement.rotation / placement.scale


@dataclass(eq=False)
class ComposedScene:
    entries: list
    background_index: int = 0

    def __post_init__(self):
        if not self.entries:
            raise SceneError("a composed scene needs at least one entry")
        if not 0 <= self.background_index < len(self.entries):
            raise SceneError(f"background_index {self.background_index} out of range")
        self._packed = None
        self._occupancy = {}

    @property
    def fields(self):
        return [f for f, _ in self.entries]

    @property
    def background(self) -> tuple[VoxelField, Placement]:
        return self.entries[self.background_index]

    def packed(self) -> Packed:
        # Teacher fields are treated as immutable once composed.
        if self._packed is None:
            self._packed = pack_entries(
                self.fields,
                np.array([p.rotation for _, p in self.entries]),
                np.array([p.translation for _, p in self.entries]),
                np.array([p.scale for _, p in self.entries]))
        return self._packed

    def cell_occupancy(self, raw_floor, slack=1e-6):
        """Per-cell flags: can any point of the cell reach ``raw_floor[e]``?

        Trilinear interpolation never exceeds the largest of its 8 corners, so
        a cell is flagged when its largest corner raw density comes within
        ``slack`` of the entry's floor (the slack covers interpolation rounding). Returns flat uint8 flags for all entries in cell order
        (``(ix * (ny - 1) + iy) * (nz - 1) + iz``) and each entry's offset.
        """
        key = tuple(float(v) for v in raw_floor)
        if key not in self._occupancy:
            flags, offsets, start = [], [], 0
            for fld, floor in zip(self.fields, key):
                d = fld.density
                top = np.maximum(d[:-1], d[1:])
                top = np.maximum(top[:, :-1], top[:, 1:])
                top = np.maximum(top[:, :, :-1], top[:, :, 1:])
                flags.append((top >= floor - slack).astype(np.uint8).reshape(-1))
                offsets.append(start)
                start += top.size
            self._occupancy[key] = (np.concatenate(flags), np.array(offsets, dtype=np.int64))
        return self._occupancy[key]

    def bounds(self):
        """Union of the world-space boxes of all placed entries."""
        boxes = [placed_bounds(f, p) for f, p in self.entries]
        return (np.min([b[0] for b in boxes], axis=0), np.max([b[1] for b in boxes], axis=0))

    def payload_bytes(self) -> int:
        return sum(footprint_bytes(f) for f in self.fields)

    def query(self, points):
        sigma, color, _ = query_packed(self.packed(), points)
        return sigma, color


def placed_bounds(fld: VoxelField, placement: Placement):
    corners = np.array([[fld.bbox_max[0] if a else fld.bbox_min[0],
                         fld.bbox_max[1] if b else fld.bbox_min[1],
                         fld.bbox_max[2] if c else fld.bbox_min[2]]
                        for a in (0, 1) for b in (0, 1) for c in (0, 1)])
    world = placement.to_world(corners)
    return world.min(axis=0), world.max(axis=0)


def query_composed(scene: ComposedScene, p_world) -> tuple[FieldSample, int]:
    sigma, color, winner = query_packed(scene.packed(), np.asarray(p_world, dtype=np.float64))
    return FieldSample(float(sigma[0]), tuple(float(c) for c in color[0])), int(winner[0])


def query_composed_many(scene: ComposedScene, points):
    return query_packed(scene.packed(), points)


class RenderStats(NamedTuple):
    wall_seconds: float
    payload_bytes: int


def render_composed(scene: ComposedScene, camera, cfg: RenderConfig, record=None) -> ImageBuffer:
    """Ground-truth render of the composition; appends RenderStats to ``record``."""
    start = time.perf_counter()
    image = render_image(scene, camera, cfg)
    if record is not None:
        record.append(RenderStats(time.perf_counter() - start, scene.payload_bytes()))
    return image


# Scene files: ``background_index <i>`` and one ``entry <path> [translation x y z]
# [quaternion w x y z | matrix r00 .. r22] [scale s]`` line per field. Relative
# paths resolve against the scene file's directory.
def format_scene(paths, placements, background_index) -> str:
    lines = [f"background_index {background_index}"]
    for path, pl in zip(paths, placements):
        lines.append(
            f"entry {path} translation " + " ".join(repr(float(v)) for v in pl.translation)
            + " matrix " + " ".join(repr(float(v)) for v in pl.rotation.reshape(-1))
            + f" scale {pl.scale!r}")
    return "\n".join(lines) + "\n"


def parse_scene(text: str, source="<scene>"):
    """Parse scene text into ``(paths, placements, background_index)``."""
    paths, placements = [], []
    background = 0
    arity = {"translation": 3, "quaternion": 4, "matrix": 9, "scale": 1}
    for lineno, line in enumerate(text.splitlines(), 1):
        tokens = line.split("#", 1)[0].split()
        if not tokens:
            continue
        where = f"{source}:{lineno}"
        if tokens[0] == "background_index":
            if len(tokens) != 2 or not tokens[1].isdigit():
                raise SceneError(f"{where}: expected 'background_index <int>'")
            background = int(tokens[1])
        elif tokens[0] == "entry":
            if len(tokens) < 2:
                raise SceneError(f"{where}: entry needs a field path")
            opts = {}
            rest = tokens[2:]
            while rest:
                key = rest[0]
                if key not in arity:
                    raise SceneError(f"{where}: unknown entry option '{key}'")
                vals = rest[1:1 + arity[key]]
                if len(vals) != arity[key]:
                    raise SceneError(f"{where}: '{key}' expects {arity[key]} values")
                try:
                    opts[key] = [float(v) for v in vals]
                except ValueError:
                    raise SceneError(f"{where}: non-numeric value in '{key}'") from None
                rest = rest[1 + arity[key]:]
            if "quaternion" in opts and "matrix" in opts:
                raise SceneError(f"{where}: give either quaternion or matrix, not both")
            try:
                if "quaternion" in opts:
                    rot = Rotation.from_quat(np.roll(opts["quaternion"], -1)).as_matrix()
                else:
                    rot = np.reshape(opts.get("matrix", np.eye(3).reshape(-1)), (3, 3))
                placements.append(Placement(rot, opts.get("translation", (0, 0, 0)),
                                            opts.get("scale", [1.0])[0]))
            except (SceneError, ValueError) as exc:
                raise SceneError(f"{where}: {exc}") from None
            paths.append(tokens[1])
        else:
            raise SceneError(f"{where}: unknown directive '{tokens[0]}'")
    if not paths:
        raise SceneError(f"{source}: no entries")
    if background >= len(paths):
        raise SceneError(f"{source}: background_index {background} out of range")
    return paths, placements, background


def load_scene(path) -> ComposedScene:
    with open(path) as fh:
        paths, placements, background = parse_scene(fh.read(), str(path))
    base = os.path.dirname(os.path.abspath(path))
    fields = [load_field(p if os.path.isabs(p) else os.path.join(base, p)) for p in paths]
    return ComposedScene(list(zip(fields, placements)), background)


def save_scene(scene: ComposedScene, path, field_paths) -> None:
    with open(path, "w") as fh:
        fh.write(format_scene(field_paths, [p for _, p in scene.entries], scene.background_index))
