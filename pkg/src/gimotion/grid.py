"""Voxel grid containers, world/voxel mapping, trilinear sampling and pull warping.

All world coordinates are millimetres. Arrays are indexed ``[i, j, k]`` with
axis 0 mapping to world x. Grids are immutable: arrays are copied on
construction and flagged read-only.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

INTENSITY = "intensity"
DOSE_GRAY = "dose_gray"
FORWARD_PUSH = "forward_push"
BACKWARD_PULL = "backward_pull"

# Fractional voxel offsets this close to an integer are treated as on-grid so
# that integer shifts sample source voxels bit-exactly.
SNAP_EPS = 1e-7


class ConventionError(ValueError):
    pass


def _frozen(arr, dtype=None) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class GridGeometry:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValueError("geometry needs 3 dims, 3 spacings and 3 origin values")
        if min(dims) < 1:
            raise ValueError(f"dims must be >= 1, got {dims}")
        if min(spacing) <= 0:
            raise ValueError(f"spacing must be > 0, got {spacing}")
        if not np.all(np.isfinite(origin)):
            raise ValueError("origin must be finite")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    def world(self, index) -> np.ndarray:
        """World position (mm) of voxel index/indices (last axis of length 3)."""
        idx = np.asarray(index, dtype=float)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def voxel(self, point) -> np.ndarray:
        """Continuous voxel coordinates of world point(s)."""
        p = np.asarray(point, dtype=float)
        return (p - np.asarray(self.origin)) / np.asarray(self.spacing)

    def world_grid(self) -> np.ndarray:
        """World coordinates of every grid point, shape dims + (3,)."""
        axes = [self.origin[a] + np.arange(self.dims[a]) * self.spacing[a] for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "spacing": list(self.spacing), "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "GridGeometry":
        return cls(tuple(d["dims"]), tuple(d["spacing"]), tuple(d["origin"]))


@dataclass(frozen=True, eq=False)
class ScalarGrid:
    geometry: GridGeometry
    values: np.ndarray
    kind: str = INTENSITY

    def __post_init__(self):
        vals = _frozen(self.values, float)
        if vals.shape != self.geometry.dims:
            raise ValueError(f"values shape {vals.shape} != dims {self.geometry.dims}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("grid values must be finite")
        if self.kind not in (INTENSITY, DOSE_GRAY):
            raise ValueError(f"unknown kind {self.kind!r}")
        object.__setattr__(self, "values", vals)

    def with_values(self, values) -> "ScalarGrid":
        return ScalarGrid(self.geometry, values, self.kind)


@dataclass(frozen=True, eq=False)
class LabelMask:
    geometry: GridGeometry
    labels: np.ndarray
    label_names: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.shape != self.geometry.dims:
            raise ValueError(f"labels shape {labels.shape} != dims {self.geometry.dims}")
        if labels.size and (labels.min() < 0 or np.any(labels != np.round(labels))):
            raise ValueError("labels must be non-negative integers")
        labels = _frozen(labels, np.int32)
        names = {int(k): str(v) for k, v in dict(self.label_names).items()}
        present = set(int(v) for v in np.unique(labels)) - {0}
        missing = present - set(names)
        if missing:
            # unnamed labels get a generic name rather than failing
            names.update({m: f"label_{m}" for m in sorted(missing)})
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "label_names", names)

    def binary(self, label: int) -> np.ndarray:
        return self.labels == int(label)

    def label_id(self, name_or_id) -> int:
        if isinstance(name_or_id, (int, np.integer)):
            return int(name_or_id)
        for k, v in self.label_names.items():
            if v == name_or_id:
                return k
        raise KeyError(f"no organ named {name_or_id!r}")


@dataclass(frozen=True, eq=False)
class VectorField:
    geometry: GridGeometry
    vectors: np.ndarray
    convention: str = FORWARD_PUSH

    def __post_init__(self):
        vec = _frozen(self.vectors, float)
        if vec.shape != self.geometry.dims + (3,):
            raise ValueError(f"vectors shape {vec.shape} != dims + (3,)")
        if not np.all(np.isfinite(vec)):
            raise ValueError("vector components must be finite")
        if self.convention not in (FORWARD_PUSH, BACKWARD_PULL):
            raise ValueError(f"unknown convention {self.convention!r}")
        object.__setattr__(self, "vectors", vec)

    @classmethod
    def zeros(cls, geometry: GridGeometry, convention: str = FORWARD_PUSH) -> "VectorField":
        return cls(geometry, np.zeros(geometry.dims + (3,)), convention)

    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.vectors, axis=-1)

    def as_float32(self) -> "VectorField":
        """Round components to float32 precision (the on-disk precision)."""
        return VectorField(self.geometry, self.vectors.astype(np.float32), self.convention)


def run_chunked(fn: Callable[[slice], np.ndarray], n: int, workers: int = 1,
                chunk: int = 1 << 16) -> np.ndarray:
    """Evaluate ``fn`` over index chunks of ``range(n)`` and concatenate.

    Work is purely elementwise per chunk, so the result does not depend on
    ``workers``.
    """
    slices = [slice(s, min(s + chunk, n)) for s in range(0, n, chunk)] or [slice(0, 0)]
    if workers <= 1 or len(slices) == 1:
        parts = [fn(s) for s in slices]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(fn, slices))
    return np.concatenate(parts, axis=0)


def _corner_weights(coords: np.ndarray, dims):
    """Base indices, fractional offsets and inside flags for trilinear lookup."""
    near = np.rint(coords)
    coords = np.where(np.abs(coords - near) < SNAP_EPS, near, coords)
    dims_arr = np.asarray(dims)
    inside = np.all((coords >= 0) & (coords <= dims_arr - 1), axis=-1)
    base = np.floor(coords).astype(np.int64)
    base = np.clip(base, 0, np.maximum(dims_arr - 2, 0))
    frac = coords - base
    # single-voxel axes: frac is 0 and the +1 corner is clamped below
    frac = np.where(dims_arr > 1, frac, 0.0)
    return base, frac, inside


def _trilinear(data: np.ndarray, coords: np.ndarray, background: float = 0.0) -> np.ndarray:
    """Trilinear interpolation of ``data`` (dims or dims+(c,)) at voxel coords (N,3)."""
    dims = data.shape[:3]
    base, frac, inside = _corner_weights(coords, dims)
    trailing = data.shape[3:]
    flat = data.reshape((-1,) + trailing)
    stride = np.array([dims[1] * dims[2], dims[2], 1], dtype=np.int64)
    out = np.zeros((coords.shape[0],) + trailing)
    for c in range(8):
        off = np.array([(c >> 2) & 1, (c >> 1) & 1, c & 1])
        w = np.ones(coords.shape[0])
        for a in range(3):
            w = w * (frac[:, a] if off[a] else 1.0 - frac[:, a])
        idx = np.minimum(base + off, np.asarray(dims) - 1) @ stride
        vals = flat[idx]
        nz = w != 0.0
        if trailing:
            out[nz] += w[nz, None] * vals[nz]
        else:
            out[nz] += w[nz] * vals[nz]
    out[~inside] = background
    return out


def sample_trilinear(grid: ScalarGrid, world_point, background: float = 0.0):
    """Trilinear sample of a scalar grid at world point(s) in mm.

    Points outside the grid's point lattice return ``background``. Accepts a
    single point (returns float) or an (N, 3) array (returns (N,) array).
    """
    pts = np.asarray(world_point, dtype=float)
    single = pts.ndim == 1
    coords = grid.geometry.voxel(pts.reshape(-1, 3))
    out = _trilinear(grid.values, coords, background)
    return float(out[0]) if single else out


def sample_vectors(field: VectorField, world_points, workers: int = 1) -> np.ndarray:
    """Trilinear sample of a vector field at (N, 3) world points; zero outside."""
    pts = np.asarray(world_points, dtype=float).reshape(-1, 3)
    coords = field.geometry.voxel(pts)
    return run_chunked(lambda s: _trilinear(field.vectors, coords[s]), len(coords), workers)


def pull_coordinates(field: VectorField) -> np.ndarray:
    """Voxel coordinates ``index + V/spacing`` of every grid point, shape (N, 3)."""
    geo = field.geometry
    idx = np.stack(np.meshgrid(*[np.arange(d) for d in geo.dims], indexing="ij"), axis=-1)
    return (idx + field.vectors / np.asarray(geo.spacing)).reshape(-1, 3)


def warp_pull(moving: ScalarGrid, field: VectorField, background: float = 0.0,
              workers: int = 1, edge: bool = False) -> ScalarGrid:
    """Resample ``moving`` at ``world(x) + V(x)`` for every point x of the field grid.

    Points beyond the moving grid take ``background``, or with ``edge`` the
    value at the nearest grid point.
    """
    if field.convention != BACKWARD_PULL:
        raise ConventionError("warp_pull needs a backward_pull field")
    fgeo, mgeo = field.geometry, moving.geometry
    if fgeo == mgeo:
        coords = pull_coordinates(field)
    else:
        world = fgeo.world_grid().reshape(-1, 3) + field.vectors.reshape(-1, 3)
        coords = mgeo.voxel(world)
    if edge:
        coords = np.clip(coords, 0.0, np.asarray(mgeo.dims, float) - 1.0)
    out = run_chunked(lambda s: _trilinear(moving.values, coords[s], background), len(coords), workers)
    return ScalarGrid(fgeo, out.reshape(fgeo.dims), moving.kind)


def warp_labels_nearest(mask: LabelMask, field: VectorField) -> LabelMask:
    """Nearest-neighbour pull warp of a label mask (outside the grid -> 0)."""
    if field.convention != BACKWARD_PULL:
        raise ConventionError("mask warping needs a backward_pull field")
    coords = pull_coordinates(field) if field.geometry == mask.geometry else \
        mask.geometry.voxel(field.geometry.world_grid().reshape(-1, 3) + field.vectors.reshape(-1, 3))
    idx = np.rint(coords).astype(np.int64)
    dims = np.asarray(mask.geometry.dims)
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    out = np.zeros(len(idx), dtype=np.int32)
    ii = idx[inside]
    out[inside] = mask.labels[ii[:, 0], ii[:, 1], ii[:, 2]]
    return LabelMask(field.geometry, out.reshape(field.geometry.dims), mask.label_names)
