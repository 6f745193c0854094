"""Scoring of candidate deformation fields: TRE, DSC, HD95, dose, DWE and binned RMSE."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage as ndi

from .grid import (BACKWARD_PULL, DOSE_GRAY, FORWARD_PUSH, ConventionError, ScalarGrid,
                   VectorField, _trilinear, pull_coordinates, run_chunked, sample_vectors)


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """Shell sample points (mm, static frame) with their (u, v, p) and organ label."""
    points: np.ndarray
    uvp: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        n = len(self.points)
        if self.uvp.shape != (n, 3) or self.labels.shape != (n,):
            raise ValueError("points, uvp and labels must have matching lengths")

    def __len__(self):
        return len(self.points)

    def subset(self, stride: int) -> "KeypointSet":
        return KeypointSet(self.points[::stride], self.uvp[::stride], self.labels[::stride])

    @staticmethod
    def concat(parts) -> "KeypointSet":
        parts = list(parts)
        if not parts:
            return KeypointSet(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, np.int64))
        return KeypointSet(np.concatenate([p.points for p in parts]),
                           np.concatenate([p.uvp for p in parts]),
                           np.concatenate([p.labels for p in parts]))

    def to_json(self) -> dict:
        return {"points": self.points.tolist(), "uvp": self.uvp.tolist(),
                "labels": self.labels.tolist()}

    @classmethod
    def from_json(cls, d) -> "KeypointSet":
        return cls(np.asarray(d["points"], float).reshape(-1, 3),
                   np.asarray(d["uvp"], float).reshape(-1, 3),
                   np.asarray(d["labels"], np.int64))


def keypoints_from_surface(surface, label: int, n_u=None, n_v=None, n_p=None) -> KeypointSet:
    """Shell points of a ground-truth surface, on the same grid the field sampler uses."""
    from .field import sample_correspondences
    s = sample_correspondences(surface, surface, n_u, n_v, n_p)
    return KeypointSet(s.positions, s.uvp, np.full(len(s), label, np.int64))


@dataclass(frozen=True)
class Summary:
    mean: float
    sd: float
    max: float
    n: int

    @classmethod
    def of(cls, x) -> "Summary":
        x = np.asarray(x, float)
        if x.size == 0:
            raise ValueError("no values to summarize")
        return cls(float(x.mean()), float(x.std()), float(x.max()), int(x.size))


def _inside_world(geometry, pts) -> np.ndarray:
    v = geometry.voxel(pts)
    return np.all((v >= -1e-9) & (v <= np.asarray(geometry.dims) - 1 + 1e-9), axis=1)


def tre_values(keys: KeypointSet, gt_forward: VectorField, cand_pull: VectorField,
               workers: int = 1) -> np.ndarray:
    """Per-keypoint |q + u(q) - p| with q = p + V_gt(p)."""
    if gt_forward.convention != FORWARD_PUSH:
        raise ConventionError("ground truth must be forward_push")
    if cand_pull.convention != BACKWARD_PULL:
        raise ConventionError("candidate must be backward_pull")
    p = keys.points
    out = ~_inside_world(gt_forward.geometry, p) & ~_inside_world(cand_pull.geometry, p)
    if out.any():
        raise ValueError(f"{int(out.sum())} keypoints lie outside both field grids")
    q = p + sample_vectors(gt_forward, p, workers)
    return np.linalg.norm(q + sample_vectors(cand_pull, q, workers) - p, axis=1)


def tre(keys: KeypointSet, gt_forward: VectorField, cand_pull: VectorField,
        workers: int = 1) -> dict:
    """TRE summary per organ label."""
    err = tre_values(keys, gt_forward, cand_pull, workers)
    return {int(l): Summary.of(err[keys.labels == l]) for l in np.unique(keys.labels)}


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")


def dsc(a: np.ndarray, b: np.ndarray) -> float:
    """Dice coefficient; 1.0 when both masks are empty."""
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    _same_shape(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a background face neighbour (outside the grid counts)."""
    m = np.asarray(mask, bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = ndi.binary_erosion(padded, structure=ndi.generate_binary_structure(3, 1),
                                  border_value=0)[1:-1, 1:-1, 1:-1]
    return m & ~interior


def _directed(src_b, dst_b, spacing) -> np.ndarray:
    dist = ndi.distance_transform_edt(~dst_b, sampling=spacing)
    return dist[src_b]


def nearest_rank(values, q: float) -> float:
    v = np.sort(np.asarray(values, float))
    k = max(int(math.ceil(q / 100.0 * v.size)), 1) - 1
    return float(v[k])


def hd95(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric 95th-percentile surface distance in mm (nearest-rank)."""
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    _same_shape(a, b)
    if not a.any() or not b.any():
        raise ValueError("hd95 needs two non-empty masks")
    ba, bb = boundary(a), boundary(b)
    return max(nearest_rank(_directed(ba, bb, spacing), 95),
               nearest_rank(_directed(bb, ba, spacing), 95))


def displacement_stats(field: VectorField, mask: np.ndarray) -> Summary:
    m = np.asarray(mask, bool)
    if not m.any():
        raise ValueError("empty mask")
    return Summary.of(field.magnitude()[m])


def accumulate_dose(dose: ScalarGrid, pull_fields, workers: int = 1) -> ScalarGrid:
    """Direct dose mapping: sum over phases of the planning dose at pulled positions."""
    if dose.kind != DOSE_GRAY:
        raise ValueError(f"dose grid has kind {dose.kind!r}, expected {DOSE_GRAY!r}")
    total = np.zeros(dose.geometry.dims)
    for f in pull_fields:
        if f.convention != BACKWARD_PULL:
            raise ConventionError("dose accumulation needs backward_pull fields")
        if f.geometry != dose.geometry:
            raise ValueError("dose and field geometries differ")
        coords = pull_coordinates(f).reshape(-1, 3)
        vals = run_chunked(lambda s: _trilinear(dose.values, coords[s]), len(coords), workers)
        total += vals.reshape(dose.geometry.dims)
    return ScalarGrid(dose.geometry, total, DOSE_GRAY)


def dwe(accum_dir: ScalarGrid, accum_gt: ScalarGrid, mask: np.ndarray, dose_floor: float = 0.5,
        signed: bool = False) -> float:
    """Mean relative accumulated-dose difference (percent) over mask voxels above the floor."""
    if accum_dir.geometry != accum_gt.geometry:
        raise ValueError("accumulation geometries differ")
    gt = accum_gt.values
    sel = np.asarray(mask, bool) & (gt >= dose_floor)
    if not sel.any():
        raise ValueError(f"no mask voxels with accumulated dose >= {dose_floor} Gy")
    diff = accum_dir.values[sel] - gt[sel]
    if not signed:
        diff = np.abs(diff)
    return float(np.mean(diff / gt[sel]) * 100.0)


def error_map(cand_pull: VectorField, gt_pull: VectorField) -> ScalarGrid:
    """Per-voxel |u_cand - u_gt| (mm)."""
    if cand_pull.convention != BACKWARD_PULL or gt_pull.convention != BACKWARD_PULL:
        raise ConventionError("error map compares two backward_pull fields")
    if cand_pull.geometry != gt_pull.geometry:
        raise ValueError("field geometries differ")
    return ScalarGrid(gt_pull.geometry, np.linalg.norm(cand_pull.vectors - gt_pull.vectors, axis=-1))


def default_edges(values, step: float) -> list:
    top = max(step * math.ceil(float(np.max(values)) / step), step) if np.size(values) else step
    return [float(x) for x in np.arange(0.0, top + step / 2, step)]


@dataclass(frozen=True)
class BinRow:
    bin_lo: float
    bin_hi: float
    count: int
    rmse_mm: float | None


def rmse_binned(err: ScalarGrid, binning: ScalarGrid, edges=None, step: float = 1.0,
                mask: np.ndarray | None = None) -> list[BinRow]:
    """RMSE of ``err`` per bin of ``binning``; bins are [lo, hi) except the last, which is closed."""
    if err.geometry != binning.geometry:
        raise ValueError("error and binning geometries differ")
    sel = np.ones(err.geometry.dims, bool) if mask is None else np.asarray(mask, bool)
    e = err.values[sel]
    b = binning.values[sel]
    edges = default_edges(b, step) if edges is None else [float(x) for x in edges]
    if len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("edges must be strictly increasing with at least two entries")
    rows = []
    for i, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        last = i == len(edges) - 2
        m = (b >= lo) & ((b <= hi) if last else (b < hi))
        n = int(m.sum())
        rows.append(BinRow(lo, hi, n, float(np.sqrt(np.mean(e[m] ** 2))) if n else None))
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", "count", "rmse_mm"])
    for r in rows:
        w.writerow([repr(r.bin_lo), repr(r.bin_hi), r.count, "" if r.rmse_mm is None else repr(r.rmse_mm)])
    return buf.getvalue()


@dataclass
class OrganMetrics:
    tre: Summary | None = None
    dsc: float | None = None
    hd95: float | None = None
    displacement: Summary | None = None
    log_jacobian_mean: float | None = None
    log_jacobian_sd: float | None = None
    foldings: int | None = None
    dwe_percent: float | None = None


@dataclass
class MetricReport:
    organs: dict = field(default_factory=dict)          # name -> {method -> OrganMetrics}
    ground_truth: dict = field(default_factory=dict)    # name -> OrganMetrics
    body_displacement: Summary | None = None
    tables: dict = field(default_factory=dict)          # table name -> list[BinRow]
    phases: dict = field(default_factory=dict)          # name -> per-phase GT statistics

    def to_json(self) -> dict:
        def conv(x):
            if isinstance(x, (Summary, OrganMetrics, BinRow)):
                return {k: conv(v) for k, v in asdict(x).items()}
            if isinstance(x, dict):
                return {str(k): conv(v) for k, v in x.items()}
            if isinstance(x, (list, tuple)):
                return [conv(v) for v in x]
            return x
        return {"organs": conv(self.organs), "ground_truth": conv(self.ground_truth),
                "body_displacement": conv(self.body_displacement), "tables": conv(self.tables),
                "phases": conv(self.phases)}
