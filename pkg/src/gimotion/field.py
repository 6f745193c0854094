"""Dense deformation fields from original/deformed tube surfaces.

Shell samples are voxelized at their undeformed positions (per-voxel mean),
holes are filled by iterative 6-neighbour averaging, and the forward field is
inverted numerically for pull-based image warping.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage as ndi

from .grid import (BACKWARD_PULL, FORWARD_PUSH, GridGeometry, ScalarGrid, VectorField,
                   _trilinear, run_chunked)
from .surface import TubeSurface

log = logging.getLogger(__name__)

DEFAULT_N_P = 8


class InversionError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class FieldSamples:
    uvp: np.ndarray         # (N, 3) shell parameters
    positions: np.ndarray   # (N, 3) undeformed positions X, mm
    vectors: np.ndarray     # (N, 3) X' - X, mm

    def __len__(self):
        return len(self.positions)

    @staticmethod
    def concat(parts) -> "FieldSamples":
        parts = list(parts)
        return FieldSamples(*(np.concatenate([getattr(p, k) for p in parts]) for k in
                              ("uvp", "positions", "vectors")))


def shell_grid(n_u: int, n_v: int, n_p: int):
    u = np.linspace(0.0, 1.0, n_u)
    v = np.arange(n_v) / n_v
    p = np.linspace(0.0, 1.0, n_p)
    return u, v, p


def default_counts(surface: TubeSurface, spacing=None):
    """Sample counts: at least (4 sections, 4 rays, 8 shells) per control point/tube.

    With ``spacing`` the counts grow until neighbouring samples are at most
    half the smallest voxel spacing apart, so organ voxels are covered by
    samples instead of by hole filling.
    """
    n_u, n_v, n_p = 4 * surface.n_sections, 4 * surface.n_rays, DEFAULT_N_P
    if spacing is not None:
        h = 0.5 * min(spacing)
        length = float(surface.arclengths[-1] - surface.arclengths[0])
        r_max = float(np.max(np.linalg.norm(surface.control_net - surface.centers[:, None], axis=-1)))
        n_u = max(n_u, math.ceil(length / h) + 1)
        n_v = max(n_v, math.ceil(2 * math.pi * r_max / h))
        n_p = max(n_p, math.ceil(r_max / h) + 1)
    return n_u, n_v, n_p


def _shell_parts(base: TubeSurface, deformed: TubeSurface, u, v):
    if not base.same_topology(deformed):
        raise ValueError("base and deformed surfaces differ in topology")
    outer = base.evaluate_grid(u, v)
    # evaluation is linear in the net, so X' - X comes from the net difference
    d_outer = base.evaluate_grid(u, v, deformed.control_net - base.control_net)
    Bu = base.basis_u(u)
    center = Bu @ base.centers
    d_center = Bu @ (deformed.centers - base.centers)
    return outer, d_outer, center[:, None, :], d_center[:, None, :]


def sample_correspondences(base: TubeSurface, deformed: TubeSurface, n_u=None, n_v=None,
                           n_p=None) -> FieldSamples:
    """Shell points X(u, v, p) of ``base`` and their displacements X' - X."""
    d_u, d_v, d_p = default_counts(base)
    u, v, p = shell_grid(n_u or d_u, n_v or d_v, n_p or d_p)
    outer, d_outer, center, d_center = _shell_parts(base, deformed, u, v)
    q = p[:, None, None, None]
    X = (1.0 - q) * outer[None] + q * center[None]
    V = (1.0 - q) * d_outer[None] + q * d_center[None]
    P, U, W = np.meshgrid(p, u, v, indexing="ij")
    uvp = np.stack([U, W, P], axis=-1).reshape(-1, 3)
    return FieldSamples(uvp, X.reshape(-1, 3), V.reshape(-1, 3))


class _Accumulator:
    """Per-voxel running vector sums and sample counts."""

    def __init__(self, geometry: GridGeometry):
        self.geometry = geometry
        self.count = np.zeros(geometry.n_voxels, np.int64)
        self.sums = np.zeros((geometry.n_voxels, 3))

    def add(self, positions, vectors):
        idx = np.rint(self.geometry.voxel(positions)).astype(np.int64)
        ok = np.all((idx >= 0) & (idx < np.asarray(self.geometry.dims)), axis=1)
        if not ok.any():
            return
        lin = np.ravel_multi_index(idx[ok].T, self.geometry.dims)
        vec = vectors[ok]
        order = np.argsort(lin, kind="stable")
        lin, vec = lin[order], vec[order]
        n = self.geometry.n_voxels
        self.count += np.bincount(lin, minlength=n)
        for c in range(3):
            self.sums[:, c] += np.bincount(lin, weights=vec[:, c], minlength=n)

    def result(self):
        covered = self.count > 0
        out = np.zeros((self.geometry.n_voxels, 3))
        out[covered] = self.sums[covered] / self.count[covered, None]
        dims = self.geometry.dims
        return VectorField(self.geometry, out.reshape(dims + (3,)), FORWARD_PUSH), covered.reshape(dims)


def voxelize(samples: FieldSamples, geometry: GridGeometry):
    """Average samples into the voxel nearest their undeformed position.

    Returns the forward_push field and a boolean coverage mask.
    """
    acc = _Accumulator(geometry)
    acc.add(samples.positions, samples.vectors)
    return acc.result()


def voxelize_surfaces(pairs, geometry: GridGeometry, counts=None):
    """Sample and voxelize (base, deformed) surface pairs shell by shell.

    Equivalent to ``voxelize`` on the concatenated samples but never holds
    more than one shell in memory. ``counts`` maps a base surface to
    (n_u, n_v, n_p); by default the spacing-aware ``default_counts`` is used.
    """
    acc = _Accumulator(geometry)
    for base, deformed in pairs:
        n_u, n_v, n_p = (counts or (lambda s: default_counts(s, geometry.spacing)))(base)
        u, v, p = shell_grid(n_u, n_v, n_p)
        outer, d_outer, center, d_center = _shell_parts(base, deformed, u, v)
        for q in p:
            X = (1.0 - q) * outer + q * center
            V = (1.0 - q) * d_outer + q * d_center
            acc.add(X.reshape(-1, 3), V.reshape(-1, 3))
    return acc.result()


def dilate_region(binary: np.ndarray, geometry: GridGeometry, margin_mm: float) -> np.ndarray:
    """Voxels within ``margin_mm`` (Euclidean, physical units) of ``binary``."""
    if not binary.any():
        return np.zeros_like(binary, bool)
    dist = ndi.distance_transform_edt(~binary, sampling=geometry.spacing)
    return dist <= margin_mm + 1e-9


_OFFS = np.array([[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]], np.int64)


@numba.njit(cache=True)
def _jacobi_fill(vals, filled, region, max_sweeps):
    # Frontier form of the sweep loop: each sweep reads only voxels filled before it.
    nx, ny, nz = filled.shape
    cap = int(region.sum())
    front = np.empty((cap, 3), np.int64)
    nxt = np.empty((cap, 3), np.int64)
    mark = np.zeros(filled.shape, np.bool_)
    nf = 0
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                if not region[x, y, z] or filled[x, y, z]:
                    continue
                for k in range(6):
                    a, b, c = x + _OFFS[k, 0], y + _OFFS[k, 1], z + _OFFS[k, 2]
                    if 0 <= a < nx and 0 <= b < ny and 0 <= c < nz and filled[a, b, c]:
                        front[nf, 0], front[nf, 1], front[nf, 2] = x, y, z
                        mark[x, y, z] = True
                        nf += 1
                        break
    newv = np.empty((cap, 3))
    sweeps = 0
    while nf > 0 and sweeps < max_sweeps:
        for i in range(nf):
            x, y, z = front[i, 0], front[i, 1], front[i, 2]
            t0 = 0.0
            t1 = 0.0
            t2 = 0.0
            n = 0
            for k in range(6):
                a, b, c = x + _OFFS[k, 0], y + _OFFS[k, 1], z + _OFFS[k, 2]
                if 0 <= a < nx and 0 <= b < ny and 0 <= c < nz and filled[a, b, c]:
                    t0 += vals[a, b, c, 0]
                    t1 += vals[a, b, c, 1]
                    t2 += vals[a, b, c, 2]
                    n += 1
            newv[i, 0], newv[i, 1], newv[i, 2] = t0 / n, t1 / n, t2 / n
        for i in range(nf):
            x, y, z = front[i, 0], front[i, 1], front[i, 2]
            vals[x, y, z, 0], vals[x, y, z, 1], vals[x, y, z, 2] = newv[i, 0], newv[i, 1], newv[i, 2]
            filled[x, y, z] = True
        sweeps += 1
        nn = 0
        for i in range(nf):
            x, y, z = front[i, 0], front[i, 1], front[i, 2]
            for k in range(6):
                a, b, c = x + _OFFS[k, 0], y + _OFFS[k, 1], z + _OFFS[k, 2]
                if 0 <= a < nx and 0 <= b < ny and 0 <= c < nz and region[a, b, c] \
                        and not filled[a, b, c] and not mark[a, b, c]:
                    mark[a, b, c] = True
                    nxt[nn, 0], nxt[nn, 1], nxt[nn, 2] = a, b, c
                    nn += 1
        front, nxt = nxt, front
        nf = nn
    return sweeps



@dataclass(frozen=True)
class FillReport:
    sweeps: int
    unreached: int


def fill_smooth(field: VectorField, coverage: np.ndarray, region: np.ndarray, sigma: float = 1.0,
                max_sweeps: int = 200, core: np.ndarray | None = None,
                falloff_mm: float | None = None):
    """Fill uncovered region voxels from their neighbours, then smooth.

    Each Jacobi sweep sets every unfilled region voxel that touches filled
    voxels (6-neighbourhood) to their mean. With ``core`` and ``falloff_mm``,
    filled voxels outside ``core`` are scaled by ``max(0, 1 - d / falloff_mm)``
    where d is their distance (mm) to ``core``. A Gaussian pass (sigma in
    voxels) restricted to the region follows; covered voxels are then restored
    and everything outside the region is exactly zero.
    """
    region = np.asarray(region, bool)
    seeds = np.asarray(coverage, bool) & region
    filled = seeds.copy()
    vals = np.where(seeds[..., None], field.vectors, 0.0)
    sweeps = _jacobi_fill(vals, filled, region, max_sweeps)
    unreached = int((region & ~filled).sum())
    if unreached:
        log.warning("fill left %d region voxels unreached after %d sweeps", unreached, sweeps)
    if core is not None and falloff_mm:
        dist = ndi.distance_transform_edt(~np.asarray(core, bool), sampling=field.geometry.spacing)
        scale = np.clip(1.0 - dist / falloff_mm, 0.0, 1.0)
        vals = np.where(seeds[..., None], vals, vals * scale[..., None])
    if sigma > 0:
        w = ndi.gaussian_filter(region.astype(float), sigma, mode="constant")
        out = np.empty_like(vals)
        for c in range(3):
            num = ndi.gaussian_filter(vals[..., c] * region, sigma, mode="constant")
            out[..., c] = np.divide(num, w, out=np.zeros_like(num), where=region & (w > 0))
        vals = np.where(seeds[..., None], vals, out)
    vals[~region] = 0.0
    return VectorField(field.geometry, vals, field.convention), FillReport(sweeps, unreached)


def jacobian_determinant(field: VectorField) -> np.ndarray:
    """det(I + grad V) with spacing-aware central differences (one-sided at borders)."""
    sp = field.geometry.spacing
    V = field.vectors
    G = np.empty(field.geometry.dims + (3, 3))
    for c in range(3):
        for a in range(3):
            G[..., c, a] = (np.gradient(V[..., c], sp[a], axis=a)
                            if field.geometry.dims[a] > 1 else 0.0)
    G += np.eye(3)
    return np.linalg.det(G)


@dataclass(frozen=True)
class JacobianStats:
    mean: float
    sd: float
    foldings: int
    n_voxels: int

    def to_json(self) -> dict:
        return {"mean": self.mean, "sd": self.sd, "foldings": self.foldings, "n_voxels": self.n_voxels}


def jacobian_log(field: VectorField, mask: np.ndarray | None = None):
    """log det(I + grad V) as a grid (0 where J <= 0) plus stats over ``mask``."""
    J = jacobian_determinant(field)
    ok = J > 0
    logj = np.zeros_like(J)
    logj[ok] = np.log(J[ok])
    sel = np.ones(J.shape, bool) if mask is None else np.asarray(mask, bool)
    folds = int((sel & ~ok).sum())
    vals = logj[sel & ok]
    mean = float(vals.mean()) if vals.size else 0.0
    sd = float(vals.std()) if vals.size else 0.0
    return ScalarGrid(field.geometry, logj), JacobianStats(mean, sd, folds, int(sel.sum()))


@dataclass(frozen=True)
class InversionReport:
    iterations: int
    max_residual: float
    mean_residual: float
    frac_above_tol: float
    n_active: int

    def to_json(self) -> dict:
        return {"iterations": self.iterations, "max_residual_mm": self.max_residual,
                "mean_residual_mm": self.mean_residual, "frac_above_tol": self.frac_above_tol,
                "n_active": self.n_active}


def gradient_tensor(field: VectorField) -> np.ndarray:
    """Spacing-aware dV_c/dx_a as a dims+(3, 3) array (zero along singleton axes)."""
    sp = field.geometry.spacing
    G = np.zeros(field.geometry.dims + (3, 3))
    for c in range(3):
        for a in range(3):
            if field.geometry.dims[a] > 1:
                G[..., c, a] = np.gradient(field.vectors[..., c], sp[a], axis=a)
    return G


def invert(field: VectorField, max_iter: int = 30, tol_mm: float = 0.01,
           fail_mm: float = 0.5, fail_frac: float = 0.01, workers: int = 1):
    """Inverse ``w(y) = -V(y + w(y))`` of a forward_push field.

    Iterates on ``w + V(y + w) = 0``: a Newton step using the interpolated
    displacement gradient, halved up to four times while it fails to reduce
    the residual, with the plain fixed-point update ``w <- -V(y + w)`` where
    the local Jacobian is nearly singular. A voxel stops once its update is
    below ``tol_mm``. Lookups beyond the grid use edge values. Only voxels
    the displacement support can reach are iterated; elsewhere the inverse
    is exactly zero.
    """
    if field.convention != FORWARD_PUSH:
        raise ValueError("invert expects a forward_push field")
    geo = field.geometry
    sp = np.asarray(geo.spacing)
    hi = np.asarray(geo.dims, float) - 1.0
    mag = field.magnitude()
    vmax = float(mag.max())
    out = np.zeros(geo.dims + (3,))
    if vmax == 0.0:
        return VectorField(geo, out, BACKWARD_PULL), InversionReport(0, 0.0, 0.0, 0.0, 0)
    grad = gradient_tensor(field)
    active = dilate_region(mag > 0, geo, vmax + float(sp.max()))
    idx = np.argwhere(active)
    base = idx.astype(float)
    stacked = np.concatenate([field.vectors, grad.reshape(geo.dims + (9,))], axis=-1)

    def lookup(sel, w, with_grad):
        coords = np.clip(base[sel] + w / sp, 0.0, hi)
        data = stacked if with_grad else field.vectors
        vals = run_chunked(lambda s: _trilinear(data, coords[s]), len(coords), workers)
        if with_grad:
            return vals[:, :3], vals[:, 3:].reshape(-1, 3, 3)
        return vals

    w = np.zeros((len(idx), 3))
    todo = np.arange(len(idx))
    it = 0
    for it in range(1, max_iter + 1):
        wt = w[todo]
        V, G = lookup(todo, wt, True)
        r = wt + V
        J = G + np.eye(3)
        step = r.copy()
        ok = np.linalg.det(J) > 0.1
        if ok.any():
            step[ok] = np.linalg.solve(J[ok], r[ok][..., None])[..., 0]
        r0 = np.linalg.norm(r, axis=1)
        for _ in range(4):
            cand = wt - step
            worse = np.linalg.norm(cand + lookup(todo, cand, False), axis=1) > r0
            if not worse.any():
                break
            step[worse] *= 0.5
        w[todo] = wt - step
        todo = todo[np.abs(step).max(axis=1) >= tol_mm]
        if len(todo) == 0:
            break
    resid = np.linalg.norm(w + lookup(slice(None), w, False), axis=1)
    frac = float((resid > fail_mm).mean())
    report = InversionReport(it, float(resid.max()), float(resid.mean()), frac, len(idx))
    if frac > fail_frac:
        raise InversionError(f"inversion did not converge: {frac:.2%} of voxels exceed {fail_mm} mm")
    out[tuple(idx.T)] = w
    return VectorField(geo, out, BACKWARD_PULL), report
