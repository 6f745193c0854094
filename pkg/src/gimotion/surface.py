"""NURBS tube surfaces around organ centerlines.

A tube is a net of control points ``P[i, j]``: section ``i`` along the
centerline (clamped knots in u) and ray ``j`` around it (periodic knots in v).
Section centers form the control polygon of the centerline curve C(u), which
shares the u basis, so inner shells ``(1 - p) S(u, v) + p C(u)`` are themselves
NURBS surfaces with interpolated control nets.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .grid import LabelMask
from .skeleton import Centerline, parallel_transport_frames, _arclength

log = logging.getLogger(__name__)


# -- B-spline machinery -----------------------------------------------------

def clamped_uniform_knots(n_ctrl: int, degree: int) -> np.ndarray:
    n_inner = n_ctrl - degree - 1
    inner = np.arange(1, n_inner + 1) / (n_inner + 1)
    return np.concatenate([np.zeros(degree + 1), inner, np.ones(degree + 1)])


def periodic_uniform_knots(n_ctrl: int, degree: int) -> np.ndarray:
    """Unclamped uniform knots for ``n_ctrl`` periodic control points (domain [0, 1])."""
    return (np.arange(n_ctrl + 2 * degree + 1) - degree) / n_ctrl


def basis_matrix(knots: np.ndarray, degree: int, n_ctrl: int, x) -> np.ndarray:
    """Dense B-spline basis values, shape (len(x), n_ctrl), by Cox-de Boor.

    ``x`` must lie inside the knot domain ``[knots[degree], knots[n_ctrl]]``;
    the right end is included by evaluating it in the last non-empty span.
    """
    x = np.atleast_1d(np.asarray(x, float))
    lo, hi = knots[degree], knots[n_ctrl]
    x = np.clip(x, lo, hi)
    span = np.searchsorted(knots, x, side="right") - 1
    span = np.clip(span, degree, n_ctrl - 1)
    m = len(x)
    N = np.zeros((m, degree + 1))
    N[:, 0] = 1.0
    left = np.zeros((m, degree + 1))
    right = np.zeros((m, degree + 1))
    for j in range(1, degree + 1):
        left[:, j] = x - knots[span + 1 - j]
        right[:, j] = knots[span + j] - x
        saved = np.zeros(m)
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            temp = np.divide(N[:, r], denom, out=np.zeros(m), where=denom != 0)
            N[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        N[:, j] = saved
    out = np.zeros((m, n_ctrl))
    rows = np.arange(m)
    for r in range(degree + 1):
        out[rows, span - degree + r] = N[:, r]
    return out


def periodic_basis_matrix(n_ctrl: int, degree: int, v) -> np.ndarray:
    """Basis for a closed curve: v in [0, 1) wraps; control j sits at v = j / n_ctrl."""
    v = np.atleast_1d(np.asarray(v, float)) % 1.0
    knots = periodic_uniform_knots(n_ctrl, degree)
    wide = basis_matrix(knots, degree, n_ctrl + degree, v)
    shift = degree // 2
    out = np.zeros((len(v), n_ctrl))
    for col in range(n_ctrl + degree):
        out[:, (col - shift) % n_ctrl] += wide[:, col]
    return out


# -- data types -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SectionalCurve:
    index: int
    arclength: float
    center: np.ndarray            # (3,)
    control_points: np.ndarray    # (n_rays, 3)
    radial_dirs: np.ndarray       # (n_rays, 3), unit
    truncated: np.ndarray | None = None   # per-ray flag: ray left the grid inside the organ
    degenerate: bool = False

    @property
    def radii(self) -> np.ndarray:
        return np.einsum("ij,ij->i", self.control_points - self.center, self.radial_dirs)

    def with_points(self, points) -> "SectionalCurve":
        return replace(self, control_points=np.asarray(points, float))


@dataclass(frozen=True, eq=False)
class TubeSurface:
    sections: tuple
    degree_u: int = 3
    degree_v: int = 3
    knots_u: np.ndarray = None
    knots_v: np.ndarray = None
    weights: np.ndarray = None

    def __post_init__(self):
        n_sec, n_rays = self.n_sections, self.n_rays
        if self.knots_u is None:
            object.__setattr__(self, "knots_u", clamped_uniform_knots(n_sec, self.degree_u))
        if self.knots_v is None:
            object.__setattr__(self, "knots_v", periodic_uniform_knots(n_rays, self.degree_v))
        if self.weights is None:
            object.__setattr__(self, "weights", np.ones((n_sec, n_rays)))

    @property
    def n_sections(self) -> int:
        return len(self.sections)

    @property
    def n_rays(self) -> int:
        return len(self.sections[0].control_points)

    @property
    def control_net(self) -> np.ndarray:
        return np.stack([s.control_points for s in self.sections])

    @property
    def centers(self) -> np.ndarray:
        return np.stack([s.center for s in self.sections])

    @property
    def radial_dirs(self) -> np.ndarray:
        return np.stack([s.radial_dirs for s in self.sections])

    @property
    def arclengths(self) -> np.ndarray:
        return np.array([s.arclength for s in self.sections])

    def with_control_net(self, net) -> "TubeSurface":
        net = np.asarray(net, float)
        secs = tuple(s.with_points(net[i]) for i, s in enumerate(self.sections))
        return replace(self, sections=secs)

    def translated(self, offset) -> "TubeSurface":
        off = np.asarray(offset, float)
        secs = tuple(replace(s, center=s.center + off, control_points=s.control_points + off)
                     for s in self.sections)
        return replace(self, sections=secs)

    def same_topology(self, other: "TubeSurface") -> bool:
        return (self.n_sections == other.n_sections and self.n_rays == other.n_rays
                and self.degree_u == other.degree_u and self.degree_v == other.degree_v
                and np.array_equal(self.knots_u, other.knots_u)
                and np.array_equal(self.knots_v, other.knots_v)
                and np.array_equal(self.weights, other.weights))

    # evaluation -----------------------------------------------------------
    def basis_u(self, u) -> np.ndarray:
        return basis_matrix(self.knots_u, self.degree_u, self.n_sections, u)

    def basis_v(self, v) -> np.ndarray:
        return periodic_basis_matrix(self.n_rays, self.degree_v, v)

    def rational_grid(self, u, v) -> np.ndarray:
        """Rational basis R[a, b, i, j] on the (u, v) tensor grid."""
        Bu, Bv = self.basis_u(u), self.basis_v(v)
        R = np.einsum("ai,bj,ij->abij", Bu, Bv, self.weights)
        return R / R.sum(axis=(2, 3), keepdims=True)

    def evaluate_grid(self, u, v, net=None) -> np.ndarray:
        """Surface points on the (u, v) tensor grid, shape (len(u), len(v), 3)."""
        net = self.control_net if net is None else net
        Bu, Bv = self.basis_u(u), self.basis_v(v)
        num = np.einsum("ai,ijc,bj->abc", Bu, self.weights[..., None] * net, Bv, optimize=True)
        den = Bu @ self.weights @ Bv.T
        return num / den[..., None]

    def centerline_points(self, u, centers=None) -> np.ndarray:
        centers = self.centers if centers is None else centers
        return self.basis_u(u) @ centers

    def to_dict(self) -> dict:
        return {
            "degree_u": self.degree_u, "degree_v": self.degree_v,
            "knots_u": self.knots_u.tolist(), "knots_v": self.knots_v.tolist(),
            "weights": self.weights.tolist(),
            "sections": [{
                "index": s.index, "arclength_mm": s.arclength, "center": s.center.tolist(),
                "control_points": s.control_points.tolist(), "radial_dirs": s.radial_dirs.tolist(),
                "truncated": None if s.truncated is None else s.truncated.tolist(),
                "degenerate": s.degenerate,
            } for s in self.sections],
        }

    @classmethod
    def from_dict(cls, d) -> "TubeSurface":
        secs = tuple(SectionalCurve(
            s["index"], float(s["arclength_mm"]), np.asarray(s["center"], float),
            np.asarray(s["control_points"], float), np.asarray(s["radial_dirs"], float),
            None if s.get("truncated") is None else np.asarray(s["truncated"], bool),
            bool(s.get("degenerate", False))) for s in d["sections"])
        return cls(secs, d["degree_u"], d["degree_v"], np.asarray(d["knots_u"], float),
                   np.asarray(d["knots_v"], float), np.asarray(d["weights"], float))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def evaluate(surface: TubeSurface, u: float, v: float) -> np.ndarray:
    return surface.evaluate_grid([u], [v])[0, 0]


def eval_shell(surface: TubeSurface, u: float, v: float, p: float) -> np.ndarray:
    """Point on the inner shell p (0 = outer surface, 1 = centerline)."""
    outer = evaluate(surface, u, v)
    center = surface.centerline_points([u])[0]
    return (1.0 - p) * outer + p * center


# -- construction from masks -----------------------------------------------

def default_n_sections(arclength_mm: float) -> int:
    return max(12, math.ceil(arclength_mm / 5.0))


def resample_centerline(c: Centerline, n_sections: int) -> Centerline:
    """Resample to ``n_sections`` points uniformly spaced in arc length."""
    if n_sections < 4:
        raise ValueError("need at least 4 sections")
    total = c.length
    if not total > 0:
        raise ValueError("degenerate (zero-length) centerline")
    s = c.cumulative_arclength
    targets = np.linspace(0.0, total, n_sections)
    targets[-1] = total
    pts = np.stack([np.interp(targets, s, c.points[:, a]) for a in range(3)], axis=1)
    T, N, B = parallel_transport_frames(pts)
    return Centerline(pts, _arclength(pts), T, N, B)


def _nearest_inside(binary: np.ndarray, coords: np.ndarray) -> np.ndarray:
    idx = np.rint(coords).astype(np.int64)
    dims = np.asarray(binary.shape)
    ok = np.all((idx >= 0) & (idx < dims), axis=-1)
    out = np.zeros(idx.shape[:-1], bool)
    ii = idx[ok]
    out[ok] = binary[ii[..., 0], ii[..., 1], ii[..., 2]]
    return out, ok


def cast_sections(mask: LabelMask, label: int, c: Centerline, n_rays: int = 16,
                  tol_mm: float = 0.05) -> list[SectionalCurve]:
    """Cast ``n_rays`` rays per centerline point in its normal plane to the organ boundary."""
    geo = mask.geometry
    binary = mask.binary(label)
    step = 0.25 * min(geo.spacing)
    extent = float(np.linalg.norm(np.asarray(geo.dims) * np.asarray(geo.spacing)))
    s = np.arange(1, int(extent / step) + 2) * step
    theta = 2 * np.pi * np.arange(n_rays) / n_rays
    sections = []
    for i, (pt, nrm, bnm) in enumerate(zip(c.points, c.normals, c.binormals)):
        inside, _ = _nearest_inside(binary, geo.voxel(pt)[None])
        if not inside[0]:
            log.warning("centerline point %d lies outside the organ mask; section dropped", i)
            continue
        dirs = np.cos(theta)[:, None] * nrm + np.sin(theta)[:, None] * bnm
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pos = pt + s[None, :, None] * dirs[:, None, :]
        ins, in_grid = _nearest_inside(binary, geo.voxel(pos))
        # first sample that is background (or off-grid)
        first_out = np.argmax(~ins, axis=1)
        truncated = ~in_grid[np.arange(n_rays), first_out]
        hi = s[first_out]
        lo = np.where(first_out > 0, s[np.maximum(first_out - 1, 0)], 0.0)
        while np.any(hi - lo > tol_mm):
            mid = 0.5 * (lo + hi)
            m_in, _ = _nearest_inside(binary, geo.voxel(pt + mid[:, None] * dirs))
            lo = np.where(m_in, mid, lo)
            hi = np.where(m_in, hi, mid)
        r = 0.5 * (lo + hi)
        degenerate = bool(np.any(r <= min(geo.spacing)))
        if truncated.any():
            log.warning("section %d: %d rays left the grid inside the organ", i, int(truncated.sum()))
        sections.append(SectionalCurve(i, float(c.cumulative_arclength[i]), np.array(pt, float),
                                       pt + r[:, None] * dirs, dirs, truncated, degenerate))
    return sections


def fit_surface(sections, degree_u: int = 3, degree_v: int = 3) -> TubeSurface:
    """Tube surface using the cast boundary points directly as its control net."""
    sections = tuple(sections)
    if len(sections) < max(4, degree_u + 1):
        raise ValueError(f"need at least {max(4, degree_u + 1)} sections, got {len(sections)}")
    counts = {len(s.control_points) for s in sections}
    if len(counts) != 1:
        raise ValueError(f"inconsistent ray counts across sections: {sorted(counts)}")
    if counts.pop() < degree_v + 1:
        raise ValueError("too few rays for the circumferential degree")
    return TubeSurface(sections, degree_u, degree_v)


def circle_shrink_factor(n_rays: int, degree: int = 3, samples: int = 2048) -> float:
    """Minimum radius of the periodic B-spline through a unit regular n-gon control polygon."""
    ang = 2 * np.pi * np.arange(n_rays) / n_rays
    poly = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    curve = periodic_basis_matrix(n_rays, degree, np.arange(samples) / samples) @ poly
    return float(np.linalg.norm(curve, axis=1).min())
