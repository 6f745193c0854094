"""Built-in intensity-based registration: Horn-Schunck optical flow and demons.

Both solvers work on intensities rescaled to [0, 1], in voxel units on a
x2 image pyramid, and return a backward_pull field in mm such that
``warp_pull(moving, u)`` approximates ``fixed``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage as ndi

from .grid import BACKWARD_PULL, ScalarGrid, VectorField


@dataclass(frozen=True)
class RegParams:
    levels: int = 3
    iterations: int = 200
    hs_alpha: float = 0.1
    demons_sigma_fluid: float = 1.0
    demons_sigma_diffusion: float = 1.0
    step_cap_vox: float = 2.0
    tol_vox: float = 1e-3
    diffeomorphic: bool = False
    squarings: int = 7

    def __post_init__(self):
        if self.levels < 1 or self.iterations < 1:
            raise ValueError("levels and iterations must be >= 1")
        if min(self.demons_sigma_fluid, self.demons_sigma_diffusion) < 0 or self.hs_alpha <= 0:
            raise ValueError("sigmas must be >= 0 and hs_alpha > 0")
        if self.step_cap_vox <= 0 or self.squarings < 0:
            raise ValueError("step cap must be positive and squarings non-negative")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d) -> "RegParams":
        if isinstance(d, str):
            d = json.loads(d)
        return cls(**d)


def normalize(values: np.ndarray) -> np.ndarray:
    """Linear rescale to [0, 1]; constant images map to 0."""
    v = np.asarray(values, float)
    lo, hi = float(v.min()), float(v.max())
    return (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)


def _identity(shape) -> np.ndarray:
    return np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in shape], indexing="ij"))


def _warp(img: np.ndarray, u: np.ndarray, ident: np.ndarray) -> np.ndarray:
    # u has shape (3, *shape) in voxels; edge values extend beyond the grid
    return ndi.map_coordinates(img, ident + u, order=1, mode="nearest")


def _grad(img: np.ndarray) -> np.ndarray:
    return np.stack([np.gradient(img, axis=a) if img.shape[a] > 1 else np.zeros_like(img)
                     for a in range(3)])


def _smooth(u: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return u
    return np.stack([ndi.gaussian_filter(c, sigma, mode="nearest") for c in u])


def _mean6(c: np.ndarray) -> np.ndarray:
    p = np.pad(c, 1, mode="edge")
    return (p[:-2, 1:-1, 1:-1] + p[2:, 1:-1, 1:-1] + p[1:-1, :-2, 1:-1] +
            p[1:-1, 2:, 1:-1] + p[1:-1, 1:-1, :-2] + p[1:-1, 1:-1, 2:]) / 6.0


def _cap(step: np.ndarray, cap: float) -> np.ndarray:
    n = np.sqrt(np.sum(step * step, axis=0))
    return step * np.minimum(1.0, cap / np.maximum(n, 1e-300))


def _pyramid(img: np.ndarray, levels: int) -> list:
    out = [img]
    for _ in range(levels - 1):
        prev = out[-1]
        if min(prev.shape) < 8:
            break
        out.append(ndi.gaussian_filter(prev, 1.0, mode="nearest")[::2, ::2, ::2])
    return out[::-1]


def _upsample(u: np.ndarray, shape) -> np.ndarray:
    # coarse voxel j sits at fine voxel 2j
    coords = _identity(shape) / 2.0
    return np.stack([2.0 * ndi.map_coordinates(c, coords, order=1, mode="nearest") for c in u])


def exp_field(v: np.ndarray, squarings: int) -> np.ndarray:
    """Displacement of exp(v) by scaling and squaring (voxel units)."""
    ident = _identity(v.shape[1:])
    w = v / (2.0 ** squarings)
    for _ in range(squarings):
        w = w + np.stack([_warp(c, w, ident) for c in w])
    return w


def _check(fixed: ScalarGrid, moving: ScalarGrid):
    if fixed.geometry != moving.geometry:
        raise ValueError("fixed and moving images must share one geometry; resample first")


def _to_field(fixed: ScalarGrid, u: np.ndarray) -> VectorField:
    sp = np.asarray(fixed.geometry.spacing)
    return VectorField(fixed.geometry, np.moveaxis(u, 0, -1) * sp, BACKWARD_PULL)


def _hs_level(f, m, u, p: RegParams):
    ident = _identity(f.shape)
    for _ in range(p.iterations):
        w = _warp(m, u, ident)
        g = _grad(w)
        it = w - f
        ubar = np.stack([_mean6(c) for c in u])
        resid = it + np.sum(g * (ubar - u), axis=0)
        new = ubar - g * (resid / (p.hs_alpha + np.sum(g * g, axis=0)))
        step = _cap(new - u, p.step_cap_vox)
        u = u + step
        if np.mean(np.sqrt(np.sum(step * step, axis=0))) < p.tol_vox:
            break
    return u


def _demons_force(f, w):
    diff = w - f
    g = _grad(w)
    den = np.sum(g * g, axis=0) + diff * diff
    return -g * np.divide(diff, den, out=np.zeros_like(diff), where=den > 1e-12)


def _demons_level(f, m, u, p: RegParams):
    ident = _identity(f.shape)
    for _ in range(p.iterations):
        w = _warp(m, u, ident)
        step = _cap(_smooth(_demons_force(f, w), p.demons_sigma_fluid), p.step_cap_vox)
        new = _smooth(u + step, p.demons_sigma_diffusion)
        delta = new - u
        u = new
        if np.mean(np.sqrt(np.sum(delta * delta, axis=0))) < p.tol_vox:
            break
    return u


def _demons_diffeo_level(f, m, v, p: RegParams):
    ident = _identity(f.shape)
    for _ in range(p.iterations):
        u = exp_field(v, p.squarings)
        w = _warp(m, u, ident)
        step = _cap(_smooth(_demons_force(f, w), p.demons_sigma_fluid), p.step_cap_vox)
        new = _smooth(v + step, p.demons_sigma_diffusion)
        delta = new - v
        v = new
        if np.mean(np.sqrt(np.sum(delta * delta, axis=0))) < p.tol_vox:
            break
    return v


def _multires(fixed, moving, params, level_fn):
    _check(fixed, moving)
    fp = _pyramid(normalize(fixed.values), params.levels)
    mp = _pyramid(normalize(moving.values), params.levels)
    u = np.zeros((3,) + fp[0].shape)
    for k, (f, m) in enumerate(zip(fp, mp)):
        if k:
            u = _upsample(u, f.shape)
        u = level_fn(f, m, u, params)
    return u


def register_hsof(fixed: ScalarGrid, moving: ScalarGrid, params: RegParams = RegParams()) -> VectorField:
    """Horn-Schunck optical flow with incremental warping.

    Each iteration linearizes the moving image around the current warp and
    takes one Jacobi step of the Euler-Lagrange equations of
    sum (I_m(x+u) - I_f)^2 + hs_alpha * |grad u|^2.
    """
    return _to_field(fixed, _multires(fixed, moving, params, _hs_level))


def register_demons(fixed: ScalarGrid, moving: ScalarGrid, params: RegParams = RegParams()) -> VectorField:
    """Thirion demons; with ``params.diffeomorphic`` the field is exp of a smoothed velocity."""
    if params.diffeomorphic:
        v = _multires(fixed, moving, params, _demons_diffeo_level)
        return _to_field(fixed, exp_field(v, params.squarings))
    return _to_field(fixed, _multires(fixed, moving, params, _demons_level))


METHODS = {"hsof": register_hsof, "demons": register_demons}


def register(method: str, fixed: ScalarGrid, moving: ScalarGrid, params: RegParams = RegParams()) -> VectorField:
    try:
        fn = METHODS[method]
    except KeyError:
        raise ValueError(f"unknown registration method {method!r}; choose from {sorted(METHODS)}") from None
    return fn(fixed, moving, params)
