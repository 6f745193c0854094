"""Peristaltic travelling-wave motion of tube control points, and wave fitting."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .surface import TubeSurface

SQRT3 = math.sqrt(3.0)
R_MIN_MM = 0.5
PARAM_NAMES = ("amplitude", "speed", "wavelength", "alpha_s", "alpha_t")


@dataclass(frozen=True)
class WaveParams:
    amplitude: float = 16.0     # A, mm
    speed: float = 5.0          # c, mm/s
    wavelength: float = 55.0    # lambda, mm
    alpha_s: float = 0.0        # 1/mm
    alpha_t: float = 0.0        # 1/s
    n_phases: int = 21

    def __post_init__(self):
        if self.amplitude < 0 or self.alpha_s < 0 or self.alpha_t < 0:
            raise ValueError("amplitude and attenuations must be >= 0")
        if self.speed <= 0 or self.wavelength <= 0:
            raise ValueError("speed and wavelength must be > 0")
        if self.n_phases < 2:
            raise ValueError("need at least 2 phases")

    @property
    def period(self) -> float:
        return self.wavelength / self.speed

    def phase_times(self) -> np.ndarray:
        frac = np.arange(self.n_phases) / (self.n_phases - 1)
        return self.period * frac

    def to_json(self) -> dict:
        return {"amplitude_mm": self.amplitude, "speed_mm_s": self.speed,
                "wavelength_mm": self.wavelength, "alpha_s": self.alpha_s,
                "alpha_t": self.alpha_t, "phases": self.n_phases}

    @classmethod
    def from_json(cls, d) -> "WaveParams":
        return cls(float(d.get("amplitude_mm", 16.0)), float(d.get("speed_mm_s", 5.0)),
                   float(d.get("wavelength_mm", 55.0)), float(d.get("alpha_s", 0.0)),
                   float(d.get("alpha_t", 0.0)), int(d.get("phases", 21)))

    def as_vector(self) -> np.ndarray:
        return np.array([self.amplitude, self.speed, self.wavelength, self.alpha_s, self.alpha_t])

    def replace_vector(self, x) -> "WaveParams":
        return WaveParams(*(float(v) for v in x), n_phases=self.n_phases)


STOMACH = WaveParams(16.0, 5.0, 55.0)
LARGE_BOWEL = WaveParams(16.0, 8.0, 40.0)


def wave_value(params: WaveParams, arclength, t):
    """Radial displacement (mm) of a section at arc length L (mm) and time t (s).

    The travelling sine is evaluated with t reduced modulo the period, so
    t = T reproduces t = 0 exactly; the temporal attenuation uses the true t.
    """
    L = np.asarray(arclength, float)
    t = np.asarray(t, float)
    t_red = np.mod(t, params.period)
    carrier = np.sin(2.0 * np.pi * (L - params.speed * t_red) / params.wavelength)
    out = (params.amplitude / SQRT3) * carrier * np.exp(-params.alpha_s * L) * np.exp(-params.alpha_t * t)
    return out if out.ndim else float(out)


def displaced_net(surface: TubeSurface, section_values, r_min: float = R_MIN_MM) -> np.ndarray:
    """Control net moved radially by a per-section displacement, with lumen clamp."""
    net = surface.control_net
    dirs = surface.radial_dirs
    w = np.asarray(section_values, float)[:, None]
    radii = np.einsum("ijc,ijc->ij", net - surface.centers[:, None, :], dirs)
    moved = net + w[..., None] * dirs
    collapse = (radii + w <= r_min) & (w < 0)
    if collapse.any():
        clamp_r = np.minimum(radii, r_min)
        clamped = surface.centers[:, None, :] + clamp_r[..., None] * dirs
        moved = np.where(collapse[..., None], clamped, moved)
    return moved


def deform_surface(surface: TubeSurface, params: WaveParams, t: float,
                   r_min: float = R_MIN_MM) -> TubeSurface:
    w = wave_value(params, surface.arclengths, t)
    return surface.with_control_net(displaced_net(surface, w, r_min))


@dataclass(frozen=True, eq=False)
class PhaseSequence:
    base: TubeSurface
    params: WaveParams
    times: np.ndarray
    phases: tuple

    def mean_displacement(self) -> np.ndarray:
        base = self.base.control_net
        return np.array([np.linalg.norm(s.control_net - base, axis=-1).mean() for s in self.phases])

    @property
    def max_phase(self) -> int:
        return int(np.argmax(self.mean_displacement()))


def synth_phases(items, r_min: float = R_MIN_MM) -> list[PhaseSequence]:
    """One full-period phase sequence per (surface, params) pair."""
    out = []
    for surface, params in items:
        times = params.phase_times()
        phases = tuple(deform_surface(surface, params, t, r_min) for t in times)
        out.append(PhaseSequence(surface, params, times, phases))
    return out


def max_deformation_phase(sequences) -> int:
    """argmax over phases of the mean control-point displacement, pooled across organs."""
    totals, counts = None, 0
    for seq in sequences:
        base = seq.base.control_net
        d = np.array([np.linalg.norm(s.control_net - base, axis=-1).sum() for s in seq.phases])
        totals = d if totals is None else totals + d
        counts += base.shape[0] * base.shape[1]
    return int(np.argmax(totals / counts))


# -- fitting ----------------------------------------------------------------

@dataclass(frozen=True)
class SearchBox:
    amplitude: tuple = (0.0, 32.0)
    speed: tuple = (1.0, 15.0)
    wavelength: tuple = (20.0, 100.0)
    alpha_s: tuple = (0.0, 0.0)
    alpha_t: tuple = (0.0, 0.0)
    steps: int = 33

    def bounds(self) -> np.ndarray:
        b = np.array([self.amplitude, self.speed, self.wavelength, self.alpha_s, self.alpha_t], float)
        if np.any(b[:, 1] < b[:, 0]):
            raise ValueError("search box has an empty range")
        return b

    def to_json(self) -> dict:
        return {k: list(getattr(self, k)) for k in PARAM_NAMES} | {"steps": self.steps}

    @classmethod
    def from_json(cls, d) -> "SearchBox":
        kw = {k: tuple(d[k]) for k in PARAM_NAMES if k in d}
        return cls(**kw, steps=int(d.get("steps", 33)))


@dataclass(frozen=True)
class FitResult:
    params: WaveParams
    rmse: float
    at_bound: tuple = field(default_factory=tuple)


class _Problem:
    """Least-squares wave fit in reduced (normal-equation) form.

    Observations are ``R[k] ~ M @ W[k]`` where W[k, i] is the wave value of
    section i at time k and M maps section values to observations.
    """

    def __init__(self, reference, arclengths, times, operator=None):
        R = np.asarray(reference, float)
        self.L = np.asarray(arclengths, float)
        self.t = np.asarray(times, float)
        n_k, n_i = len(self.t), len(self.L)
        if operator is None:
            if R.shape[:2] != (n_k, n_i):
                raise ValueError(f"reference shape {R.shape} does not match ({n_k}, {n_i}, n_rays)")
            R = R.reshape(n_k, n_i, -1)
            n_obs = R.shape[2]
            self.M = None
            self.G = np.eye(n_i) * n_obs
            self.H = R.sum(axis=2)
        else:
            M = np.asarray(operator, float)
            R = R.reshape(n_k, -1)
            if M.shape != (R.shape[1], n_i):
                raise ValueError(f"operator shape {M.shape} != ({R.shape[1]}, {n_i})")
            self.M = M
            self.G = M.T @ M
            self.H = R @ M
        self.R = R
        self.RR = float(np.sum(R * R))
        self.n = R.size

    def unit_waves(self, x):
        """Wave values with unit amplitude for parameter rows x[..., 1:]."""
        x = np.atleast_2d(x)
        speed, lam, a_s, a_t = (x[:, c][:, None, None] for c in range(1, 5))
        period = lam / speed
        t = self.t[None, :, None]
        t_red = np.mod(t, period)
        L = self.L[None, None, :]
        w = np.sin(2 * np.pi * (L - speed * t_red) / lam) * np.exp(-a_s * L) * np.exp(-a_t * t)
        return w / SQRT3

    def sse_profiled(self, x, a_bounds):
        """SSE with amplitude at its least-squares optimum within bounds."""
        w = self.unit_waves(x)
        rp = np.einsum("nki,ki->n", w, self.H)
        pp = np.einsum("nki,ij,nkj->n", w, self.G, w)
        amp = np.where(pp > 0, rp / np.where(pp > 0, pp, 1), 0.0)
        amp = np.clip(amp, *a_bounds)
        return self.RR - 2 * amp * rp + amp * amp * pp, amp

    def sse(self, x) -> float:
        w = x[0] * self.unit_waves(x)[0]
        return float(self.RR - 2 * np.sum(w * self.H) + np.einsum("ki,ij,kj->", w, self.G, w))

    def residuals(self, x) -> np.ndarray:
        w = x[0] * self.unit_waves(x)[0]
        if self.M is None:
            return (self.R - w[:, :, None]).ravel()
        return (self.R - w @ self.M.T).ravel()


def fit_wave_params(reference, arclengths, times, search_box: SearchBox | None = None,
                    operator=None, n_phases: int | None = None, polish: bool = True) -> FitResult:
    """Fit travelling-wave parameters to observed radial displacements.

    ``reference`` has shape (n_times, n_sections, n_rays) of radial
    displacements on the control lattice, or (n_times, n_obs) together with a
    linear ``operator`` (n_obs, n_sections) mapping per-section wave values to
    observations. A coarse grid search (amplitude solved in closed form) is
    followed by coordinate descent with step halving and a bounded
    least-squares polish.
    """
    box = search_box or SearchBox()
    bounds = box.bounds()
    prob = _Problem(reference, arclengths, times, operator)
    steps = max(8, box.steps)
    axes = [np.linspace(lo, hi, steps) if hi > lo else np.array([lo]) for lo, hi in bounds[1:]]
    best = (np.inf, None)
    combos = np.array(list(itertools.product(*axes)))
    for start in range(0, len(combos), 2048):
        chunk = combos[start:start + 2048]
        x = np.concatenate([np.zeros((len(chunk), 1)), chunk], axis=1)
        sse, amp = prob.sse_profiled(x, bounds[0])
        k = int(np.argmin(sse))
        if sse[k] < best[0]:
            x[k, 0] = amp[k]
            best = (float(sse[k]), x[k].copy())
    x = best[1]
    f = prob.sse(x)

    # coordinate descent, initial steps = grid spacing
    width = bounds[:, 1] - bounds[:, 0]
    step = np.where(width > 0, width / (steps - 1), 0.0)
    free = width > 0
    while True:
        improved = False
        for p in np.flatnonzero(free):
            if step[p] <= 1e-3 * max(abs(x[p]), 1e-3 * width[p]):
                continue
            for sgn in (1.0, -1.0):
                trial = x.copy()
                trial[p] = np.clip(x[p] + sgn * step[p], *bounds[p])
                ft = prob.sse(trial)
                if ft < f:
                    x, f, improved = trial, ft, True
                    break
            else:
                step[p] *= 0.5
        if not improved and all(step[p] <= 1e-3 * max(abs(x[p]), 1e-3 * width[p])
                                for p in np.flatnonzero(free)):
            break

    if polish and free.any():
        idx = np.flatnonzero(free)

        def resid(z):
            full = x.copy()
            full[idx] = z
            return prob.residuals(full)

        lo, hi = bounds[idx, 0], bounds[idx, 1]
        z0 = np.clip(x[idx], lo, hi)
        sol = least_squares(resid, z0, bounds=(lo, hi), xtol=1e-15, ftol=1e-15, gtol=1e-15,
                            max_nfev=2000)
        trial = x.copy()
        trial[idx] = sol.x
        ft = prob.sse(trial)
        if ft <= f:
            x, f = trial, ft

    rmse = float(np.sqrt(np.mean(prob.residuals(x) ** 2)))
    at_bound = tuple(PARAM_NAMES[p] for p in np.flatnonzero(free)
                     if np.isclose(x[p], bounds[p, 0]) or np.isclose(x[p], bounds[p, 1]))
    # speed/wavelength must stay positive for WaveParams even when the box allows 0
    x[1] = max(x[1], 1e-12)
    x[2] = max(x[2], 1e-12)
    params = WaveParams(*(float(v) for v in x), n_phases=n_phases or len(prob.t))
    return FitResult(params, rmse, at_bound)
