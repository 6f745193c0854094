"""Analytic desk-scale phantoms: swept tubes, textured intensity and Gaussian dose."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi
from scipy.spatial import cKDTree

from .grid import DOSE_GRAY, INTENSITY, GridGeometry, LabelMask, ScalarGrid

CURVE_KINDS = ("line", "arc", "helix")
_SAMPLE_MM = 0.1


@dataclass(frozen=True)
class TubeSpec:
    """A tube swept along an analytic curve.

    ``params`` by kind:
      line:  start, end
      arc:   center, radius, e1, e2, angle0 (deg), sweep (deg); C = center + R(cos a e1 + sin a e2)
      helix: center, radius, axis, e1, pitch (mm/turn), turns
    """
    name: str
    label: int
    kind: str
    params: dict
    radius: float = 10.0
    radius_end: float | None = None     # linear taper along arc length
    wall_mm: float = 3.0
    wall_intensity: float = 0.8
    lumen_intensity: float = 0.5
    caps: str = "flat"                  # "flat" or "round" (hemispherical)

    def __post_init__(self):
        if self.caps not in ("flat", "round"):
            raise ValueError(f"unknown cap style {self.caps!r}")
        if self.kind not in CURVE_KINDS:
            raise ValueError(f"unknown curve kind {self.kind!r}")
        if self.label < 1:
            raise ValueError("organ labels must be >= 1")
        if self.radius <= 0 or (self.radius_end is not None and self.radius_end <= 0):
            raise ValueError("radius must be > 0")

    def curve(self, n: int | None = None) -> np.ndarray:
        """Dense points along the centerline (about 0.1 mm apart by default)."""
        p = {k: np.asarray(v, float) for k, v in self.params.items()}
        if self.kind == "line":
            length = float(np.linalg.norm(p["end"] - p["start"]))
        elif self.kind == "arc":
            length = float(p["radius"]) * math.radians(float(p["sweep"]))
        else:
            per_turn = math.hypot(2 * math.pi * float(p["radius"]), float(p["pitch"]))
            length = per_turn * float(p["turns"])
        n = n or max(2, int(math.ceil(length / _SAMPLE_MM)) + 1)
        s = np.linspace(0.0, 1.0, n)[:, None]
        if self.kind == "line":
            return p["start"] + s * (p["end"] - p["start"])
        if self.kind == "arc":
            e1, e2 = _unit(p["e1"]), _unit(p["e2"])
            a = np.radians(float(p["angle0"]) + s * float(p["sweep"]))
            return p["center"] + float(p["radius"]) * (np.cos(a) * e1 + np.sin(a) * e2)
        axis, e1 = _unit(p["axis"]), _unit(p["e1"])
        e2 = np.cross(axis, e1)
        a = 2 * np.pi * float(p["turns"]) * s
        return (p["center"] + float(p["radius"]) * (np.cos(a) * e1 + np.sin(a) * e2)
                + float(p["pitch"]) * float(p["turns"]) * s * axis)

    def radius_at(self, frac) -> np.ndarray:
        r1 = self.radius if self.radius_end is None else self.radius_end
        return self.radius + (r1 - self.radius) * np.asarray(frac, float)

    def to_json(self) -> dict:
        d = asdict(self)
        d["params"] = {k: (list(map(float, v)) if np.ndim(v) else float(v)) for k, v in self.params.items()}
        return d

    @classmethod
    def from_json(cls, d) -> "TubeSpec":
        return cls(**d)


@dataclass(frozen=True)
class DoseBlob:
    center: tuple
    sigma_mm: float
    peak_gy: float


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (128, 128, 96)
    spacing: tuple = (1.5, 1.5, 2.0)
    origin: tuple = (0.0, 0.0, 0.0)
    organs: tuple = ()
    body_semi_axes: tuple | None = None     # ellipsoid about the grid centre, mm
    body_intensity: float = 0.3
    texture_amplitude: float = 0.05
    texture_sigma_mm: float = 12.0
    noise_sigma: float = 0.0
    dose: tuple = ()
    seed: int = 0

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(tuple(self.dims), tuple(self.spacing), tuple(self.origin))

    def to_json(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("organs", "dose")}
        d["organs"] = [o.to_json() for o in self.organs]
        d["dose"] = [asdict(b) for b in self.dose]
        return d

    @classmethod
    def from_json(cls, d) -> "PhantomSpec":
        d = dict(d)
        organs = tuple(TubeSpec.from_json(o) for o in d.pop("organs", []))
        dose = tuple(DoseBlob(tuple(b["center"]), float(b["sigma_mm"]), float(b["peak_gy"]))
                     for b in d.pop("dose", []))
        for k in ("dims", "spacing", "origin", "body_semi_axes"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(organs=organs, dose=dose, **d)

    def scaled(self, factor: float) -> "PhantomSpec":
        """Same physical phantom on a grid with ``factor`` times as many voxels per axis."""
        dims = tuple(max(1, int(round(n * factor))) for n in self.dims)
        extent = [(n - 1) * s for n, s in zip(self.dims, self.spacing)]
        spacing = tuple(e / max(n - 1, 1) for e, n in zip(extent, dims))
        return replace(self, dims=dims, spacing=spacing)


@dataclass(frozen=True, eq=False)
class Phantom:
    spec: PhantomSpec
    intensity: ScalarGrid
    mask: LabelMask
    dose: ScalarGrid
    body: np.ndarray
    descriptors: dict

    def write(self, out_dir) -> None:
        from .nifti import write_nifti
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_nifti(self.intensity, out / "intensity.nii")
        write_nifti(self.mask, out / "labels.nii")
        write_nifti(self.dose, out / "dose.nii")
        (out / "descriptors.json").write_text(json.dumps(self.descriptors, indent=2, sort_keys=True))


def _unit(v) -> np.ndarray:
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


def _cumlen(pts) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])


def check_separation(organs, min_gap_mm: float = 2.0) -> None:
    """Raise if any two tube surfaces come within ``min_gap_mm`` (sampled)."""
    for i in range(len(organs)):
        for j in range(i + 1, len(organs)):
            a, b = organs[i], organs[j]
            pa, pb = a.curve(), b.curve()
            ra = a.radius_at(_cumlen(pa) / max(_cumlen(pa)[-1], 1e-12))
            rb = b.radius_at(_cumlen(pb) / max(_cumlen(pb)[-1], 1e-12))
            d, k = cKDTree(pb).query(pa)
            gap = float(np.min(d - ra - rb[k]))
            if gap <= min_gap_mm:
                raise ValueError(f"organs {a.name!r} and {b.name!r} intersect or touch "
                                 f"(surface gap {gap:.2f} mm <= {min_gap_mm} mm)")


def tube_distance(tube: TubeSpec, pts: np.ndarray):
    """Distance to the centerline and local radius; inf beyond flat end caps."""
    curve = tube.curve()
    s = _cumlen(curve)
    frac = s / s[-1] if s[-1] > 0 else np.zeros_like(s)
    dist, k = cKDTree(curve).query(pts, workers=1)
    if tube.caps == "round":
        return dist, tube.radius_at(frac[k])
    # flat caps: nearest point at an end and beyond the end plane
    t0 = _unit(curve[1] - curve[0])
    t1 = _unit(curve[-1] - curve[-2])
    beyond = ((k == 0) & ((pts - curve[0]) @ t0 < -1e-9)) | \
             ((k == len(curve) - 1) & ((pts - curve[-1]) @ t1 > 1e-9))
    dist = np.where(beyond, np.inf, dist)
    return dist, tube.radius_at(frac[k])


def make_phantom(spec: PhantomSpec) -> Phantom:
    """Rasterize organs, intensity texture and dose for ``spec``."""
    check_separation(spec.organs)
    geo = spec.geometry
    pts = geo.world_grid().reshape(-1, 3)
    labels = np.zeros(geo.n_voxels, np.int64)
    lumen = np.zeros(geo.n_voxels, bool)
    wall = np.zeros(geo.n_voxels, bool)
    organ_int = np.zeros(geo.n_voxels)
    for tube in spec.organs:
        bound = (max(tube.radius, tube.radius_end or 0.0) + 2 * max(geo.spacing))
        lo = np.min(tube.curve(), axis=0) - bound
        hi = np.max(tube.curve(), axis=0) + bound
        near = np.flatnonzero(np.all((pts >= lo) & (pts <= hi), axis=1))
        d, r = tube_distance(tube, pts[near])
        inside = d <= r
        sel = near[inside]
        labels[sel] = tube.label
        is_wall = d[inside] > r[inside] - tube.wall_mm
        organ_int[sel] = np.where(is_wall, tube.wall_intensity, tube.lumen_intensity)
        wall[sel[is_wall]] = True
        lumen[sel[~is_wall]] = True

    rng = np.random.default_rng(spec.seed)
    dims = geo.dims
    if spec.body_semi_axes is None:
        body = np.ones(dims, bool)
    else:
        centre = np.asarray(geo.origin) + 0.5 * (np.asarray(dims) - 1) * np.asarray(geo.spacing)
        q = (pts - centre) / np.asarray(spec.body_semi_axes, float)
        body = (np.sum(q * q, axis=1) <= 1.0).reshape(dims)
    texture = np.zeros(dims)
    if spec.texture_amplitude > 0:
        raw = rng.standard_normal(dims)
        sig = [spec.texture_sigma_mm / s for s in geo.spacing]
        smooth = ndi.gaussian_filter(raw, sig, mode="wrap")
        smooth /= max(np.abs(smooth).max(), 1e-12)
        texture = spec.texture_amplitude * smooth
    values = np.where(body, spec.body_intensity, 0.0)
    organ = labels.reshape(dims) > 0
    values = np.where(organ, organ_int.reshape(dims), values)
    values = np.where(body | organ, values + texture, 0.0)
    if spec.noise_sigma > 0:
        values = values + np.where(body | organ, spec.noise_sigma * rng.standard_normal(dims), 0.0)

    dose = np.zeros(geo.n_voxels)
    for blob in spec.dose:
        d2 = np.sum((pts - np.asarray(blob.center, float)) ** 2, axis=1)
        dose += blob.peak_gy * np.exp(-0.5 * d2 / blob.sigma_mm ** 2)

    names = {t.label: t.name for t in spec.organs}
    mask = LabelMask(geo, labels.reshape(dims), names)
    desc = describe(spec)
    return Phantom(spec, ScalarGrid(geo, values, INTENSITY), mask,
                   ScalarGrid(geo, dose.reshape(dims), DOSE_GRAY), body, desc)


def describe(spec: PhantomSpec, n_points: int = 201) -> dict:
    """JSON-ready analytic descriptors (exact centerlines and radius profiles)."""
    organs = []
    for t in spec.organs:
        pts = t.curve(n_points)
        s = _cumlen(t.curve())
        organs.append({**t.to_json(), "length_mm": float(s[-1]),
                       "centerline": pts.tolist(),
                       "radius_profile": t.radius_at(np.linspace(0, 1, n_points)).tolist(),
                       "endpoints": [pts[0].tolist(), pts[-1].tolist()]})
    return {"geometry": spec.geometry.to_dict(), "organs": organs,
            "dose": [asdict(b) for b in spec.dose], "seed": spec.seed}


def standard_phantom(name: str, scale: float = 1.0) -> PhantomSpec:
    """Shipped fixtures.

    Both use a wide round-capped "stomach" tube running along the grid diagonal.
    "P-A" has a 30 Gy blob well beside the tube; "P-B" has a 50 Gy blob centred on it.
    """
    stomach = TubeSpec("stomach", 1, "line",
                       {"start": [43.3, 43.3, 43.3], "end": [146.7, 146.7, 146.7]},
                       radius=40.0, caps="round")
    if name == "P-A":
        dose = (DoseBlob((160.0, 40.0, 96.0), 20.0, 30.0),)
    elif name == "P-B":
        dose = (DoseBlob((110.0, 110.0, 110.0), 20.0, 50.0),)
    else:
        raise KeyError(f"unknown standard phantom {name!r}; choose 'P-A' or 'P-B'")
    # fine texture gives intensity-driven solvers something to track inside the lumen
    spec = PhantomSpec(organs=(stomach,), body_semi_axes=None, dose=dose, seed=7,
                       texture_amplitude=0.3, texture_sigma_mm=3.0)
    return spec if scale == 1.0 else spec.scaled(scale)
