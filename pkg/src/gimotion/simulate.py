"""From an organ mask to ground-truth motion: surfaces, phase fields and 4D images."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import dilate_region, fill_smooth, invert, voxelize_surfaces
from .grid import LabelMask, ScalarGrid, VectorField, warp_labels_nearest, warp_pull
from .motion import R_MIN_MM, SQRT3, WaveParams, displaced_net, wave_value
from .skeleton import Centerline, boundary_depth, build_graph, longest_path, thin
from .surface import (TubeSurface, cast_sections, default_n_sections, fit_surface,
                      resample_centerline)


def extract_surface(mask: LabelMask, label: int, endpoints=None, n_rays: int = 16,
                    n_sections: int | None = None) -> tuple[Centerline, TubeSurface]:
    """Skeleton -> longest medial path -> resampled centerline -> cast tube surface."""
    geo = mask.geometry
    skel = thin(mask, label)
    if not skel.any():
        raise ValueError(f"organ label {label} is empty")
    depth = None if endpoints is not None else boundary_depth(mask, label)
    c = longest_path(build_graph(skel), geo, endpoints=endpoints, depth=depth)
    c = resample_centerline(c, n_sections or default_n_sections(c.length))
    return c, fit_surface(cast_sections(mask, label, c, n_rays))


def region_margin(geometry, params) -> float:
    """Width (mm) of the moving shell around the organs.

    At least three voxels; for large waves twice the peak radial
    displacement so the falloff to zero stays gentle enough to avoid folds.
    """
    peak = max((p.amplitude / SQRT3 for p in params), default=0.0)
    return max(3.0 * max(geometry.spacing), 2.0 * peak)


@dataclass(frozen=True, eq=False)
class MotionModel:
    """Static-frame geometry needed to turn surface motion into dense fields."""
    mask: LabelMask
    labels: tuple
    surfaces: tuple
    margin_mm: float
    sigma: float = 1.0
    r_min: float = R_MIN_MM

    def __post_init__(self):
        core = np.isin(self.mask.labels, self.labels)
        object.__setattr__(self, "core", core)
        object.__setattr__(self, "region", dilate_region(core, self.mask.geometry, self.margin_mm))

    @property
    def geometry(self):
        return self.mask.geometry

    def organ_mask(self, label: int) -> np.ndarray:
        return self.mask.binary(label)

    def field_from_values(self, values) -> VectorField:
        """Forward field for per-organ section displacements (one array per surface)."""
        pairs = [(s, s.with_control_net(displaced_net(s, w, self.r_min)))
                 for s, w in zip(self.surfaces, values)]
        f, cov = voxelize_surfaces(pairs, self.geometry)
        out, _ = fill_smooth(f, cov, self.region, self.sigma, core=self.core,
                             falloff_mm=self.margin_mm)
        return out

    def section_values(self, params, t) -> list:
        return [wave_value(p, s.arclengths, t) for s, p in zip(self.surfaces, params)]

    def field_at(self, params, t) -> VectorField:
        return self.field_from_values(self.section_values(params, t))

    def phase_values(self, params, k: int) -> list:
        """Section values at phase ``k``; each organ runs through its own period."""
        return [wave_value(p, s.arclengths, p.phase_times()[k]) for s, p in zip(self.surfaces, params)]

    def phase_fields(self, params) -> list:
        """Forward fields for every phase."""
        return [self.field_from_values(self.phase_values(params, k))
                for k in range(params[0].n_phases)]


def build_model(mask: LabelMask, organs, params, endpoints=None, n_rays: int = 16,
                sigma: float = 1.0) -> MotionModel:
    """``organs`` is a sequence of labels; ``endpoints`` an optional per-organ list."""
    endpoints = endpoints or [None] * len(organs)
    surfaces = tuple(extract_surface(mask, lab, ep, n_rays)[1] for lab, ep in zip(organs, endpoints))
    return MotionModel(mask, tuple(organs), surfaces, region_margin(mask.geometry, params), sigma)


@dataclass(frozen=True, eq=False)
class PhaseFrame:
    push: VectorField
    pull: VectorField
    image: ScalarGrid
    mask: LabelMask
    inversion: object


def synth_frame(image: ScalarGrid, mask: LabelMask, push: VectorField, workers: int = 1) -> PhaseFrame:
    """Deformed image and mask for one phase: invert the forward field and pull."""
    pull, rep = invert(push, workers=workers)
    warped = warp_pull(image, pull, workers=workers, edge=True)
    return PhaseFrame(push, pull, warped, warp_labels_nearest(mask, pull), rep)


__all__ = ["extract_surface", "region_margin", "MotionModel", "build_model", "PhaseFrame",
           "synth_frame", "WaveParams"]
