"""Self-consistency QA: fit waves to reference motion, re-synthesize, compare statistics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .field import jacobian_log, sample_correspondences
from .grid import FORWARD_PUSH, ConventionError, VectorField, sample_vectors
from .motion import STOMACH, FitResult, SearchBox, fit_wave_params
from .simulate import MotionModel


@dataclass(frozen=True)
class QaThresholds:
    displacement_mm: float = 0.8
    log_jacobian: float = 0.01


@dataclass(frozen=True)
class PhaseStats:
    mean_mm: float
    sd_mm: float
    max_mm: float
    log_j_mean: float
    log_j_sd: float

    @classmethod
    def of(cls, f: VectorField, mask: np.ndarray) -> "PhaseStats":
        mag = f.magnitude()[mask]
        _, js = jacobian_log(f, mask)
        return cls(float(mag.mean()), float(mag.std()), float(mag.max()), js.mean, js.sd)


@dataclass
class QaReport:
    reference: list
    synthetic: list
    fits: list
    thresholds: QaThresholds
    per_phase: bool
    max_diff_mean_mm: float = field(init=False)
    max_diff_max_mm: float = field(init=False)
    max_diff_log_j: float = field(init=False)

    def __post_init__(self):
        pairs = list(zip(self.reference, self.synthetic))
        self.max_diff_mean_mm = max(abs(r.mean_mm - s.mean_mm) for r, s in pairs)
        self.max_diff_max_mm = max(abs(r.max_mm - s.max_mm) for r, s in pairs)
        self.max_diff_log_j = max(abs(r.log_j_mean - s.log_j_mean) for r, s in pairs)

    @property
    def passed(self) -> bool:
        t = self.thresholds
        return (self.max_diff_mean_mm <= t.displacement_mm and self.max_diff_max_mm <= t.displacement_mm
                and self.max_diff_log_j <= t.log_jacobian)

    @property
    def fit_rmse(self) -> float:
        return max(f.rmse for fits in self.fits for f in fits)

    def to_json(self) -> dict:
        return {
            "passed": self.passed,
            "thresholds": asdict(self.thresholds),
            "per_phase_fit": self.per_phase,
            "summary": {"max_abs_diff_mean_mm": self.max_diff_mean_mm,
                        "max_abs_diff_max_mm": self.max_diff_max_mm,
                        "max_abs_diff_mean_log_jacobian": self.max_diff_log_j,
                        "fit_rmse_mm": self.fit_rmse},
            "phases": [{"reference": asdict(r), "synthetic": asdict(s)}
                       for r, s in zip(self.reference, self.synthetic)],
            "fits": [[{"params": f.params.to_json(), "rmse_mm": f.rmse, "at_bound": list(f.at_bound)}
                      for f in fits] for fits in self.fits],
        }


def _keypoints(model: MotionModel, k: int, stride: int) -> np.ndarray:
    s = model.surfaces[k]
    return sample_correspondences(s, s).positions[::stride]


def observation_operator(model: MotionModel, k: int, points: np.ndarray) -> np.ndarray:
    """Map from organ ``k``'s section values to field vectors at ``points``.

    Column i is the dense field of a unit displacement of section i, sampled
    at the points. The field chain is linear in section values, so this is
    exact while no section hits the lumen clamp.
    """
    zeros = [np.zeros(s.n_sections) for s in model.surfaces]
    cols = []
    for i in range(model.surfaces[k].n_sections):
        vals = [z.copy() for z in zeros]
        vals[k][i] = 1.0
        cols.append(sample_vectors(model.field_from_values(vals), points).ravel())
    return np.stack(cols, axis=1)


def qa_compare(reference, model: MotionModel, search_box: SearchBox | None = None, times=None,
               per_phase: bool = False, thresholds: QaThresholds = QaThresholds(),
               n_phases: int = 21, keypoint_stride: int = 8) -> QaReport:
    """Fit wave parameters to ``reference`` forward fields and compare with a re-synthesis.

    ``times`` are the acquisition times of the reference phases; by default
    the phase times of the stomach preset. Only the ratio speed * t / wavelength
    enters the wave, so a wrong time base rescales the fitted speed without
    changing the re-synthesized fields.
    """
    reference = list(reference)
    if len(reference) != n_phases:
        raise ValueError(f"expected {n_phases} reference phases, got {len(reference)}")
    for f in reference:
        if f.convention != FORWARD_PUSH:
            raise ConventionError("reference fields must be forward_push")
        if f.geometry != model.geometry:
            raise ValueError("reference and model geometries differ")
    times = np.asarray(STOMACH.phase_times() if times is None else times, float)
    if len(times) != n_phases:
        raise ValueError("times must have one entry per phase")
    box = search_box or SearchBox()

    fits = []   # per organ: list of FitResult (one, or one per phase)
    for k, surf in enumerate(model.surfaces):
        pts = _keypoints(model, k, keypoint_stride)
        M = observation_operator(model, k, pts)
        obs = np.stack([sample_vectors(f, pts).ravel() for f in reference])
        if per_phase:
            fits.append([fit_wave_params(obs[j:j + 1], surf.arclengths, times[j:j + 1], box,
                                         operator=M, n_phases=n_phases) for j in range(n_phases)])
        else:
            fits.append([fit_wave_params(obs, surf.arclengths, times, box, operator=M,
                                         n_phases=n_phases)])

    def params_at(j):
        return [f[j if per_phase else 0].params for f in fits]

    mask = model.core
    ref_stats = [PhaseStats.of(f, mask) for f in reference]
    syn_stats = [PhaseStats.of(model.field_at(params_at(j), times[j]), mask) for j in range(n_phases)]
    return QaReport(ref_stats, syn_stats, fits, thresholds, per_phase)


__all__ = ["QaThresholds", "PhaseStats", "QaReport", "observation_operator", "qa_compare", "FitResult"]
