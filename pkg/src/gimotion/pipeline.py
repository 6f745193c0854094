"""End-to-end run from a JSON config to a checksummed output bundle.

Stages run in order (inputs, surfaces, fields, synthesis, registration,
metrics). Each stage has a key hashed from its configuration and the keys
of the stages before it; a rerun reuses a stage's files when the key and
the file checksums recorded in ``manifest.json`` still match.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .field import invert, jacobian_log
from .grid import (BACKWARD_PULL, DOSE_GRAY, FORWARD_PUSH, INTENSITY, LabelMask, ScalarGrid,
                   VectorField, warp_labels_nearest, warp_pull)
from .metrics import (KeypointSet, MetricReport, OrganMetrics, Summary, accumulate_dose, dsc, dwe,
                      error_map, hd95, keypoints_from_surface, rmse_binned, rows_to_csv, tre)
from .motion import STOMACH, WaveParams, max_deformation_phase, synth_phases
from .nifti import read_nifti, read_vector_field, write_nifti
from .phantom import PhantomSpec, make_phantom, standard_phantom
from .registration import RegParams, register
from .render import render_heatmap
from .simulate import MotionModel, extract_surface, region_margin
from .surface import TubeSurface

log = logging.getLogger(__name__)

STAGES = ("inputs", "surfaces", "fields", "synthesis", "registration", "metrics")


class StageError(RuntimeError):
    def __init__(self, stage: str, organ: str | None, message: str):
        self.stage, self.organ = stage, organ
        where = f"stage {stage!r}" + (f", organ {organ!r}" if organ else "")
        super().__init__(f"{where}: {message}")

    def to_json(self) -> dict:
        return {"error": "stage_failed", "stage": self.stage, "organ": self.organ,
                "message": str(self)}


@dataclass(frozen=True)
class OrganConfig:
    label: int
    name: str = ""
    wave: WaveParams = STOMACH
    endpoints: tuple | None = None      # two voxel indices on the skeleton
    n_rays: int = 16

    def to_json(self) -> dict:
        return {"label": self.label, "name": self.name, "wave": self.wave.to_json(),
                "endpoints": None if self.endpoints is None else [list(e) for e in self.endpoints],
                "n_rays": self.n_rays}

    @classmethod
    def from_json(cls, d) -> "OrganConfig":
        ep = d.get("endpoints")
        return cls(int(d["label"]), str(d.get("name", "")), WaveParams.from_json(d.get("wave", {})),
                   None if ep is None else tuple(tuple(int(c) for c in e) for e in ep),
                   int(d.get("n_rays", 16)))


@dataclass(frozen=True)
class RunConfig:
    out_dir: str
    organs: tuple = ()
    volume: str | None = None
    mask: str | None = None
    phantom: str | dict | None = None   # "P-A" / "P-B" or a PhantomSpec JSON object
    phantom_scale: float = 1.0
    dose: str | None = None
    n_phases: int = 21
    methods: tuple = ()
    register_phases: str = "max"        # "max" or "all"
    reg_params: RegParams = RegParams()
    keypoint_stride: int = 1
    dose_floor_gy: float = 0.5
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.phantom is None and (self.volume is None or self.mask is None):
            raise ValueError("config needs either a phantom or both volume and mask paths")
        if not self.organs:
            raise ValueError("config lists no organs")
        if self.register_phases not in ("max", "all"):
            raise ValueError("register_phases must be 'max' or 'all'")
        if self.n_phases < 2 or self.workers < 1 or self.keypoint_stride < 1:
            raise ValueError("n_phases >= 2, workers >= 1 and keypoint_stride >= 1 required")

    def to_json(self) -> dict:
        return {"out_dir": self.out_dir, "organs": [o.to_json() for o in self.organs],
                "volume": self.volume, "mask": self.mask, "phantom": self.phantom,
                "phantom_scale": self.phantom_scale, "dose": self.dose, "n_phases": self.n_phases,
                "methods": list(self.methods), "register_phases": self.register_phases,
                "reg_params": self.reg_params.to_json(), "keypoint_stride": self.keypoint_stride,
                "dose_floor_gy": self.dose_floor_gy, "workers": self.workers, "seed": self.seed}

    @classmethod
    def from_json(cls, d) -> "RunConfig":
        if isinstance(d, str):
            d = json.loads(d)
        kw = dict(d)
        kw["organs"] = tuple(OrganConfig.from_json(o) for o in d.get("organs", ()))
        kw["methods"] = tuple(d.get("methods", ()))
        kw["reg_params"] = RegParams.from_json(d.get("reg_params", {}))
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(json.loads(Path(path).read_text()))

    def organ_params(self) -> list:
        return [replace(o.wave, n_phases=self.n_phases) for o in self.organs]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


@dataclass
class Bundle:
    out_dir: Path
    manifest: dict
    report: dict | None = None

    @property
    def files(self) -> dict:
        return self.manifest["files"]


@dataclass
class _Run:
    cfg: RunConfig
    out: Path
    previous: dict
    manifest: dict = field(default_factory=dict)
    state: dict = field(default_factory=dict)

    def reusable(self, stage: str, key: str) -> bool:
        rec = self.previous.get("stages", {}).get(stage)
        if not rec or rec.get("key") != key:
            return False
        files = self.previous.get("files", {})
        for rel in rec["outputs"]:
            p = self.out / rel
            if rel not in files or not p.exists() or sha256_file(p) != files[rel]:
                return False
        return True

    def record(self, stage: str, key: str, outputs, seconds: float, reused: bool):
        outputs = sorted(outputs)
        for rel in outputs:
            self.manifest["files"][rel] = sha256_file(self.out / rel)
        self.manifest["stages"][stage] = {"key": key, "outputs": outputs}
        self.manifest["timings_s"][stage] = {"seconds": round(seconds, 3), "reused": reused}
        self.write_manifest()

    def write_manifest(self):
        (self.out / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True))


def _organ_name(o: OrganConfig, mask: LabelMask) -> str:
    return o.name or mask.label_names.get(o.label) or f"label{o.label}"


# -- stages ------------------------------------------------------------------

def _stage_inputs(r: _Run):
    cfg = r.cfg
    if cfg.phantom is not None:
        spec = (standard_phantom(cfg.phantom, cfg.phantom_scale) if isinstance(cfg.phantom, str)
                else PhantomSpec.from_json(cfg.phantom))
        if isinstance(cfg.phantom, dict) and cfg.phantom_scale != 1.0:
            spec = spec.scaled(cfg.phantom_scale)
        key = _hash({"phantom": spec.to_json()})
    else:
        key = _hash({"volume": sha256_file(cfg.volume), "mask": sha256_file(cfg.mask),
                     "dose": sha256_file(cfg.dose) if cfg.dose else None})
    outputs = ["input_volume.nii", "input_labels.nii"]
    has_dose = cfg.phantom is not None or cfg.dose is not None
    if has_dose:
        outputs.append("input_dose.nii")
    t0 = time.perf_counter()
    reused = r.reusable("inputs", key)
    if not reused:
        if cfg.phantom is not None:
            ph = make_phantom(spec)
            vol, mask, dose = ph.intensity, ph.mask, ph.dose
            (r.out / "phantom.json").write_text(json.dumps(ph.descriptors, indent=2, sort_keys=True))
            outputs.append("phantom.json")
        else:
            vol = read_nifti(cfg.volume, INTENSITY)
            mask = read_nifti(cfg.mask, "labels")
            dose = read_nifti(cfg.dose, DOSE_GRAY) if cfg.dose else None
        write_nifti(vol, r.out / "input_volume.nii")
        write_nifti(mask, r.out / "input_labels.nii")
        if dose is not None:
            write_nifti(dose, r.out / "input_dose.nii")
    elif (r.out / "phantom.json").exists() and cfg.phantom is not None:
        outputs.append("phantom.json")
    # downstream always works on the on-disk (float32) inputs
    vol = read_nifti(r.out / "input_volume.nii", INTENSITY)
    mask = read_nifti(r.out / "input_labels.nii", "labels")
    dose = read_nifti(r.out / "input_dose.nii", DOSE_GRAY) if has_dose else None
    for o in cfg.organs:
        if not (mask.labels == o.label).any():
            raise StageError("inputs", o.name or str(o.label), f"label {o.label} not present in the mask")
    r.state.update(volume=vol, mask=mask, dose=dose)
    r.record("inputs", key, outputs, time.perf_counter() - t0, reused)
    return key


def _stage_surfaces(r: _Run, up: str):
    cfg, mask = r.cfg, r.state["mask"]
    # wave parameters do not affect the surfaces, so they stay out of the key
    geometry = [{k: v for k, v in o.to_json().items() if k != "wave"} for o in cfg.organs]
    key = _hash({"up": up, "organs": geometry, "stride": cfg.keypoint_stride})
    outputs = ["surfaces.json", "keypoints.json"]
    t0 = time.perf_counter()
    reused = r.reusable("surfaces", key)
    if reused:
        doc = json.loads((r.out / "surfaces.json").read_text())
        surfaces = [TubeSurface.from_dict(o["surface"]) for o in doc["organs"]]
        keys = KeypointSet.from_json(json.loads((r.out / "keypoints.json").read_text()))
    else:
        entries, surfaces, parts = [], [], []
        for o in cfg.organs:
            name = _organ_name(o, mask)
            try:
                c, s = extract_surface(mask, o.label, o.endpoints, o.n_rays)
            except (ValueError, RuntimeError) as exc:
                raise StageError("surfaces", name, str(exc)) from exc
            surfaces.append(s)
            parts.append(keypoints_from_surface(s, o.label).subset(cfg.keypoint_stride))
            entries.append({"label": o.label, "name": name, "centerline": c.to_dict(),
                            "surface": s.to_dict()})
        keys = KeypointSet.concat(parts)
        (r.out / "surfaces.json").write_text(json.dumps({"organs": entries}))
        (r.out / "keypoints.json").write_text(json.dumps(keys.to_json()))
    r.state.update(surfaces=surfaces, keypoints=keys)
    r.record("surfaces", key, outputs, time.perf_counter() - t0, reused)
    return key


def _phase_files(n: int, stem: str) -> list:
    return [f"{stem}_{k:02d}.nii" for k in range(n)]


def _stage_fields(r: _Run, up: str):
    cfg, mask = r.cfg, r.state["mask"]
    params = cfg.organ_params()
    key = _hash({"up": up, "params": [p.to_json() for p in params]})
    n = cfg.n_phases
    outputs = _phase_files(n, "gt_push") + _phase_files(n, "gt_pull") + ["fields.json"]
    t0 = time.perf_counter()
    reused = r.reusable("fields", key)
    model = MotionModel(mask, tuple(o.label for o in cfg.organs), tuple(r.state["surfaces"]),
                        region_margin(mask.geometry, params))
    if not reused:
        reports = []
        for k in range(n):
            push = model.field_from_values(model.phase_values(params, k)).as_float32()
            try:
                pull, rep = invert(push, workers=cfg.workers)
            except RuntimeError as exc:
                raise StageError("fields", None, f"phase {k}: {exc}") from exc
            write_nifti(push, r.out / f"gt_push_{k:02d}.nii")
            write_nifti(pull, r.out / f"gt_pull_{k:02d}.nii")
            reports.append({"phase": k, **rep.to_json()})
        (r.out / "fields.json").write_text(json.dumps(
            {"margin_mm": model.margin_mm, "inversion": reports}, indent=2, sort_keys=True))
    r.state.update(model=model, params=params)
    r.record("fields", key, outputs, time.perf_counter() - t0, reused)
    return key


def _load_push(r: _Run, k: int) -> VectorField:
    return read_vector_field(r.out / f"gt_push_{k:02d}.nii", FORWARD_PUSH)


def _load_pull(r: _Run, k: int) -> VectorField:
    return read_vector_field(r.out / f"gt_pull_{k:02d}.nii", BACKWARD_PULL)


def _stage_synthesis(r: _Run, up: str):
    cfg = r.cfg
    n = cfg.n_phases
    key = _hash({"up": up})
    outputs = _phase_files(n, "phase") + _phase_files(n, "mask")
    t0 = time.perf_counter()
    reused = r.reusable("synthesis", key)
    if not reused:
        vol, mask = r.state["volume"], r.state["mask"]
        for k in range(n):
            pull = _load_pull(r, k)
            write_nifti(warp_pull(vol, pull, workers=cfg.workers, edge=True),
                        r.out / f"phase_{k:02d}.nii")
            write_nifti(warp_labels_nearest(mask, pull), r.out / f"mask_{k:02d}.nii")
    r.record("synthesis", key, outputs, time.perf_counter() - t0, reused)
    return key


def _max_phase(r: _Run) -> int:
    seqs = synth_phases(list(zip(r.state["surfaces"], r.state["params"])))
    return max_deformation_phase(seqs)


def _registered_phases(r: _Run) -> list:
    return list(range(r.cfg.n_phases)) if r.cfg.register_phases == "all" else [_max_phase(r)]


def _stage_registration(r: _Run, up: str):
    cfg = r.cfg
    phases = _registered_phases(r)
    key = _hash({"up": up, "methods": list(cfg.methods), "phases": phases,
                 "params": cfg.reg_params.to_json()})
    outputs = [f"reg_{m}_{k:02d}.nii" for m in cfg.methods for k in phases]
    t0 = time.perf_counter()
    reused = r.reusable("registration", key)
    if not reused:
        static = r.state["volume"]
        for k in phases:
            fixed = read_nifti(r.out / f"phase_{k:02d}.nii", INTENSITY)
            for m in cfg.methods:
                try:
                    u = register(m, fixed, static, cfg.reg_params)
                except (ValueError, RuntimeError) as exc:
                    raise StageError("registration", None, f"{m}, phase {k}: {exc}") from exc
                write_nifti(u, r.out / f"reg_{m}_{k:02d}.nii")
    r.state.update(reg_phases=phases)
    r.record("registration", key, outputs, time.perf_counter() - t0, reused)
    return key


def _summary(values) -> Summary:
    return Summary.of(values)


def _stage_metrics(r: _Run, up: str):
    cfg = r.cfg
    mask, dose, keys = r.state["mask"], r.state["dose"], r.state["keypoints"]
    phases = r.state["reg_phases"]
    m = _max_phase(r)
    key = _hash({"up": up, "floor": cfg.dose_floor_gy, "max_phase": m})
    outputs = ["report.json"]
    t0 = time.perf_counter()
    reused = r.reusable("metrics", key)
    if reused:
        report = json.loads((r.out / "report.json").read_text())
        outputs = r.previous["stages"]["metrics"]["outputs"]
        r.record("metrics", key, outputs, time.perf_counter() - t0, True)
        return key, report

    geo = mask.geometry
    names = {o.label: _organ_name(o, mask) for o in cfg.organs}
    rep = MetricReport()

    # ground-truth statistics over all phases
    per_phase = {nm: [] for nm in names.values()}
    body = r.state["volume"].values > r.state["volume"].values.min()
    for k in range(cfg.n_phases):
        push = _load_push(r, k)
        mag = push.magnitude()
        for lab, nm in names.items():
            om = mask.binary(lab)
            _, js = jacobian_log(push, om)
            per_phase[nm].append({"phase": k, "mean_mm": float(mag[om].mean()),
                                  "sd_mm": float(mag[om].std()), "max_mm": float(mag[om].max()),
                                  "log_jacobian_mean": js.mean, "log_jacobian_sd": js.sd,
                                  "foldings": js.foldings})
    rep.phases = per_phase
    push_m = _load_push(r, m)
    for lab, nm in names.items():
        om = mask.binary(lab)
        _, js = jacobian_log(push_m, om)
        rep.ground_truth[nm] = OrganMetrics(
            displacement=_summary(push_m.magnitude()[om]), log_jacobian_mean=js.mean,
            log_jacobian_sd=js.sd, foldings=sum(p["foldings"] for p in per_phase[nm]))
    if body.any():
        rep.body_displacement = _summary(push_m.magnitude()[body])

    # candidates: the unregistered baseline plus each registration method
    zero = VectorField(geo, np.zeros(geo.dims + (3,)), BACKWARD_PULL)
    cands = {"none": {k: zero for k in phases}}
    for meth in cfg.methods:
        cands[meth] = {k: read_vector_field(r.out / f"reg_{meth}_{k:02d}.nii", BACKWARD_PULL)
                       for k in phases}
    eval_phase = m if m in phases else phases[0]
    gt_eval = _load_pull(r, eval_phase)
    push_eval = _load_push(r, eval_phase)
    mask_eval = read_nifti(r.out / f"mask_{eval_phase:02d}.nii", "labels")
    accum_gt = None
    if dose is not None:
        accum_gt = accumulate_dose(dose, [_load_pull(r, k) for k in phases], cfg.workers)
        # DWE is taken over the organ as it appears in any of the accumulated phases
        phase_labels = [read_nifti(r.out / f"mask_{k:02d}.nii", "labels").labels for k in phases]
        organ_union = {lab: np.any([pl == lab for pl in phase_labels], axis=0) for lab in names}
    dose_eval = warp_pull(dose, gt_eval, workers=cfg.workers, edge=True) if dose is not None else None
    mid = int(np.rint(np.mean(np.argwhere(mask_eval.labels > 0), axis=0)[2])) if (mask_eval.labels > 0).any() \
        else geo.dims[2] // 2
    for meth, fields in cands.items():
        u = fields[eval_phase]
        t_stats = tre(keys, push_eval, u, cfg.workers)
        warped = warp_labels_nearest(mask, u)
        accum = accumulate_dose(dose, [fields[k] for k in phases], cfg.workers) if dose is not None else None
        for lab, nm in names.items():
            a, b = warped.binary(lab), mask_eval.binary(lab)
            _, js = jacobian_log(u, b)
            om = OrganMetrics(tre=t_stats.get(lab), dsc=dsc(a, b),
                              hd95=hd95(a, b, geo.spacing) if a.any() and b.any() else None,
                              displacement=_summary(u.magnitude()[b]), log_jacobian_mean=js.mean,
                              log_jacobian_sd=js.sd, foldings=js.foldings)
            if accum is not None:
                try:
                    om.dwe_percent = dwe(accum, accum_gt, organ_union[lab], cfg.dose_floor_gy)
                except ValueError:
                    om.dwe_percent = None
            rep.organs.setdefault(nm, {})[meth] = om
        err = error_map(u, gt_eval)
        motion_rows = rmse_binned(err, ScalarGrid(geo, gt_eval.magnitude()), step=1.0,
                                  mask=body if body.any() else None)
        rep.tables[f"{meth}_motion"] = motion_rows
        (r.out / f"rmse_{meth}_motion.csv").write_text(rows_to_csv(motion_rows))
        outputs.append(f"rmse_{meth}_motion.csv")
        if dose_eval is not None:
            dose_rows = rmse_binned(err, dose_eval, step=10.0, mask=body if body.any() else None)
            rep.tables[f"{meth}_dose"] = dose_rows
            (r.out / f"rmse_{meth}_dose.csv").write_text(rows_to_csv(dose_rows))
            outputs.append(f"rmse_{meth}_dose.csv")
        render_heatmap(err, 2, mid, r.out / f"error_{meth}.ppm", "heat", 0.0,
                       max(float(push_m.magnitude().max()), 1e-6))
        outputs += [f"error_{meth}.ppm", f"error_{meth}.legend.txt"]
    render_heatmap(ScalarGrid(geo, gt_eval.magnitude()), 2, mid, r.out / "gt_magnitude.ppm", "viridis")
    outputs += ["gt_magnitude.ppm", "gt_magnitude.legend.txt"]

    report = rep.to_json()
    report["max_phase"] = m
    report["evaluated_phase"] = eval_phase
    report["dose_phases"] = phases
    (r.out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    r.record("metrics", key, outputs, time.perf_counter() - t0, False)
    return key, report


def run(config: RunConfig, until: str = "metrics") -> Bundle:
    """Execute the stages up to ``until``; reuse any stage whose key and files are unchanged."""
    if until not in STAGES:
        raise ValueError(f"unknown stage {until!r}; choose from {STAGES}")
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mpath = out / "manifest.json"
    previous = json.loads(mpath.read_text()) if mpath.exists() else {}
    cfg_json = config.to_json()
    cfg_json_no_out = {k: v for k, v in cfg_json.items() if k != "out_dir"}
    r = _Run(config, out, previous)
    r.manifest = {"config": cfg_json, "config_sha256": _hash(cfg_json_no_out), "files": {},
                  "stages": {}, "timings_s": {}, "summary": {}}
    t_all = time.perf_counter()
    steps = [_stage_inputs, _stage_surfaces, _stage_fields, _stage_synthesis, _stage_registration]
    k, report = None, None
    for name, fn in zip(STAGES, steps):
        k = fn(r) if k is None else fn(r, k)
        if name == until:
            break
    else:
        _, report = _stage_metrics(r, k)

    if report is not None:
        names = [_organ_name(o, r.state["mask"]) for o in config.organs]
        r.manifest["summary"] = {
            "phase_volumes": config.n_phases,
            "max_phase": report["max_phase"],
            "max_displacement_mm": {nm: max(p["max_mm"] for p in report["phases"][nm]) for nm in names},
            "foldings": {nm: sum(p["foldings"] for p in report["phases"][nm]) for nm in names},
        }
    # every file in the directory is listed, including leftovers from earlier runs
    for p in sorted(out.rglob("*")):
        rel = p.relative_to(out).as_posix()
        if p.is_file() and rel != "manifest.json" and rel not in r.manifest["files"]:
            r.manifest["files"][rel] = sha256_file(p)
    r.manifest["timings_s"]["total"] = {"seconds": round(time.perf_counter() - t_all, 3)}
    r.write_manifest()
    return Bundle(out, r.manifest, report)
