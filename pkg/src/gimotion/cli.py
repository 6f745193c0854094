"""Command-line interface. Errors go to stderr as one JSON object; the exit code is nonzero."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .grid import BACKWARD_PULL, FORWARD_PUSH, INTENSITY, LabelMask, ScalarGrid


def _endpoints(values):
    if values is None:
        return None
    if len(values) != 2:
        raise ValueError("--endpoints takes exactly two voxel indices, e.g. 10,20,30 40,50,60")
    return tuple(tuple(int(c) for c in v.split(",")) for v in values)


def _wave(args):
    from .motion import WaveParams
    if args.params:
        return WaveParams.from_json(json.loads(Path(args.params).read_text()))
    return WaveParams(args.amplitude, args.speed, args.wavelength, args.alpha_s, args.alpha_t,
                      args.phases)


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path in (None, "-"):
        print(text)
    else:
        Path(path).write_text(text)


def cmd_phantom(args):
    from .phantom import PhantomSpec, make_phantom, standard_phantom
    if args.spec:
        spec = PhantomSpec.from_json(json.loads(Path(args.spec).read_text()))
        if args.scale != 1.0:
            spec = spec.scaled(args.scale)
    else:
        spec = standard_phantom(args.standard, args.scale)
    make_phantom(spec).write(args.out)


def cmd_skeleton(args):
    from .nifti import read_nifti, write_nifti
    from .skeleton import thin
    mask = read_nifti(args.mask, "labels")
    skel = thin(mask, args.label)
    write_nifti(LabelMask(mask.geometry, skel.astype(np.int32), {1: "skeleton"}), args.out)


def cmd_centerline(args):
    from .nifti import read_nifti
    from .skeleton import boundary_depth, build_graph, longest_path, thin
    mask = read_nifti(args.mask, "labels")
    ep = _endpoints(args.endpoints)
    depth = None if ep is not None else boundary_depth(mask, args.label)
    c = longest_path(build_graph(thin(mask, args.label)), mask.geometry, ep, depth=depth)
    _write_json({"length_mm": c.length, **c.to_dict()}, args.out)


def cmd_fit_surface(args):
    from .nifti import read_nifti
    from .simulate import extract_surface
    from .skeleton import Centerline
    from .surface import cast_sections, default_n_sections, fit_surface, resample_centerline
    mask = read_nifti(args.mask, "labels")
    if args.centerline:
        c = Centerline.from_dict(json.loads(Path(args.centerline).read_text()))
        c = resample_centerline(c, args.sections or default_n_sections(c.length))
        s = fit_surface(cast_sections(mask, args.label, c, args.rays))
    else:
        c, s = extract_surface(mask, args.label, _endpoints(args.endpoints), args.rays, args.sections)
    _write_json({"centerline": c.to_dict(), "surface": s.to_dict()}, args.out)


def _organs(args):
    from .pipeline import OrganConfig
    return (OrganConfig(args.label, args.name, _wave(args), _endpoints(args.endpoints), args.rays),)


def cmd_synth(args):
    from .pipeline import RunConfig, run
    kw = {"phantom": args.phantom} if args.phantom else {"volume": args.volume, "mask": args.mask}
    cfg = RunConfig(out_dir=args.out, organs=_organs(args), n_phases=args.phases,
                    workers=args.workers, dose=args.dose, **kw)
    run(cfg, until="synthesis")


def cmd_register(args):
    from .nifti import read_nifti, write_nifti
    from .registration import RegParams, register
    params = RegParams.from_json(Path(args.params).read_text()) if args.params else RegParams()
    fixed = read_nifti(args.fixed, INTENSITY)
    moving = read_nifti(args.moving, INTENSITY)
    write_nifti(register(args.method, fixed, moving, params), args.out)


def cmd_evaluate(args):
    """Score an external backward_pull field against a bundle's ground truth at one phase."""
    from .field import jacobian_log
    from .grid import warp_labels_nearest
    from .metrics import KeypointSet, dsc, hd95, tre
    from .nifti import read_nifti, read_vector_field
    b = Path(args.bundle)
    k = args.phase
    cand = read_vector_field(args.candidate, BACKWARD_PULL)
    push = read_vector_field(b / f"gt_push_{k:02d}.nii", FORWARD_PUSH)
    static = read_nifti(b / "input_labels.nii", "labels")
    gt_mask = read_nifti(b / f"mask_{k:02d}.nii", "labels")
    keys = KeypointSet.from_json(json.loads((b / "keypoints.json").read_text())).subset(args.stride)
    warped = warp_labels_nearest(static, cand)
    out = {"phase": k, "organs": {}}
    t = tre(keys, push, cand)
    for lab in sorted(t):
        a, g = warped.binary(lab), gt_mask.binary(lab)
        _, js = jacobian_log(cand, g)
        out["organs"][str(lab)] = {
            "tre": asdict(t[lab]),
            "dsc": dsc(a, g), "hd95": hd95(a, g, static.geometry.spacing) if a.any() and g.any() else None,
            "log_jacobian_mean": js.mean, "foldings": js.foldings}
    _write_json(out, args.out)


def cmd_run(args):
    from .pipeline import RunConfig, run
    cfg = RunConfig.load(args.config)
    if args.out:
        cfg = RunConfig.from_json({**cfg.to_json(), "out_dir": args.out})
    b = run(cfg)
    _write_json({"out_dir": str(b.out_dir), "summary": b.manifest.get("summary", {})}, None)


def cmd_render(args):
    from .nifti import read_nifti, read_vector_field
    from .render import render_heatmap
    try:
        grid = read_nifti(args.input)
    except Exception:
        f = read_vector_field(args.input)
        grid = ScalarGrid(f.geometry, f.magnitude(), INTENSITY)
    if isinstance(grid, LabelMask):
        grid = ScalarGrid(grid.geometry, grid.labels.astype(float), INTENSITY)
    render_heatmap(grid, args.axis, args.index, args.out, args.ramp, args.vmin, args.vmax)


def cmd_qa(args):
    from .motion import STOMACH, SearchBox
    from .nifti import read_nifti, read_vector_field
    from .qa import QaThresholds, qa_compare
    from .simulate import MotionModel, build_model
    mask = read_nifti(args.mask, "labels")
    files = sorted(Path(args.reference).glob(args.pattern))
    if not files:
        raise FileNotFoundError(f"no reference fields matching {args.pattern!r} in {args.reference}")
    ref = [read_vector_field(f, FORWARD_PUSH) for f in files]
    model = build_model(mask, [args.label], [STOMACH], [_endpoints(args.endpoints)])
    # the moving shell width: explicit, else as recorded by a pipeline run, else the stomach default
    margin = args.margin_mm
    meta = Path(args.reference) / "fields.json"
    if margin is None and meta.exists():
        margin = json.loads(meta.read_text()).get("margin_mm")
    if margin is not None:
        model = MotionModel(model.mask, model.labels, model.surfaces, float(margin), model.sigma)
    box = SearchBox.from_json(json.loads(Path(args.search_box).read_text())) if args.search_box else None
    times = None if args.dt is None else np.arange(len(ref)) * args.dt
    rep = qa_compare(ref, model, box, times, args.per_phase,
                     QaThresholds(args.threshold_mm, args.threshold_logj), n_phases=len(ref))
    _write_json(rep.to_json(), args.out)
    if not rep.passed:
        print(json.dumps({"qa": "failed", "summary": rep.to_json()["summary"]}), file=sys.stderr)
        return 3
    return 0


def _wave_args(p):
    p.add_argument("--params", help="wave parameter JSON (overrides the flags below)")
    p.add_argument("--amplitude", type=float, default=16.0)
    p.add_argument("--speed", type=float, default=5.0)
    p.add_argument("--wavelength", type=float, default=55.0)
    p.add_argument("--alpha-s", type=float, default=0.0)
    p.add_argument("--alpha-t", type=float, default=0.0)
    p.add_argument("--phases", type=int, default=21)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gimotion", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write an analytic phantom")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--spec")
    g.add_argument("--standard", choices=["P-A", "P-B"])
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_phantom)

    p = sub.add_parser("skeleton", help="thin one organ label")
    p.add_argument("--mask", required=True)
    p.add_argument("--label", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_skeleton)

    for name, fn, hlp in (("centerline", cmd_centerline, "longest medial path as JSON"),
                          ("fit-surface", cmd_fit_surface, "NURBS tube surface as JSON")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--mask", required=True)
        p.add_argument("--label", type=int, required=True)
        p.add_argument("--endpoints", nargs="+", metavar="X,Y,Z")
        p.add_argument("--out", default="-")
        if name == "fit-surface":
            p.add_argument("--centerline")
            p.add_argument("--rays", type=int, default=16)
            p.add_argument("--sections", type=int)
        p.set_defaults(fn=fn)

    p = sub.add_parser("synth", help="ground-truth fields and 4D images")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--phantom", choices=["P-A", "P-B"])
    g.add_argument("--volume")
    p.add_argument("--mask")
    p.add_argument("--dose")
    p.add_argument("--label", type=int, default=1)
    p.add_argument("--name", default="")
    p.add_argument("--endpoints", nargs="+", metavar="X,Y,Z")
    p.add_argument("--rays", type=int, default=16)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    _wave_args(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("register", help="Horn-Schunck or demons registration")
    p.add_argument("--method", choices=["hsof", "demons"], required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--params")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_register)

    p = sub.add_parser("evaluate", help="score an external field against a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--candidate", required=True)
    p.add_argument("--phase", type=int, required=True)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--out", default="-")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("run", help="full pipeline from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("render", help="slice heatmap as PPM")
    p.add_argument("--input", required=True)
    p.add_argument("--axis", type=int, default=2)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--ramp", default="heat")
    p.add_argument("--vmin", type=float)
    p.add_argument("--vmax", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("qa", help="wave-fit self-consistency check")
    p.add_argument("--reference", required=True, help="directory of forward_push fields")
    p.add_argument("--pattern", default="gt_push_*.nii")
    p.add_argument("--mask", required=True)
    p.add_argument("--label", type=int, default=1)
    p.add_argument("--endpoints", nargs="+", metavar="X,Y,Z")
    p.add_argument("--search-box")
    p.add_argument("--dt", type=float, help="seconds between reference phases")
    p.add_argument("--per-phase", action="store_true")
    p.add_argument("--margin-mm", type=float, help="width of the moving shell around the organ")
    p.add_argument("--threshold-mm", type=float, default=0.8)
    p.add_argument("--threshold-logj", type=float, default=0.01)
    p.add_argument("--out", default="-")
    p.set_defaults(fn=cmd_qa)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        code = args.fn(args)
    except Exception as exc:    # report every failure as machine-readable JSON
        err = exc.to_json() if hasattr(exc, "to_json") else {
            "error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 2
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
