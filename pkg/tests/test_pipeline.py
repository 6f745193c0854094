import json

import numpy as np
import pytest

from gimotion.motion import WaveParams
from gimotion.nifti import read_nifti, read_vector_field
from gimotion.pipeline import (OrganConfig, RunConfig, StageError, run, sha256_file)
from gimotion.registration import RegParams

from conftest import small_tube_spec


def config(out, **kw):
    base = dict(out_dir=str(out), organs=(OrganConfig(1, "gut", WaveParams(6.0)),),
                phantom=small_tube_spec().to_json(), n_phases=5, methods=("demons",),
                reg_params=RegParams(levels=2, iterations=20), keypoint_stride=4)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    return run(config(tmp_path_factory.mktemp("run")))


def test_bundle_contents(bundle):
    out = bundle.out_dir
    for name in ["input_volume.nii", "input_labels.nii", "input_dose.nii", "surfaces.json",
                 "keypoints.json", "report.json", "rmse_none_motion.csv", "rmse_demons_dose.csv",
                 "error_demons.ppm", "error_demons.legend.txt", "gt_magnitude.ppm"]:
        assert (out / name).exists(), name
    for k in range(5):
        for stem in ("gt_push", "gt_pull", "phase", "mask"):
            assert (out / f"{stem}_{k:02d}.nii").exists()
    m = bundle.manifest
    assert m["summary"]["phase_volumes"] == 5
    assert set(m["stages"]) == {"inputs", "surfaces", "fields", "synthesis", "registration", "metrics"}
    for rel, digest in m["files"].items():
        assert sha256_file(out / rel) == digest
    assert "total" in m["timings_s"]


def test_report_values(bundle):
    rep = bundle.report
    gut = rep["organs"]["gut"]
    assert set(gut) == {"none", "demons"}
    assert 0.0 <= gut["none"]["dsc"] <= 1.0 and gut["none"]["tre"]["mean"] > 0
    assert rep["ground_truth"]["gut"]["foldings"] == 0
    assert len(rep["phases"]["gut"]) == 5
    # periodic sequence: the last phase repeats the first
    a = read_vector_field(bundle.out_dir / "gt_push_00.nii").vectors
    b = read_vector_field(bundle.out_dir / "gt_push_04.nii").vectors
    np.testing.assert_array_equal(a, b)


def test_rerun_reuses_every_stage(bundle):
    again = run(config(bundle.out_dir))
    assert all(again.manifest["timings_s"][s]["reused"] for s in again.manifest["stages"])
    assert again.manifest["files"] == bundle.manifest["files"]


def test_changed_stage_reruns_downstream(tmp_path):
    run(config(tmp_path, methods=()), until="synthesis")
    b = run(config(tmp_path, methods=()))
    t = b.manifest["timings_s"]
    assert t["inputs"]["reused"] and t["fields"]["reused"] and t["synthesis"]["reused"]
    c = run(config(tmp_path, methods=(), organs=(OrganConfig(1, "gut", WaveParams(4.0)),)))
    assert c.manifest["timings_s"]["surfaces"]["reused"] and not c.manifest["timings_s"]["fields"]["reused"]


def test_corrupted_file_is_regenerated(tmp_path):
    run(config(tmp_path, methods=()), until="fields")
    p = tmp_path / "gt_push_02.nii"
    raw = bytearray(p.read_bytes())
    raw[-1] ^= 0xFF
    p.write_bytes(bytes(raw))
    b = run(config(tmp_path, methods=()), until="fields")
    assert not b.manifest["timings_s"]["fields"]["reused"]


def test_missing_label_is_a_stage_error(tmp_path):
    cfg = config(tmp_path, organs=(OrganConfig(7, "liver"),))
    with pytest.raises(StageError) as ei:
        run(cfg)
    assert ei.value.to_json()["stage"] == "inputs"


def test_config_roundtrip_and_validation(tmp_path):
    cfg = config(tmp_path)
    doc = json.loads(json.dumps(cfg.to_json()))
    assert RunConfig.from_json(doc).to_json() == doc
    with pytest.raises(ValueError):
        RunConfig(out_dir=str(tmp_path), organs=(OrganConfig(1),))
    with pytest.raises(ValueError):
        config(tmp_path, register_phases="some")
    with pytest.raises(ValueError):
        run(cfg, until="nowhere")


def test_external_inputs(tmp_path, small_tube):
    small_tube.write(tmp_path / "in")
    cfg = RunConfig(out_dir=str(tmp_path / "out"), organs=(OrganConfig(1, wave=WaveParams(0.0)),),
                    volume=str(tmp_path / "in/intensity.nii"), mask=str(tmp_path / "in/labels.nii"),
                    n_phases=3)
    b = run(cfg)
    vol = read_nifti(tmp_path / "out/input_volume.nii").values
    for k in range(3):
        np.testing.assert_array_equal(read_nifti(tmp_path / f"out/phase_{k:02d}.nii").values, vol)
    assert b.report["organs"]["gut"]["none"]["dwe_percent"] is None
