"""Registration accuracy against phantom texture (amplitude, correlation length).

Synthesizes the maximum-displacement phase of a phantom for each texture
setting and reports zero-field, Horn-Schunck and demons TRE and DSC.

    python3 scripts/texture_scan.py --textures 0.1:8 0.3:3 --scale 1
"""
import argparse
import dataclasses
import time

import numpy as np

from gimotion.grid import BACKWARD_PULL, VectorField, warp_labels_nearest
from gimotion.metrics import dsc, keypoints_from_surface, tre
from gimotion.motion import STOMACH
from gimotion.phantom import make_phantom, standard_phantom
from gimotion.registration import RegParams, register
from gimotion.simulate import build_model, synth_frame


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--phantom", default="P-A")
    ap.add_argument("--scale", type=float, default=1.0)
    ap.add_argument("--textures", nargs="+", default=["0.1:8", "0.1:4", "0.3:3"],
                    help="amplitude:sigma_mm pairs")
    ap.add_argument("--stride", type=int, default=4, help="keypoint subsampling")
    a = ap.parse_args()
    base = standard_phantom(a.phantom, a.scale)
    model = push = keys = None
    for item in a.textures:
        amp, sig = (float(v) for v in item.split(":"))
        ph = make_phantom(dataclasses.replace(base, texture_amplitude=amp, texture_sigma_mm=sig))
        if model is None:   # geometry does not depend on texture
            model = build_model(ph.mask, [1], [STOMACH])
            fields = model.phase_fields([STOMACH])
            k = int(np.argmax([f.magnitude().max() for f in fields]))
            push = fields[k].as_float32()
            keys = keypoints_from_surface(model.surfaces[0], 1).subset(a.stride)
        frame = synth_frame(ph.intensity, ph.mask, push)
        zero = VectorField.zeros(push.geometry, BACKWARD_PULL)
        t0 = tre(keys, push, zero)[1].mean
        d0 = dsc(ph.mask.labels > 0, frame.mask.labels > 0)
        print(f"texture {amp}/{sig} mm: none TRE {t0:.3f} DSC {d0:.3f}")
        for meth in ("hsof", "demons"):
            start = time.perf_counter()
            u = register(meth, frame.image, ph.intensity, RegParams())
            t = tre(keys, push, u)[1].mean
            d = dsc(warp_labels_nearest(ph.mask, u).labels > 0, frame.mask.labels > 0)
            print(f"  {meth:>6}: TRE {t:.3f} ({t / t0:.1%})  DSC {d:.3f}  "
                  f"{time.perf_counter() - start:.0f} s", flush=True)


if __name__ == "__main__":
    main()
