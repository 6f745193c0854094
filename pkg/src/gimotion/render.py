"""Slice heatmaps as binary PPM (P6) with a plain-text legend sidecar."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .grid import ScalarGrid

# piecewise-linear colour ramps: (position, (r, g, b))
RAMPS = {
    "gray": [(0.0, (0, 0, 0)), (1.0, (255, 255, 255))],
    "heat": [(0.0, (0, 0, 0)), (1 / 3, (255, 0, 0)), (2 / 3, (255, 255, 0)), (1.0, (255, 255, 255))],
    "viridis": [(0.0, (68, 1, 84)), (0.25, (59, 82, 139)), (0.5, (33, 145, 140)),
                (0.75, (94, 201, 98)), (1.0, (253, 231, 37))],
}


def colorize(values: np.ndarray, vmin: float, vmax: float, ramp: str = "heat") -> np.ndarray:
    """Map values to uint8 RGB with a linear ramp over [vmin, vmax] (clipped)."""
    try:
        stops = RAMPS[ramp]
    except KeyError:
        raise ValueError(f"unknown ramp {ramp!r}; choose from {sorted(RAMPS)}") from None
    span = vmax - vmin
    t = np.zeros_like(values, float) if span <= 0 else np.clip((values - vmin) / span, 0.0, 1.0)
    pos = np.array([s[0] for s in stops])
    cols = np.array([s[1] for s in stops], float)
    rgb = np.stack([np.interp(t, pos, cols[:, c]) for c in range(3)], axis=-1)
    return np.rint(rgb).astype(np.uint8)


def slice_of(grid: ScalarGrid, axis: int, index: int) -> np.ndarray:
    if axis not in (0, 1, 2):
        raise ValueError("axis must be 0, 1 or 2")
    n = grid.geometry.dims[axis]
    if not 0 <= index < n:
        raise IndexError(f"slice index {index} out of range [0, {n})")
    return np.take(grid.values, index, axis=axis)


def write_ppm(rgb: np.ndarray, path) -> None:
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts, pos = [], 0
    while len(parts) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        parts.append(data[pos:end])
        pos = end
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h, maxval = (int(p) for p in parts[1:])
    if maxval != 255:
        raise ValueError("only 8-bit PPM is supported")
    return np.frombuffer(data, np.uint8, count=w * h * 3, offset=pos + 1).reshape(h, w, 3)


def render_heatmap(grid: ScalarGrid, axis: int, index: int, out_path, ramp: str = "heat",
                   vmin: float | None = None, vmax: float | None = None) -> dict:
    """Write one slice as a P6 image; rows follow the first remaining axis.

    The range defaults to the slice min/max. Returns the legend, which is
    also written next to the image as ``<name>.legend.txt``.
    """
    sl = slice_of(grid, axis, index)
    lo = float(sl.min()) if vmin is None else float(vmin)
    hi = float(sl.max()) if vmax is None else float(vmax)
    out = Path(out_path)
    write_ppm(colorize(sl, lo, hi, ramp), out)
    legend = {"ramp": ramp, "vmin": lo, "vmax": hi, "axis": axis, "index": index,
              "kind": grid.kind}
    lines = [f"{k}: {v}" for k, v in legend.items()]
    lines += [f"stop {p:.4f} -> rgb{c}" for p, c in RAMPS[ramp]]
    out.with_suffix(".legend.txt").write_text("\n".join(lines) + "\n")
    return legend
