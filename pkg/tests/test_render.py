import numpy as np
import pytest

from gimotion.grid import GridGeometry, ScalarGrid
from gimotion.render import colorize, read_ppm, render_heatmap, slice_of, write_ppm


def test_colorize_endpoints_and_clipping():
    v = np.array([[-1.0, 0.0, 0.5, 1.0, 2.0]])
    rgb = colorize(v, 0.0, 1.0, "gray")
    np.testing.assert_array_equal(rgb[0, :, 0], [0, 0, 128, 255, 255])
    assert colorize(v, 1.0, 1.0).max() == 0
    with pytest.raises(ValueError):
        colorize(v, 0, 1, "rainbow")


def test_ppm_roundtrip(tmp_path, rng):
    rgb = rng.integers(0, 256, (7, 5, 3)).astype(np.uint8)
    write_ppm(rgb, tmp_path / "a.ppm")
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), rgb)


def test_heatmap_with_legend(tmp_path):
    geo = GridGeometry((6, 5, 4))
    vals = np.arange(120, dtype=float).reshape(6, 5, 4)
    leg = render_heatmap(ScalarGrid(geo, vals), 2, 1, tmp_path / "h.ppm", "viridis")
    img = read_ppm(tmp_path / "h.ppm")
    assert img.shape == (6, 5, 3)
    assert leg["vmin"] == vals[:, :, 1].min() and leg["vmax"] == vals[:, :, 1].max()
    text = (tmp_path / "h.legend.txt").read_text()
    assert "ramp: viridis" in text and "stop" in text
    with pytest.raises(IndexError):
        slice_of(ScalarGrid(geo, vals), 2, 4)
