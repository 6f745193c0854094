import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gimotion.grid import (BACKWARD_PULL, FORWARD_PUSH, ConventionError, GridGeometry, LabelMask,
                           ScalarGrid, VectorField, run_chunked, sample_trilinear, sample_vectors,
                           warp_labels_nearest, warp_pull)

spacings = st.tuples(*[st.floats(0.3, 3.0)] * 3)
origins = st.tuples(*[st.floats(-50, 50)] * 3)


def test_geometry_validation():
    with pytest.raises(ValueError):
        GridGeometry((0, 4, 4))
    with pytest.raises(ValueError):
        GridGeometry((4, 4, 4), (1.0, -1.0, 1.0))
    with pytest.raises(ValueError):
        GridGeometry((4, 4))
    g = GridGeometry([4, 5, 6], [1, 2, 3])
    assert g.dims == (4, 5, 6) and g.spacing == (1.0, 2.0, 3.0)
    assert GridGeometry.from_dict(g.to_dict()) == g


@given(spacings, origins, st.lists(st.floats(-100, 100), min_size=3, max_size=3))
def test_world_voxel_roundtrip(spacing, origin, p):
    g = GridGeometry((8, 8, 8), spacing, origin)
    np.testing.assert_allclose(g.world(g.voxel(p)), p, atol=1e-9)


def test_world_grid_matches_world(geo16):
    wg = geo16.world_grid()
    np.testing.assert_array_equal(wg[3, 4, 5], geo16.world([3, 4, 5]))


def test_containers_are_immutable_and_validated(geo16):
    arr = np.zeros(geo16.dims)
    s = ScalarGrid(geo16, arr)
    arr[0, 0, 0] = 5
    assert s.values[0, 0, 0] == 0
    with pytest.raises(ValueError):
        s.values[0, 0, 0] = 1
    with pytest.raises(ValueError):
        ScalarGrid(geo16, np.full(geo16.dims, np.nan))
    with pytest.raises(ValueError):
        ScalarGrid(geo16, np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        LabelMask(geo16, np.full(geo16.dims, -1))
    with pytest.raises(ValueError):
        VectorField(geo16, np.zeros(geo16.dims + (3,)), "sideways")
    m = LabelMask(geo16, np.ones(geo16.dims, int), {})
    assert m.label_names == {1: "label_1"}
    assert m.label_id("label_1") == 1
    with pytest.raises(KeyError):
        m.label_id("liver")


@settings(max_examples=40)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4),
       st.lists(st.floats(0, 1), min_size=3, max_size=3))
def test_trilinear_reproduces_affine_functions(coef, frac):
    g = GridGeometry((6, 7, 8), (1.0, 2.0, 0.5), (1.0, -2.0, 3.0))
    w = g.world_grid()
    vals = coef[0] + w @ np.asarray(coef[1:])
    grid = ScalarGrid(g, vals)
    p = g.world(np.asarray(frac) * (np.asarray(g.dims) - 1))
    assert sample_trilinear(grid, p) == pytest.approx(coef[0] + p @ np.asarray(coef[1:]), abs=1e-9)


def test_trilinear_outside_is_background(geo16):
    grid = ScalarGrid(geo16, np.ones(geo16.dims))
    assert sample_trilinear(grid, geo16.world([-0.5, 0, 0]), background=-7.0) == -7.0
    assert sample_trilinear(grid, geo16.world([15, 13, 11])) == 1.0


def test_integer_shift_warp_is_exact(geo16, rng):
    vals = rng.standard_normal(geo16.dims)
    shift = np.array([2, -1, 3])
    u = np.broadcast_to(shift * np.asarray(geo16.spacing), geo16.dims + (3,))
    out = warp_pull(ScalarGrid(geo16, vals), VectorField(geo16, u, BACKWARD_PULL))
    np.testing.assert_array_equal(out.values[0:14, 1:14, 0:9], vals[2:16, 0:13, 3:12])
    assert np.all(out.values[14:] == 0.0)
    edged = warp_pull(ScalarGrid(geo16, vals), VectorField(geo16, u, BACKWARD_PULL), edge=True)
    np.testing.assert_array_equal(edged.values[15, 5, 0], vals[15, 4, 3])


def test_warp_needs_pull_fields(geo16):
    with pytest.raises(ConventionError):
        warp_pull(ScalarGrid(geo16, np.zeros(geo16.dims)), VectorField.zeros(geo16, FORWARD_PUSH))
    with pytest.raises(ConventionError):
        warp_labels_nearest(LabelMask(geo16, np.zeros(geo16.dims, int)), VectorField.zeros(geo16))


def test_nearest_label_warp_rounds(geo16):
    lab = np.zeros(geo16.dims, int)
    lab[5, 5, 5] = 2
    u = np.zeros(geo16.dims + (3,))
    u[..., 0] = 0.6 * geo16.spacing[0]     # rounds to one voxel
    out = warp_labels_nearest(LabelMask(geo16, lab, {2: "x"}), VectorField(geo16, u, BACKWARD_PULL))
    assert out.labels[4, 5, 5] == 2 and out.labels.sum() == 2
    assert out.label_names == {2: "x"}


@given(st.integers(0, 300), st.integers(1, 4), st.integers(1, 50))
def test_run_chunked_independent_of_workers(n, workers, chunk):
    x = np.arange(n, dtype=float)
    out = run_chunked(lambda s: x[s] ** 2, n, workers, chunk)
    np.testing.assert_array_equal(out, x ** 2)


def test_sample_vectors_workers_agree(geo16, rng):
    f = VectorField(geo16, rng.standard_normal(geo16.dims + (3,)))
    pts = geo16.world(rng.uniform(0, 10, (500, 3)))
    np.testing.assert_array_equal(sample_vectors(f, pts, 1), sample_vectors(f, pts, 3))
