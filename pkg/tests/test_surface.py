import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gimotion.simulate import extract_surface
from gimotion.surface import (TubeSurface, basis_matrix, cast_sections, circle_shrink_factor,
                              clamped_uniform_knots, default_n_sections, eval_shell, evaluate,
                              periodic_basis_matrix, resample_centerline)


def _naive_basis(knots, p, i, x):
    """Textbook recursive Cox-de Boor (right end handled by the caller)."""
    if p == 0:
        return 1.0 if knots[i] <= x < knots[i + 1] else 0.0
    a = 0.0 if knots[i + p] == knots[i] else (x - knots[i]) / (knots[i + p] - knots[i])
    b = 0.0 if knots[i + p + 1] == knots[i + 1] else (knots[i + p + 1] - x) / (knots[i + p + 1] - knots[i + 1])
    return a * _naive_basis(knots, p - 1, i, x) + b * _naive_basis(knots, p - 1, i + 1, x)


@settings(max_examples=30)
@given(st.integers(4, 12), st.integers(1, 3), st.floats(0.0, 0.999))
def test_basis_matches_recursive_definition(n, p, x):
    k = clamped_uniform_knots(n, p)
    got = basis_matrix(k, p, n, [x])[0]
    want = [_naive_basis(k, p, i, x) for i in range(n)]
    np.testing.assert_allclose(got, want, atol=1e-12)
    assert got.sum() == pytest.approx(1.0)


@given(st.integers(4, 24), st.floats(0.0, 1.0))
def test_periodic_basis_partition_of_unity(n, v):
    row = periodic_basis_matrix(n, 3, [v])[0]
    assert row.sum() == pytest.approx(1.0) and np.all(row >= -1e-15)
    np.testing.assert_allclose(periodic_basis_matrix(n, 3, [v + 1.0]), [row], atol=1e-12)


def test_clamped_ends_interpolate():
    n = 7
    k = clamped_uniform_knots(n, 3)
    B = basis_matrix(k, 3, n, [0.0, 1.0])
    np.testing.assert_allclose(B[0], np.eye(n)[0])
    np.testing.assert_allclose(B[1], np.eye(n)[-1])


def test_shrink_factor_of_regular_polygon():
    f16 = circle_shrink_factor(16)
    assert 0.97 < f16 < 1.0
    assert circle_shrink_factor(8) < f16


@pytest.fixture(scope="module")
def tube(small_tube):
    return extract_surface(small_tube.mask, 1)


def test_cast_radius_on_cylinder(tube, small_tube):
    c, s = tube
    radii = np.concatenate([sec.radii for sec in s.sections])
    # voxelized 8 mm tube at 1.5 mm spacing: boundary within about one voxel
    assert abs(np.median(radii) - 8.0) < 1.0
    axis = s.centers
    np.testing.assert_allclose(axis[:, 1:], 24.0, atol=1.0)
    assert s.n_sections == default_n_sections(c.length)


def test_surface_evaluation_and_shells(tube):
    _, s = tube
    # the p = 1 shell is the centerline curve, p = 0 the surface
    np.testing.assert_allclose(eval_shell(s, 0.4, 0.3, 1.0), s.centerline_points([0.4])[0])
    np.testing.assert_allclose(eval_shell(s, 0.4, 0.3, 0.0), evaluate(s, 0.4, 0.3))
    # clamped in u: the end curve passes through the mean of the end section ring (symmetric net)
    ring = s.evaluate_grid([0.0], np.arange(64) / 64)[0]
    assert np.linalg.norm(ring.mean(0) - s.centers[0]) < 0.5


def test_surface_roundtrip_and_translation(tube):
    _, s = tube
    back = TubeSurface.from_dict(s.to_dict())
    assert back.same_topology(s)
    np.testing.assert_array_equal(back.control_net, s.control_net)
    t = s.translated([1.0, -2.0, 0.5])
    u, v = [0.1, 0.5, 0.9], [0.0, 0.25]
    np.testing.assert_allclose(t.evaluate_grid(u, v), s.evaluate_grid(u, v) + [1.0, -2.0, 0.5], atol=1e-12)


def test_resample_is_uniform(tube):
    c, _ = tube
    r = resample_centerline(c, 20)
    d = np.diff(r.cumulative_arclength)
    np.testing.assert_allclose(d, d.mean(), rtol=0.05)
    with pytest.raises(ValueError):
        resample_centerline(c, 3)


def test_cast_sections_drops_points_outside(small_tube, tube):
    c, _ = tube
    from gimotion.skeleton import Centerline
    shifted = Centerline(c.points + [0, 30.0, 0], c.cumulative_arclength, c.tangents, c.normals, c.binormals)
    assert cast_sections(small_tube.mask, 1, shifted, 8) == []
