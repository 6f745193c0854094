import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gimotion.field import (FieldSamples, InversionError, dilate_region, fill_smooth, invert,
                            jacobian_determinant, jacobian_log, sample_correspondences, voxelize)
from gimotion.grid import (BACKWARD_PULL, FORWARD_PUSH, GridGeometry, VectorField, sample_vectors)


def _naive_fill(vectors, seeds, region, max_sweeps=200):
    """Reference Jacobi sweeps written with plain loops."""
    vals = np.where(seeds[..., None], vectors, 0.0)
    filled = seeds & region
    dims = filled.shape
    for _ in range(max_sweeps):
        updates = {}
        for idx in zip(*np.nonzero(region & ~filled)):
            acc, n = np.zeros(3), 0
            for a in range(3):
                for d in (-1, 1):
                    j = list(idx)
                    j[a] += d
                    if 0 <= j[a] < dims[a] and filled[tuple(j)]:
                        acc += vals[tuple(j)]
                        n += 1
            if n:
                updates[idx] = acc / n
        if not updates:
            break
        for idx, v in updates.items():
            vals[idx] = v
            filled[idx] = True
    return vals, filled


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_fill_matches_naive_sweeps(seed):
    rng = np.random.default_rng(seed)
    geo = GridGeometry((9, 8, 7))
    region = rng.random(geo.dims) < 0.8
    seeds = region & (rng.random(geo.dims) < 0.1)
    vec = rng.standard_normal(geo.dims + (3,))
    out, rep = fill_smooth(VectorField(geo, vec), seeds, region, sigma=0.0)
    want, filled = _naive_fill(vec, seeds, region)
    want[~region] = 0.0
    np.testing.assert_allclose(out.vectors, want, rtol=0, atol=1e-12)
    assert rep.unreached == int((region & ~filled).sum())


def test_fill_keeps_seeds_and_zero_outside(rng):
    geo = GridGeometry((12, 12, 12))
    region = np.zeros(geo.dims, bool)
    region[2:10, 2:10, 2:10] = True
    seeds = np.zeros(geo.dims, bool)
    seeds[5, 5, 5] = True
    vec = np.zeros(geo.dims + (3,))
    vec[5, 5, 5] = [1.0, 2.0, 3.0]
    out, _ = fill_smooth(VectorField(geo, vec), seeds, region, sigma=1.0)
    np.testing.assert_array_equal(out.vectors[5, 5, 5], [1.0, 2.0, 3.0])
    assert np.all(out.vectors[~region] == 0.0)
    np.testing.assert_allclose(out.vectors[region], [[1.0, 2.0, 3.0]] * int(region.sum()), atol=1e-12)


def test_falloff_scales_outside_core():
    geo = GridGeometry((20, 3, 3))
    region = np.ones(geo.dims, bool)
    core = np.zeros(geo.dims, bool)
    core[:5] = True
    vec = np.zeros(geo.dims + (3,))
    vec[:5, ..., 0] = 1.0
    out, _ = fill_smooth(VectorField(geo, vec), core, region, sigma=0.0, core=core, falloff_mm=10.0)
    x = out.vectors[:, 1, 1, 0]
    np.testing.assert_allclose(x[5:16], np.clip(1 - np.arange(1, 12) / 10.0, 0, 1), atol=1e-12)


def test_dilate_region_oracle():
    geo = GridGeometry((15, 12, 10), (1.0, 1.5, 2.0))
    b = np.zeros(geo.dims, bool)
    b[7, 6, 5] = True
    out = dilate_region(b, geo, 3.0)
    w = geo.world_grid()
    d = np.linalg.norm(w - geo.world([7, 6, 5]), axis=-1)
    np.testing.assert_array_equal(out, d <= 3.0)
    assert not dilate_region(np.zeros(geo.dims, bool), geo, 3.0).any()


def test_uniform_scaling_log_jacobian():
    geo = GridGeometry((20, 18, 16), (1.0, 1.5, 2.0))
    x = geo.world_grid()
    f = VectorField(geo, 0.1 * (x - x.mean(axis=(0, 1, 2))))
    _, st_ = jacobian_log(f)
    assert abs(st_.mean - 3 * math.log(1.1)) < 1e-6 and st_.sd < 1e-9 and st_.foldings == 0
    np.testing.assert_allclose(jacobian_determinant(f), 1.1 ** 3)


def test_folding_is_counted():
    geo = GridGeometry((10, 4, 4))
    x = geo.world_grid()
    f = VectorField(geo, np.stack([-2.0 * x[..., 0], 0 * x[..., 1], 0 * x[..., 2]], -1))
    logj, s = jacobian_log(f)
    assert s.foldings == f.geometry.n_voxels and np.all(logj.values == 0)


def _smooth_field(geo, amp):
    x = geo.world_grid()
    c = x.mean(axis=(0, 1, 2))
    r2 = np.sum((x - c) ** 2, -1)
    bump = amp * np.exp(-r2 / (2 * 6.0 ** 2))
    return VectorField(geo, np.stack([bump, 0.5 * bump, -0.3 * bump], -1))


def test_invert_residual_and_composition():
    geo = GridGeometry((30, 30, 30), (1.0, 1.0, 1.0))
    f = _smooth_field(geo, 2.0)
    pull, rep = invert(f)
    assert pull.convention == BACKWARD_PULL and rep.max_residual < 0.01
    y = geo.world_grid().reshape(-1, 3)
    w = pull.vectors.reshape(-1, 3)
    inside = np.all((y + w >= 0) & (y + w <= 29), axis=1)
    comp = w[inside] + sample_vectors(f, (y + w)[inside])
    assert inside.mean() > 0.9 and np.abs(comp).max() < 0.02
    zero, r0 = invert(VectorField.zeros(geo))
    assert r0.iterations == 0 and not zero.vectors.any()
    with pytest.raises(ValueError):
        invert(pull)


def test_invert_reports_non_convergence():
    # a strongly folding field needs many iterations; a budget of two is not enough
    geo = GridGeometry((24, 8, 8))
    x = geo.world_grid()
    v = np.zeros(geo.dims + (3,))
    v[..., 0] = 8.0 * np.sin(x[..., 0] * 0.9)
    with pytest.raises(InversionError):
        invert(VectorField(geo, v), max_iter=2)


def test_voxelize_means_samples():
    geo = GridGeometry((4, 4, 4))
    pos = np.array([[1.0, 1.0, 1.0], [1.2, 0.9, 1.1], [3.0, 3.0, 3.0], [9.0, 0.0, 0.0]])
    vec = np.array([[1.0, 0, 0], [3.0, 0, 0], [0, 2.0, 0], [5.0, 5, 5]])
    f, cov = voxelize(FieldSamples(np.zeros((4, 3)), pos, vec), geo)
    assert cov.sum() == 2
    np.testing.assert_array_equal(f.vectors[1, 1, 1], [2.0, 0, 0])
    np.testing.assert_array_equal(f.vectors[3, 3, 3], [0, 2.0, 0])
    assert f.convention == FORWARD_PUSH


def test_correspondences_of_translated_surface(small_tube):
    from gimotion.simulate import extract_surface
    _, s = extract_surface(small_tube.mask, 1)
    smp = sample_correspondences(s, s.translated([1.0, 0.0, -2.0]), 5, 8, 3)
    assert len(smp) == 5 * 8 * 3
    np.testing.assert_allclose(smp.vectors, [[1.0, 0.0, -2.0]] * len(smp), atol=1e-12)
