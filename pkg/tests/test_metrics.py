import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gimotion.grid import (BACKWARD_PULL, DOSE_GRAY, ConventionError, GridGeometry, ScalarGrid,
                           VectorField)
from gimotion.metrics import (KeypointSet, Summary, accumulate_dose, boundary, default_edges, dsc,
                              dwe, error_map, hd95, nearest_rank, rmse_binned, rows_to_csv, tre,
                              tre_values)

# -- naive oracles ------------------------------------------------------------


def naive_dsc(a, b):
    inter = na = nb = 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        inter += x and y
        na += x
        nb += y
    return 1.0 if na + nb == 0 else 2.0 * inter / (na + nb)


def naive_boundary(m):
    out = []
    dims = m.shape
    for idx in itertools.product(*[range(n) for n in dims]):
        if not m[idx]:
            continue
        for a in range(3):
            for d in (-1, 1):
                j = list(idx)
                j[a] += d
                if not (0 <= j[a] < dims[a]) or not m[tuple(j)]:
                    out.append(idx)
                    break
            else:
                continue
            break
    return out


def naive_hd95(a, b, sp):
    ba, bb = naive_boundary(a), naive_boundary(b)
    fg_a, fg_b = list(zip(*np.nonzero(a))), list(zip(*np.nonzero(b)))

    def directed(src, dst_fg):
        d = []
        for p in src:
            best = math.inf
            for q in dst_fg:       # distance to the nearest foreground voxel of the other mask
                best = min(best, math.sqrt(sum(((p[k] - q[k]) * sp[k]) ** 2 for k in range(3))))
            d.append(best)
        d.sort()
        return d[max(math.ceil(0.95 * len(d)), 1) - 1]
    return max(directed(ba, fg_b), directed(bb, fg_a))


def naive_trilinear(vol, c):
    dims = vol.shape
    if any(c[k] < 0 or c[k] > dims[k] - 1 for k in range(3)):
        return 0.0
    i0 = [min(int(math.floor(c[k])), dims[k] - 2) if dims[k] > 1 else 0 for k in range(3)]
    f = [c[k] - i0[k] for k in range(3)]
    tot = 0.0
    for off in itertools.product((0, 1), repeat=3):
        w = 1.0
        for k in range(3):
            w *= f[k] if off[k] else 1 - f[k]
        if w:
            tot += w * vol[tuple(min(i0[k] + off[k], dims[k] - 1) for k in range(3))]
    return tot


def naive_accumulate(dose, fields, sp):
    out = np.zeros(dose.shape)
    for f in fields:
        for idx in itertools.product(*[range(n) for n in dose.shape]):
            c = [idx[k] + f[idx][k] / sp[k] for k in range(3)]
            out[idx] += naive_trilinear(dose, c)
    return out


def naive_dwe(acc, gt, mask, floor):
    s, n = 0.0, 0
    for x, y, m in zip(acc.ravel(), gt.ravel(), mask.ravel()):
        if m and y >= floor:
            s += abs(x - y) / y
            n += 1
    return 100.0 * s / n


def naive_binned(err, binv, edges, mask):
    rows = []
    for i in range(len(edges) - 1):
        lo, hi = edges[i], edges[i + 1]
        last = i == len(edges) - 2
        vals = [e for e, b, m in zip(err.ravel(), binv.ravel(), mask.ravel())
                if m and lo <= b and (b <= hi if last else b < hi)]
        rows.append((len(vals), math.sqrt(sum(v * v for v in vals) / len(vals)) if vals else None))
    return rows


def _masks(seed, shape=(14, 12, 10)):
    rng = np.random.default_rng(seed)
    from scipy import ndimage as ndi
    a = ndi.gaussian_filter(rng.standard_normal(shape), 1.5) > 0.05
    b = ndi.gaussian_filter(rng.standard_normal(shape), 1.5) > 0.05
    return a, b


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_dsc_and_hd95_match_naive(seed):
    a, b = _masks(seed)
    assert dsc(a, b) == pytest.approx(naive_dsc(a, b), rel=1e-9)
    if a.any() and b.any():
        sp = (1.0, 1.5, 2.0)
        assert hd95(a, b, sp) == pytest.approx(naive_hd95(a, b, sp), rel=1e-9)


def test_boundary_matches_naive():
    a, _ = _masks(3)
    assert sorted(map(tuple, np.argwhere(boundary(a)).tolist())) == naive_boundary(a)


def test_dsc_hd95_special_cases():
    z = np.zeros((4, 4, 4), bool)
    assert dsc(z, z) == 1.0
    a = z.copy()
    a[1:3, 1:3, 1:3] = True
    assert dsc(a, a) == 1.0 and hd95(a, a) == 0.0
    with pytest.raises(ValueError):
        hd95(a, z)
    with pytest.raises(ValueError):
        dsc(a, np.zeros((3, 3, 3), bool))


def test_nearest_rank():
    assert nearest_rank(range(1, 101), 95) == 95
    assert nearest_rank([5.0], 95) == 5.0
    assert nearest_rank([1, 2, 3], 0) == 1


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_dose_accumulation_and_dwe_match_naive(seed):
    rng = np.random.default_rng(seed)
    geo = GridGeometry((9, 8, 7), (1.0, 1.5, 2.0))
    dose = ScalarGrid(geo, 10 + 40 * rng.random(geo.dims), DOSE_GRAY)
    fields = [VectorField(geo, rng.normal(0, 1.5, geo.dims + (3,)), BACKWARD_PULL) for _ in range(3)]
    acc = accumulate_dose(dose, fields)
    want = naive_accumulate(dose.values, [f.vectors for f in fields], geo.spacing)
    np.testing.assert_allclose(acc.values, want, rtol=1e-9, atol=0)
    gt = accumulate_dose(dose, fields[:2] + [VectorField.zeros(geo, BACKWARD_PULL)])
    mask = rng.random(geo.dims) < 0.5
    assert dwe(acc, gt, mask, 0.5) == pytest.approx(naive_dwe(acc.values, gt.values, mask, 0.5), rel=1e-9)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.2, 3.0))
def test_binned_rmse_matches_naive(seed, step):
    rng = np.random.default_rng(seed)
    geo = GridGeometry((8, 7, 6))
    err = ScalarGrid(geo, rng.random(geo.dims) * 3)
    binv = ScalarGrid(geo, rng.random(geo.dims) * 9)
    mask = rng.random(geo.dims) < 0.7
    rows = rmse_binned(err, binv, step=step, mask=mask)
    edges = default_edges(binv.values[mask], step)
    want = naive_binned(err.values, binv.values, edges, mask)
    assert [r.count for r in rows] == [w[0] for w in want]
    for r, (_, w) in zip(rows, want):
        if w is None:
            assert r.rmse_mm is None
        else:
            assert r.rmse_mm == pytest.approx(w, rel=1e-9)
    assert sum(r.count for r in rows) == int(mask.sum())
    assert rows_to_csv(rows).splitlines()[0] == "bin_lo,bin_hi,count,rmse_mm"


def test_binned_rmse_edges_validation():
    geo = GridGeometry((2, 2, 2))
    g = ScalarGrid(geo, np.zeros(geo.dims))
    with pytest.raises(ValueError):
        rmse_binned(g, g, edges=[1.0, 1.0])


def test_tre_examples():
    geo = GridGeometry((10, 10, 10))
    keys = KeypointSet(np.array([[4.0, 4.0, 4.0]]), np.zeros((1, 3)), np.array([1]))
    push = VectorField(geo, np.broadcast_to([3.0, 0, 0], geo.dims + (3,)))
    pull = VectorField(geo, np.broadcast_to([-3.0, 0, 0], geo.dims + (3,)), BACKWARD_PULL)
    assert tre(keys, push, pull)[1].mean == 0.0
    assert tre(keys, push, VectorField.zeros(geo, BACKWARD_PULL))[1].mean == 3.0
    with pytest.raises(ConventionError):
        tre_values(keys, pull, pull)
    far = KeypointSet(np.array([[40.0, 4, 4]]), np.zeros((1, 3)), np.array([1]))
    with pytest.raises(ValueError):
        tre(far, push, pull)
    back = KeypointSet.from_json(keys.to_json())
    np.testing.assert_array_equal(back.points, keys.points)


def test_error_map_and_summary():
    geo = GridGeometry((3, 3, 3))
    a = VectorField(geo, np.ones(geo.dims + (3,)), BACKWARD_PULL)
    b = VectorField.zeros(geo, BACKWARD_PULL)
    np.testing.assert_allclose(error_map(a, b).values, math.sqrt(3))
    with pytest.raises(ValueError):
        Summary.of([])
    with pytest.raises(ValueError):
        dwe(ScalarGrid(geo, np.zeros(geo.dims)), ScalarGrid(geo, np.zeros(geo.dims)), np.ones(geo.dims, bool))
