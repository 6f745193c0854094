import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage as ndi

from gimotion.grid import GridGeometry, LabelMask
from gimotion.skeleton import (Centerline, boundary_depth, build_graph, centerline_from_points,
                               is_simple_point, longest_path, moving_average,
                               parallel_transport_frames, thin, thin_binary)

S26 = np.ones((3, 3, 3), bool)


def _components(img, structure):
    return ndi.label(img, structure=structure)[1]


def _simple_oracle(img, idx):
    """Brute-force simplicity: removing the voxel keeps the 26-component count of the
    3x3x3 foreground and the 6-component count of the background around it."""
    x, y, z = idx
    cube = np.pad(img, 1)[x:x + 3, y:y + 3, z:z + 3].copy()
    fg = cube.copy()
    fg[1, 1, 1] = False
    n_fg = _components(fg, S26)
    bg = ~cube
    bg[1, 1, 1] = False
    corners = np.array([[a, b, c] for a in (0, 2) for b in (0, 2) for c in (0, 2)])
    bg[tuple(corners.T)] = False          # 6-components only within the 18-neighbourhood
    lab, _ = ndi.label(bg, structure=ndi.generate_binary_structure(3, 1))
    faces = [(0, 1, 1), (2, 1, 1), (1, 0, 1), (1, 2, 1), (1, 1, 0), (1, 1, 2)]
    touching = {lab[f] for f in faces if lab[f] > 0}
    return n_fg == 1 and len(touching) == 1


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2 ** 27 - 1))
def test_simple_point_matches_oracle(bits):
    cube = np.array([(bits >> i) & 1 for i in range(27)], bool).reshape(3, 3, 3)
    cube[1, 1, 1] = True
    assert is_simple_point(cube, (1, 1, 1)) == _simple_oracle(cube, (1, 1, 1))


def _cylinder(shape, axis_from, axis_to, r):
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), -1).astype(float)
    a, b = np.asarray(axis_from, float), np.asarray(axis_to, float)
    d = b - a
    t = np.clip(((idx - a) @ d) / (d @ d), 0, 1)
    dist = np.linalg.norm(idx - (a + t[..., None] * d), axis=-1)
    return dist <= r


def test_thin_cylinder_to_curve():
    cyl = _cylinder((40, 20, 20), (5, 10, 10), (34, 10, 10), 5.0)
    sk = thin_binary(cyl)
    assert sk.any() and np.all(sk <= cyl)
    assert _components(sk, S26) == 1
    g = build_graph(sk)
    assert g.degree().max() <= 2                       # a simple curve
    xs = np.argwhere(sk)[:, 0]
    assert xs.min() <= 6 and xs.max() >= 33            # runs nearly end to end


def test_thin_preserves_topology_of_torus_and_blobs():
    img = np.zeros((30, 30, 9), bool)
    yy, xx = np.mgrid[:30, :30]
    r = np.hypot(xx - 14.5, yy - 14.5)
    img[:, :, 2:7] = ((r >= 6) & (r <= 10))[:, :, None]      # thick ring
    img2 = img.copy()
    img2[0:4, 0:4, 0:4] = True                              # separate cube
    for im in (img, img2):
        sk = thin_binary(im)
        assert _components(sk, S26) == _components(im, S26)
        # the ring hole survives: background stays a single 6-component with the hole
        bg_before = _components(~im, ndi.generate_binary_structure(3, 1))
        bg_after = _components(~sk, ndi.generate_binary_structure(3, 1))
        assert bg_after <= bg_before
        g = build_graph(sk)
        assert len(g.edges) - len(g.nodes) + len(g.components()) >= 1   # a cycle remains


def test_thin_empty_label_raises():
    m = LabelMask(GridGeometry((5, 5, 5)), np.zeros((5, 5, 5), int))
    with pytest.raises(ValueError):
        thin(m, 1)
    assert not thin_binary(np.zeros((4, 4, 4), bool)).any()


def test_longest_path_on_bent_tube():
    geo = GridGeometry((48, 40, 20), (1.0, 1.0, 1.0))
    lab = (_cylinder(geo.dims, (4, 8, 10), (30, 8, 10), 4) |
           _cylinder(geo.dims, (30, 8, 10), (30, 34, 10), 4)).astype(int)
    mask = LabelMask(geo, lab)
    c = longest_path(build_graph(thin(mask, 1)), geo, depth=boundary_depth(mask, 1))
    # medial length of the L is 26 + 26; end trimming removes a few mm at each end
    assert 30 < c.length < 54
    assert isinstance(Centerline.from_dict(c.to_dict()), Centerline)
    np.testing.assert_allclose(np.linalg.norm(c.tangents, axis=1), 1.0)
    np.testing.assert_allclose(np.einsum("ij,ij->i", c.tangents, c.normals), 0.0, atol=1e-9)


def test_explicit_endpoints():
    geo = GridGeometry((30, 15, 15))
    mask = LabelMask(geo, _cylinder(geo.dims, (4, 7, 7), (25, 7, 7), 3).astype(int))
    sk = thin(mask, 1)
    nodes = np.argwhere(sk)
    a, b = nodes[0], nodes[-1]
    c = longest_path(build_graph(sk), geo, endpoints=(a, b), smooth_width=1)
    np.testing.assert_array_equal(c.points[0], geo.world(a))
    np.testing.assert_array_equal(c.points[-1], geo.world(b))
    with pytest.raises(ValueError):
        longest_path(build_graph(sk), geo, endpoints=((0, 0, 0), tuple(b)))


def test_moving_average_keeps_ends_and_lines():
    pts = np.cumsum(np.ones((10, 3)), axis=0)
    np.testing.assert_allclose(moving_average(pts, 5), pts)
    rnd = np.random.default_rng(0).standard_normal((7, 3))
    out = moving_average(rnd, 5)
    np.testing.assert_array_equal(out[0], rnd[0])
    np.testing.assert_allclose(out[3], rnd[1:6].mean(0))


@given(st.floats(0.5, 20), st.floats(0.1, 3))
def test_transport_frames_on_helix_are_orthonormal(radius, pitch):
    t = np.linspace(0, 4 * np.pi, 200)
    pts = np.stack([radius * np.cos(t), radius * np.sin(t), pitch * t], 1)
    T, N, B = parallel_transport_frames(pts)
    for a, b in ((T, N), (T, B), (N, B)):
        np.testing.assert_allclose(np.einsum("ij,ij->i", a, b), 0.0, atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(N, axis=1), 1.0)


def test_centerline_rejects_degenerate():
    with pytest.raises(ValueError):
        centerline_from_points(np.zeros((5, 3)))


def test_box_longest_path_follows_axis():
    lab = np.zeros((11, 11, 50), np.int16)
    lab[3:8, 3:8, 5:45] = 1
    m = LabelMask(GridGeometry(lab.shape), lab)
    c = longest_path(build_graph(thin(m, 1)), m.geometry)
    p = np.asarray(c.points)
    assert 36 <= len(p) <= 44
    assert np.abs(p[:, :2] - 5.0).max() <= 2.0
