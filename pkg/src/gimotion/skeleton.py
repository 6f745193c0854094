"""Curve skeletons of organ masks and centerline extraction.

Thinning removes simple border points in six directional sub-iterations
(Lee/Kashyap/Chu style, directions in the order -x, +x, -y, +y, -z, +z),
keeping curve endpoints. Simplicity is tested exactly: a point is simple when
its punctured 26-neighbourhood holds one 26-connected foreground component
and one 6-connected background component (inside the 18-neighbourhood) that
touches it through a face.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage as ndi

from .grid import GridGeometry, LabelMask

log = logging.getLogger(__name__)

_OFFSETS = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)],
                    dtype=np.int64)


def _tables():
    cheb = np.abs(_OFFSETS[:, None, :] - _OFFSETS[None, :, :]).max(-1)
    manh = np.abs(_OFFSETS[:, None, :] - _OFFSETS[None, :, :]).sum(-1)
    adj26 = (cheb == 1)
    adj6 = (manh == 1)
    nsum = np.abs(_OFFSETS).sum(1)
    in18 = (nsum >= 1) & (nsum <= 2)
    face = nsum == 1
    center = 13
    adj26[center, :] = adj26[:, center] = False
    adj6[center, :] = adj6[:, center] = False
    return adj26, adj6, in18, face, center


ADJ26, ADJ6, IN18, FACE, CENTER = _tables()


@numba.njit(cache=True)
def _count_components(member, adj, seeds_only, seeds):
    """Components among ``member`` positions under ``adj``; optionally only those containing a seed."""
    n = member.shape[0]
    seen = np.zeros(n, dtype=np.bool_)
    stack = np.empty(n, dtype=np.int64)
    count = 0
    for s in range(n):
        if not member[s] or seen[s]:
            continue
        if seeds_only and not seeds[s]:
            continue
        count += 1
        top = 0
        stack[top] = s
        seen[s] = True
        while top >= 0:
            p = stack[top]
            top -= 1
            for q in range(n):
                if adj[p, q] and member[q] and not seen[q]:
                    seen[q] = True
                    top += 1
                    stack[top] = q
    return count


@numba.njit(cache=True)
def _is_simple(nb, adj26, adj6, in18, face):
    fg = nb.copy()
    fg[13] = False
    n_fg = _count_components(fg, adj26, False, face)
    if n_fg != 1:
        return False
    bg = np.empty(27, dtype=np.bool_)
    for i in range(27):
        bg[i] = (not nb[i]) and in18[i]
    n_bg = _count_components(bg, adj6, True, face)
    return n_bg == 1


@numba.njit(cache=True)
def _neighbourhood(img, x, y, z, offsets, out):
    nx, ny, nz = img.shape
    for i in range(27):
        a = x + offsets[i, 0]
        b = y + offsets[i, 1]
        c = z + offsets[i, 2]
        if a < 0 or b < 0 or c < 0 or a >= nx or b >= ny or c >= nz:
            out[i] = False
        else:
            out[i] = img[a, b, c]


@numba.njit(cache=True)
def _thin(img, offsets, adj26, adj6, in18, face):
    nx, ny, nz = img.shape
    dirs = np.array([[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]])
    nb = np.empty(27, dtype=np.bool_)
    cand = np.empty((img.size, 3), dtype=np.int64)
    rem = np.empty((img.size, 3), dtype=np.int64)
    changed = True
    while changed:
        changed = False
        for d in range(6):
            nc = 0
            for x in range(nx):
                for y in range(ny):
                    for z in range(nz):
                        if not img[x, y, z]:
                            continue
                        a = x + dirs[d, 0]
                        b = y + dirs[d, 1]
                        c = z + dirs[d, 2]
                        if 0 <= a < nx and 0 <= b < ny and 0 <= c < nz and img[a, b, c]:
                            continue
                        _neighbourhood(img, x, y, z, offsets, nb)
                        cnt = 0
                        for i in range(27):
                            if nb[i]:
                                cnt += 1
                        if cnt <= 2:
                            continue  # endpoint (one neighbour) or isolated voxel
                        if not _is_simple(nb, adj26, adj6, in18, face):
                            continue
                        cand[nc, 0] = x
                        cand[nc, 1] = y
                        cand[nc, 2] = z
                        nc += 1
            # re-check per parity subfield; members of one subfield are never
            # 26-adjacent, so deleting them together equals any sequential order
            for sub in range(8):
                nr = 0
                for k in range(nc):
                    x, y, z = cand[k, 0], cand[k, 1], cand[k, 2]
                    if (x & 1) * 4 + (y & 1) * 2 + (z & 1) != sub:
                        continue
                    _neighbourhood(img, x, y, z, offsets, nb)
                    cnt = 0
                    for i in range(27):
                        if nb[i]:
                            cnt += 1
                    if cnt <= 2:
                        continue
                    if _is_simple(nb, adj26, adj6, in18, face):
                        rem[nr, 0] = x
                        rem[nr, 1] = y
                        rem[nr, 2] = z
                        nr += 1
                for k in range(nr):
                    img[rem[k, 0], rem[k, 1], rem[k, 2]] = False
                    changed = True
    return img


def is_simple_point(img: np.ndarray, index) -> bool:
    """Whether deleting voxel ``index`` from binary ``img`` preserves topology."""
    nb = np.empty(27, dtype=np.bool_)
    _neighbourhood(np.ascontiguousarray(img, dtype=np.bool_), *[int(i) for i in index], _OFFSETS, nb)
    return bool(_is_simple(nb, ADJ26, ADJ6, IN18, FACE))


def thin_binary(binary: np.ndarray) -> np.ndarray:
    img = np.ascontiguousarray(binary, dtype=np.bool_).copy()
    if not img.any():
        return img
    # crop to the bounding box (+1 background margin) for speed
    idx = np.argwhere(img)
    lo = np.maximum(idx.min(0) - 1, 0)
    hi = np.minimum(idx.max(0) + 2, img.shape)
    sub = np.ascontiguousarray(img[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]])
    sub = _thin(sub, _OFFSETS, ADJ26, ADJ6, IN18, FACE)
    out = np.zeros_like(img)
    out[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = sub
    return out


def thin(mask: LabelMask, label: int) -> np.ndarray:
    """Topology-preserving thinning of one organ label to a curve skeleton."""
    binary = mask.binary(label)
    if not binary.any():
        raise ValueError(f"label {label} is empty")
    return thin_binary(binary)


def boundary_depth(mask: LabelMask, label: int) -> np.ndarray:
    """Euclidean distance (mm) from each organ voxel to the nearest background voxel."""
    return ndi.distance_transform_edt(mask.binary(label), sampling=mask.geometry.spacing)


@dataclass(frozen=True, eq=False)
class SkeletonGraph:
    nodes: np.ndarray           # (N, 3) voxel indices, lexicographically sorted
    edges: np.ndarray           # (E, 2) node index pairs, a < b

    def adjacency(self) -> list[list[int]]:
        adj = [[] for _ in range(len(self.nodes))]
        for a, b in self.edges:
            adj[a].append(int(b))
            adj[b].append(int(a))
        for lst in adj:
            lst.sort()
        return adj

    def degree(self) -> np.ndarray:
        deg = np.zeros(len(self.nodes), dtype=int)
        np.add.at(deg, self.edges.reshape(-1), 1)
        return deg

    def components(self) -> list[list[int]]:
        adj = self.adjacency()
        seen = np.zeros(len(self.nodes), bool)
        comps = []
        for s in range(len(self.nodes)):
            if seen[s]:
                continue
            seen[s] = True
            comp, queue = [s], deque([s])
            while queue:
                p = queue.popleft()
                for q in adj[p]:
                    if not seen[q]:
                        seen[q] = True
                        comp.append(q)
                        queue.append(q)
            comps.append(sorted(comp))
        return comps


def build_graph(skeleton: np.ndarray) -> SkeletonGraph:
    """One node per skeleton voxel, edges between 26-neighbours."""
    nodes = np.argwhere(np.asarray(skeleton, bool))
    if len(nodes) == 0:
        return SkeletonGraph(np.zeros((0, 3), int), np.zeros((0, 2), int))
    lookup = {tuple(v): i for i, v in enumerate(nodes.tolist())}
    half = [o for o in _OFFSETS.tolist() if tuple(o) > (0, 0, 0)]
    edges = []
    for i, v in enumerate(nodes.tolist()):
        for o in half:
            j = lookup.get((v[0] + o[0], v[1] + o[1], v[2] + o[2]))
            if j is not None:
                edges.append((min(i, j), max(i, j)))
    edges = np.array(sorted(edges), dtype=int).reshape(-1, 2)
    return SkeletonGraph(nodes, edges)


def _bfs(adj, start, allowed=None):
    dist = {start: 0}
    parent = {start: -1}
    queue = deque([start])
    while queue:
        p = queue.popleft()
        for q in adj[p]:
            if q not in dist and (allowed is None or q in allowed):
                dist[q] = dist[p] + 1
                parent[q] = p
                queue.append(q)
    return dist, parent


def _farthest(dist):
    best = max(dist.values())
    # node indices follow lexicographic voxel order, so min index = lexicographic tie-break
    return min(k for k, v in dist.items() if v == best)


def _trace(parent, end):
    path = [end]
    while parent[path[-1]] != -1:
        path.append(parent[path[-1]])
    return path[::-1]


@dataclass(frozen=True, eq=False)
class Centerline:
    points: np.ndarray              # (N, 3) world mm
    cumulative_arclength: np.ndarray
    tangents: np.ndarray
    normals: np.ndarray
    binormals: np.ndarray

    @property
    def length(self) -> float:
        return float(self.cumulative_arclength[-1])

    def to_dict(self) -> dict:
        return {"points": self.points.tolist(),
                "cumulative_arclength": self.cumulative_arclength.tolist(),
                "tangents": self.tangents.tolist(), "normals": self.normals.tolist(),
                "binormals": self.binormals.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Centerline":
        return cls(*(np.asarray(d[k], float) for k in
                     ("points", "cumulative_arclength", "tangents", "normals", "binormals")))


def _arclength(points: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def _tangents(points: np.ndarray) -> np.ndarray:
    t = np.gradient(points, axis=0) if len(points) > 2 else np.repeat(np.diff(points, axis=0), 2, 0)[:len(points)]
    return t / np.linalg.norm(t, axis=1, keepdims=True)


def parallel_transport_frames(points: np.ndarray):
    """Tangent/normal/binormal frames transported along a polyline (no Frenet flips)."""
    T = _tangents(points)
    seed = np.eye(3)[np.argmin(np.abs(T[0]))]
    N = np.empty_like(T)
    n0 = seed - np.dot(seed, T[0]) * T[0]
    N[0] = n0 / np.linalg.norm(n0)
    for k in range(1, len(T)):
        t0, t1 = T[k - 1], T[k]
        axis = np.cross(t0, t1)
        s = np.linalg.norm(axis)
        c = float(np.clip(np.dot(t0, t1), -1.0, 1.0))
        n = N[k - 1]
        if s > 1e-12:
            axis = axis / s
            # Rodrigues rotation taking t0 onto t1
            n = n * c + np.cross(axis, n) * s + axis * np.dot(axis, n) * (1 - c)
        n = n - np.dot(n, t1) * t1
        N[k] = n / np.linalg.norm(n)
    B = np.cross(T, N)
    B /= np.linalg.norm(B, axis=1, keepdims=True)
    return T, N, B


def centerline_from_points(points: np.ndarray) -> Centerline:
    points = np.asarray(points, float)
    keep = np.concatenate([[True], np.linalg.norm(np.diff(points, axis=0), axis=1) > 1e-9])
    points = points[keep]
    if len(points) < 2:
        raise ValueError("centerline needs at least two distinct points")
    T, N, B = parallel_transport_frames(points)
    return Centerline(points, _arclength(points), T, N, B)


def moving_average(points: np.ndarray, width: int = 5) -> np.ndarray:
    """Centered moving average; the window shrinks symmetrically at the ends."""
    half = width // 2
    n = len(points)
    out = np.empty_like(points, dtype=float)
    for i in range(n):
        h = min(half, i, n - 1 - i)
        out[i] = points[i - h:i + h + 1].mean(axis=0)
    return out


def subgraph(graph: SkeletonGraph, keep: np.ndarray) -> SkeletonGraph:
    """Induced subgraph on the nodes where ``keep`` is True (order preserved)."""
    keep = np.asarray(keep, bool)
    remap = np.cumsum(keep) - 1
    e = graph.edges
    ok = keep[e[:, 0]] & keep[e[:, 1]] if len(e) else np.zeros(0, bool)
    return SkeletonGraph(graph.nodes[keep], remap[e[ok]].reshape(-1, 2))


def prune_spurs(graph: SkeletonGraph, depth: np.ndarray, geometry: GridGeometry,
                slope: float = 0.5) -> SkeletonGraph:
    """Remove terminal branches that head for the organ wall.

    A branch from a tip to its first junction is a spur when the boundary
    distance drops by at least ``slope`` mm per mm of branch length. Medial
    axis ends keep their depth and survive. Repeats until nothing changes.
    """
    while True:
        adj = graph.adjacency()
        deg = graph.degree()
        d = depth[tuple(graph.nodes.T)] if len(graph.nodes) else np.zeros(0)
        world = geometry.world(graph.nodes)
        drop = np.zeros(len(graph.nodes), bool)
        for tip in np.flatnonzero(deg == 1):
            branch, prev, cur = [int(tip)], -1, int(tip)
            while True:
                nxt = [q for q in adj[cur] if q != prev]
                if len(nxt) != 1:
                    break
                prev, cur = cur, nxt[0]
                if deg[cur] >= 3:
                    break
                branch.append(cur)
            if deg[cur] < 3:
                continue        # simple path, no junction
            pts = world[branch + [cur]]
            length = float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())
            if d[cur] - d[tip] >= slope * length:
                drop[branch] = True
        if not drop.any():
            return graph
        graph = subgraph(graph, ~drop)


def trim_shallow_ends(nodes: np.ndarray, depth: np.ndarray, geometry: GridGeometry,
                      frac: float = 0.9, margin: float = 0.5) -> np.ndarray:
    """Cut unreliable path ends.

    An end is first cut back to the first point whose depth reaches ``frac``
    of the deepest path point within one median depth of arc length (bends
    toward the wall go), then a further ``margin`` times the median depth is
    removed because thinning leaves small hooks at curve tips.
    """
    if len(nodes) < 3:
        return nodes
    d = depth[tuple(nodes.T)]
    s = _arclength(geometry.world(nodes))
    window = float(np.median(d))

    def first_deep(order):
        for i in order:
            near = np.abs(s - s[i]) <= window
            if d[i] >= frac * d[near].max():
                return i
        return order[0]

    lo = first_deep(range(len(nodes)))
    hi = first_deep(range(len(nodes) - 1, -1, -1))
    cut = margin * window
    lo2 = int(np.searchsorted(s, s[lo] + cut))
    hi2 = int(np.searchsorted(s, s[hi] - cut, side="right")) - 1
    if hi2 - lo2 >= 2:
        lo, hi = lo2, hi2
    return nodes[lo:hi + 1] if hi - lo >= 1 else nodes


def longest_path(graph: SkeletonGraph, geometry: GridGeometry, endpoints=None,
                 smooth_width: int = 5, depth: np.ndarray | None = None) -> Centerline:
    """Longest centerline through a skeleton graph.

    Without ``endpoints`` the tips are found by a double BFS sweep, after
    ``prune_spurs`` when a ``depth`` map (distance to the organ boundary, mm)
    is given. With explicit voxel-index endpoints the BFS path between them
    is returned.
    """
    if len(graph.nodes) == 0:
        raise ValueError("empty skeleton graph")
    if endpoints is None and depth is not None:
        graph = prune_spurs(graph, depth, geometry)
    adj = graph.adjacency()
    comps = graph.components()
    lookup = {tuple(v): i for i, v in enumerate(graph.nodes.tolist())}
    if endpoints is not None:
        try:
            a, b = (lookup[tuple(int(c) for c in e)] for e in endpoints)
        except KeyError as exc:
            raise ValueError(f"endpoint {exc.args[0]} is not a skeleton voxel") from None
        dist, parent = _bfs(adj, a)
        if b not in dist:
            raise ValueError("endpoints lie in different skeleton components")
        path = _trace(parent, b)
    else:
        if len(comps) > 1:
            log.warning("skeleton has %d components; using the largest", len(comps))
        comp = max(comps, key=len)
        dist, _ = _bfs(adj, comp[0])
        e1 = _farthest(dist)
        dist, parent = _bfs(adj, e1)
        e2 = _farthest(dist)
        path = _trace(parent, e2)
    nodes = graph.nodes[path]
    if endpoints is None and depth is not None:
        nodes = trim_shallow_ends(nodes, depth, geometry)
    vox = nodes.astype(float)
    if len(vox) >= 3 and smooth_width > 1:
        vox = moving_average(vox, smooth_width)
    return centerline_from_points(geometry.world(vox))
