"""Triangular mesh construction and piecewise-linear projection.

The mesh nodes form a jittered quasi-uniform grid over the (buffered)
bounding box of the observation locations.  The nodes are triangulated with
an incremental Bowyer-Watson Delaunay algorithm, and arbitrary locations are
mapped onto the nodes through barycentric weights collected in a sparse
projector matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from os import PathLike

import numpy as np
import scipy.sparse as sp

from .exceptions import DegenerateDomainError, OutOfMeshError

# Relative tolerance for treating a point as lying on an edge.
INSIDE_TOL = 1e-9
# Nodes closer than this (relative to the domain size) are merged.
DEDUP_TOL = 1e-12
# Interior nodes are displaced by at most this fraction of the grid spacing.
JITTER_FRACTION = 0.2


@dataclass
class Mesh:
    """Delaunay triangulation of the mesh nodes.

    Attributes
    ----------
    vertices : ndarray of shape (m, 2)
    triangles : ndarray of shape (t, 3)
        Vertex indices, counter-clockwise.
    neighbors : ndarray of shape (t, 3)
        ``neighbors[t, i]`` is the triangle across the edge opposite vertex
        ``triangles[t, i]``, or -1 on the hull.
    boundary_box : tuple (xmin, xmax, ymin, ymax)
    """

    vertices: np.ndarray
    triangles: np.ndarray
    neighbors: np.ndarray = None
    boundary_box: tuple = None
    _edges: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if self.neighbors is None:
            self.neighbors = _triangle_neighbors(self.triangles)
        if self.boundary_box is None:
            lo, hi = self.vertices.min(axis=0), self.vertices.max(axis=0)
            self.boundary_box = (lo[0], hi[0], lo[1], hi[1])

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def edges(self) -> np.ndarray:
        """Unique undirected edges as an (E, 2) array with ``i < j``."""
        if self._edges is None:
            t = self.triangles
            e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
            e.sort(axis=1)
            self._edges = np.unique(e, axis=0)
        return self._edges

    def signed_areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * _cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def save(self, path: str | PathLike) -> None:
        save_mesh(self, path)


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _triangle_neighbors(triangles: np.ndarray) -> np.ndarray:
    nbr = np.full(triangles.shape, -1, dtype=np.int64)
    owner = {}
    for t, (a, b, c) in enumerate(triangles.tolist()):
        for i, (u, v) in enumerate(((b, c), (c, a), (a, b))):
            key = (u, v) if u < v else (v, u)
            if key in owner:
                s, j = owner.pop(key)
                nbr[t, i] = s
                nbr[s, j] = t
            else:
                owner[key] = (t, i)
    return nbr


# ---------------------------------------------------------------------------
# Bowyer-Watson
# ---------------------------------------------------------------------------


def _orient(ax, ay, bx, by, cx, cy):
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def _in_circumcircle(ax, ay, bx, by, cx, cy, px, py, scale2):
    # (a, b, c) counter-clockwise; positive determinant means strictly inside.
    adx, ady = ax - px, ay - py
    bdx, bdy = bx - px, by - py
    cdx, cdy = cx - px, cy - py
    ad = adx * adx + ady * ady
    bd = bdx * bdx + bdy * bdy
    cd = cdx * cdx + cdy * cdy
    det = (adx * (bdy * cd - bd * cdy)
           - ady * (bdx * cd - bd * cdx)
           + ad * (bdx * cdy - bdy * cdx))
    return det > 1e-12 * scale2 * scale2


class _Triangulator:
    """Incremental Delaunay triangulation seeded with a convex quadrilateral."""

    def __init__(self, xs, ys, seed_quad):
        self.x = xs
        self.y = ys
        ext = max(max(xs) - min(xs), max(ys) - min(ys))
        self.scale2 = ext * ext
        self.eps = 1e-13 * self.scale2
        a, b, c, d = seed_quad  # counter-clockwise
        self.tri = []
        self.nbr = []
        self.alive = []
        # Diagonal a-c; the first triangle keeps the lower index for ties.
        self._new(a, b, c)
        self._new(a, c, d)
        self.nbr[0][1] = 1  # edge (c, a) of triangle 0
        self.nbr[1][2] = 0  # edge (a, c) of triangle 1
        self.last = 0

    def _new(self, a, b, c):
        self.tri.append([a, b, c])
        self.nbr.append([-1, -1, -1])
        self.alive.append(True)
        return len(self.tri) - 1

    def _contains(self, t, px, py):
        a, b, c = self.tri[t]
        x, y = self.x, self.y
        eps = self.eps
        return (_orient(x[b], y[b], x[c], y[c], px, py) >= -eps
                and _orient(x[c], y[c], x[a], y[a], px, py) >= -eps
                and _orient(x[a], y[a], x[b], y[b], px, py) >= -eps)

    def _walk(self, px, py):
        t = self.last
        if not self.alive[t]:
            t = next(i for i in range(len(self.alive) - 1, -1, -1) if self.alive[i])
        x, y = self.x, self.y
        eps = self.eps
        for _ in range(4 * len(self.tri) + 16):
            a, b, c = self.tri[t]
            n = self.nbr[t]
            if _orient(x[b], y[b], x[c], y[c], px, py) < -eps and n[0] >= 0:
                t = n[0]
            elif _orient(x[c], y[c], x[a], y[a], px, py) < -eps and n[1] >= 0:
                t = n[1]
            elif _orient(x[a], y[a], x[b], y[b], px, py) < -eps and n[2] >= 0:
                t = n[2]
            else:
                if self._contains(t, px, py):
                    return t
                break
        for t in range(len(self.tri)):
            if self.alive[t] and self._contains(t, px, py):
                return t
        raise DegenerateDomainError(f"node ({px}, {py}) falls outside the seed hull")

    def _bad(self, t, px, py):
        a, b, c = self.tri[t]
        x, y = self.x, self.y
        return _in_circumcircle(x[a], y[a], x[b], y[b], x[c], y[c], px, py, self.scale2)

    def insert(self, p):
        x, y = self.x, self.y
        px, py = x[p], y[p]
        start = self._walk(px, py)
        cavity = {start}
        stack = [start]
        while stack:
            t = stack.pop()
            for s in self.nbr[t]:
                if s >= 0 and s not in cavity and self._bad(s, px, py):
                    cavity.add(s)
                    stack.append(s)
        # Enlarge the cavity until it is star-shaped from p.
        while True:
            boundary = []
            grow = None
            for t in cavity:
                a, b, c = self.tri[t]
                for i, (u, v) in enumerate(((b, c), (c, a), (a, b))):
                    s = self.nbr[t][i]
                    if s >= 0 and s in cavity:
                        continue
                    o = _orient(x[u], y[u], x[v], y[v], px, py)
                    if o <= self.eps:
                        if s >= 0 and o < -self.eps:
                            grow = s
                            break
                        if s < 0 and abs(o) <= self.eps:
                            # p on a hull edge: the edge is split, no triangle.
                            continue
                        if s >= 0:
                            grow = s
                            break
                    boundary.append((u, v, s, t))
                if grow is not None:
                    break
            if grow is None:
                break
            cavity.add(grow)
        for t in cavity:
            self.alive[t] = False
        starts, ends = {}, {}
        created = []
        for u, v, s, old in boundary:
            nt = self._new(u, v, p)
            self.nbr[nt][2] = s
            if s >= 0:
                sn = self.nbr[s]
                sn[sn.index(old)] = nt
            starts[u] = nt
            ends[v] = nt
            created.append(nt)
        for nt in created:
            u, v, _ = self.tri[nt]
            self.nbr[nt][0] = starts.get(v, -1)
            self.nbr[nt][1] = ends.get(u, -1)
        self.last = created[-1]

    def result(self):
        keep = [t for t, ok in enumerate(self.alive) if ok]
        remap = {t: i for i, t in enumerate(keep)}
        tri = np.array([self.tri[t] for t in keep], dtype=np.int64)
        nbr = np.array([[remap.get(s, -1) for s in self.nbr[t]] for t in keep], dtype=np.int64)
        return tri, nbr


def _dedupe(points: np.ndarray) -> np.ndarray:
    ext = float(np.ptp(points, axis=0).max()) or 1.0
    key = np.round(points / (DEDUP_TOL * ext)).astype(np.int64)
    _, first = np.unique(key, axis=0, return_index=True)
    return points[np.sort(first)]


def delaunay(points, *, dedupe: bool = True) -> Mesh:
    """Delaunay-triangulate an arbitrary planar point set.

    If the four corners of the points' bounding box belong to the set, the
    triangulation is seeded from them and covers the box exactly.  Otherwise
    four auxiliary corners are added and the triangles touching them are
    dropped afterwards; the remaining triangles are Delaunay but may leave
    slivers of the convex hull uncovered.

    Parameters
    ----------
    points : array-like of shape (m, 2)
    dedupe : bool, default=True
        Merge nodes closer than ``1e-12`` times the domain extent.

    Returns
    -------
    Mesh
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or not np.all(np.isfinite(pts)):
        raise ValueError("points must be a finite (m, 2) array")
    if dedupe:
        pts = _dedupe(pts)
    _check_nondegenerate(pts)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    corners = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
    idx = []
    for c in corners:
        hit = np.flatnonzero((pts[:, 0] == c[0]) & (pts[:, 1] == c[1]))
        idx.append(int(hit[0]) if hit.size else -1)
    n_real = pts.shape[0]
    if min(idx) < 0:
        pad = 2.0 * (hi - lo)
        aux = np.array([[lo[0] - pad[0], lo[1] - pad[1]], [hi[0] + pad[0], lo[1] - pad[1]],
                        [hi[0] + pad[0], hi[1] + pad[1]], [lo[0] - pad[0], hi[1] + pad[1]]])
        work = np.vstack([pts, aux])
        idx = list(range(n_real, n_real + 4))
    else:
        work = pts
    order = _insertion_order(work, set(idx))
    tr = _Triangulator(work[:, 0].tolist(), work[:, 1].tolist(), idx)
    for p in order:
        tr.insert(p)
    tri, nbr = tr.result()
    if work.shape[0] > n_real:
        keep = np.all(tri < n_real, axis=1)
        tri = tri[keep]
        nbr = None
    if tri.shape[0] == 0:
        raise DegenerateDomainError("triangulation produced no triangles")
    return Mesh(pts, tri, nbr)


def _insertion_order(pts, skip):
    # Serpentine sweep over coarse rows keeps consecutive insertions close,
    # so the point-location walk stays short.
    m = pts.shape[0]
    rows = max(1, int(math.sqrt(m / 2)))
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    r = np.minimum(((pts[:, 1] - lo[1]) / span[1] * rows).astype(int), rows - 1)
    xkey = np.where(r % 2 == 0, pts[:, 0], -pts[:, 0])
    order = np.lexsort((xkey, r))
    return [int(i) for i in order if int(i) not in skip]


def _check_nondegenerate(pts):
    if pts.shape[0] < 3:
        raise DegenerateDomainError("fewer than 3 distinct nodes")
    centred = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[-1] <= 1e-12 * max(sv[0], 1e-300):
        raise DegenerateDomainError("all nodes are collinear")


# ---------------------------------------------------------------------------
# Mesh construction from data
# ---------------------------------------------------------------------------


def grid_shape(target_nodes: int, width: float, height: float) -> tuple[int, int]:
    """Grid dimensions ``(nx, ny)`` with ``nx * ny`` close to the target."""
    nx = max(2, int(round(math.sqrt(target_nodes * width / height))))
    ny = max(2, int(round(target_nodes / nx)))
    return nx, ny


def build_mesh(locations, target_nodes: int, buffer_fraction: float = 0.1,
               seed: int = 0) -> Mesh:
    """Build a Delaunay mesh enveloping ``locations``.

    Nodes form an ``nx`` by ``ny`` grid over the bounding box of the
    locations, expanded by ``buffer_fraction`` of the box width/height on
    each side.  Interior nodes are jittered by up to 20% of the grid spacing
    using ``seed``; boundary nodes stay on the box so that the mesh covers
    it exactly.

    Parameters
    ----------
    locations : array-like of shape (n, 2)
    target_nodes : int
        Requested number of mesh vertices ``m`` (at least 4).
    buffer_fraction : float, default=0.1
    seed : int, default=0

    Returns
    -------
    Mesh
    """
    locs = np.asarray(locations, dtype=float).reshape(-1, 2)
    if locs.shape[0] == 0:
        raise ValueError("locations must be non-empty")
    if not np.all(np.isfinite(locs)):
        raise ValueError("locations must be finite")
    if int(target_nodes) < 4:
        raise ValueError("target_nodes must be at least 4")
    if buffer_fraction < 0:
        raise ValueError("buffer_fraction must be non-negative")
    lo, hi = locs.min(axis=0), locs.max(axis=0)
    span = hi - lo
    if np.any(span <= DEDUP_TOL * max(float(span.max()), 1.0)):
        raise DegenerateDomainError("locations span a degenerate (zero-area) box")
    lo = lo - buffer_fraction * span
    hi = hi + buffer_fraction * span
    width, height = hi - lo
    nx, ny = grid_shape(int(target_nodes), width, height)
    gx = np.linspace(lo[0], hi[0], nx)
    gy = np.linspace(lo[1], hi[1], ny)
    X, Y = np.meshgrid(gx, gy)
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    interior = ((nodes[:, 0] > lo[0]) & (nodes[:, 0] < hi[0])
                & (nodes[:, 1] > lo[1]) & (nodes[:, 1] < hi[1]))
    rng = np.random.default_rng(seed)
    jitter = rng.uniform(-JITTER_FRACTION, JITTER_FRACTION, size=nodes.shape)
    jitter *= np.array([width / (nx - 1), height / (ny - 1)])
    nodes[interior] += jitter[interior]
    mesh = delaunay(nodes)
    mesh.boundary_box = (lo[0], hi[0], lo[1], hi[1])
    return mesh


# ---------------------------------------------------------------------------
# Graph and projection
# ---------------------------------------------------------------------------


def adjacency(mesh: Mesh) -> sp.csr_matrix:
    """Symmetric 0/1 neighbourhood matrix of the mesh vertices."""
    e = mesh.edges()
    m = mesh.n_vertices
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    N = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(m, m))
    N.sum_duplicates()
    N.data[:] = 1.0
    return N


def _barycentric(tri_xy, p):
    a, b, c = tri_xy
    area = _orient(a[0], a[1], b[0], b[1], c[0], c[1])
    w0 = _orient(b[0], b[1], c[0], c[1], p[0], p[1]) / area
    w1 = _orient(c[0], c[1], a[0], a[1], p[0], p[1]) / area
    w2 = 1.0 - w0 - w1
    return np.array([w0, w1, w2])


class Locator:
    """Point locator with per-instance walk state.

    Each thread or caller should own its ``Locator``; the mesh itself is
    never modified.
    """

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.last = 0
        self._scale = float(np.ptp(mesh.vertices, axis=0).max()) or 1.0
        self._tol = INSIDE_TOL

    def _weights(self, t, p):
        v = self.mesh.vertices[self.mesh.triangles[t]]
        return _barycentric(v, p)

    def _walk(self, p):
        tri, nbr, verts = self.mesh.triangles, self.mesh.neighbors, self.mesh.vertices
        t = self.last if self.last < tri.shape[0] else 0
        tol = self._tol
        for _ in range(tri.shape[0] + 8):
            w = self._weights(t, p)
            i = int(np.argmin(w))
            if w[i] >= -tol:
                return t, w
            s = nbr[t, i]
            if s < 0:
                break
            t = int(s)
        return self._brute(p)

    def _brute(self, p):
        v = self.mesh.vertices[self.mesh.triangles]
        a, b, c = v[:, 0], v[:, 1], v[:, 2]
        area = _cross(b - a, c - a)
        w0 = _cross(c - b, p - b) / area
        w1 = _cross(a - c, p - c) / area
        w2 = 1.0 - w0 - w1
        W = np.column_stack([w0, w1, w2])
        ok = np.flatnonzero(W.min(axis=1) >= -self._tol)
        if ok.size == 0:
            return None, None
        return int(ok[0]), W[ok[0]]

    def locate(self, p):
        p = np.asarray(p, dtype=float)
        t, w = self._walk(p)
        if t is None:
            raise OutOfMeshError(p)
        if np.any(np.abs(w) <= self._tol):
            # On an edge or vertex: the lowest-index containing triangle wins.
            t, w = self._brute(p)
        self.last = t
        w = np.clip(w, 0.0, None)
        return t, w / w.sum()


def locate(mesh: Mesh, p, locator: Locator | None = None):
    """Find the triangle containing ``p`` and its barycentric weights.

    Returns
    -------
    triangle_index : int
    weights : ndarray of shape (3,)
        Non-negative weights summing to one, aligned with
        ``mesh.triangles[triangle_index]``.

    Raises
    ------
    OutOfMeshError
        If ``p`` lies outside every triangle (beyond a 1e-9 tolerance).
    """
    return (locator or Locator(mesh)).locate(p)


def projector(mesh: Mesh, locations) -> sp.csr_matrix:
    """Sparse ``n x m`` piecewise-linear interpolation matrix."""
    locs = np.asarray(locations, dtype=float).reshape(-1, 2)
    n = locs.shape[0]
    loc = Locator(mesh)
    # Visit queries in a serpentine order so consecutive walks are short.
    order = _insertion_order(locs, set()) if n > 1 else [0] * n
    rows = np.repeat(np.arange(n), 3)
    cols = np.empty(3 * n, dtype=np.int64)
    vals = np.empty(3 * n)
    for i in order:
        try:
            t, w = loc.locate(locs[i])
        except OutOfMeshError:
            raise OutOfMeshError(locs[i], row=i) from None
        cols[3 * i:3 * i + 3] = mesh.triangles[t]
        vals[3 * i:3 * i + 3] = w
    A = sp.csr_matrix((vals, (rows, cols)), shape=(n, mesh.n_vertices))
    A.eliminate_zeros()
    return A


# ---------------------------------------------------------------------------
# Plain-text IO
# ---------------------------------------------------------------------------


def save_mesh(mesh: Mesh, path) -> None:
    """Write ``m t`` header, ``m`` vertex lines and ``t`` triangle lines."""
    with open(path, "w") as fh:
        fh.write(f"{mesh.n_vertices} {mesh.n_triangles}\n")
        for x, y in mesh.vertices.tolist():
            fh.write(f"{x!r} {y!r}\n")
        for i, j, k in mesh.triangles.tolist():
            fh.write(f"{i} {j} {k}\n")


def load_mesh(path) -> Mesh:
    with open(path) as fh:
        m, t = (int(v) for v in fh.readline().split())
        verts = np.array([[float(v) for v in fh.readline().split()] for _ in range(m)])
        tris = np.array([[int(v) for v in fh.readline().split()] for _ in range(t)],
                        dtype=np.int64)
    return Mesh(verts.reshape(m, 2), tris.reshape(t, 3))
