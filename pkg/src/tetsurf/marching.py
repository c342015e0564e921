"""Marching tetrahedra with reverse-mode gradients, plus a marching cubes baseline."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import _mc_tables
from .tetgrid import TET_EDGES, TetGrid, negative_mask


@dataclass(eq=False)
class TriangleMesh:
    positions: np.ndarray  # (N, 3)
    triangles: np.ndarray  # (F, 3) int64
    provenance: np.ndarray | None = None  # (N, 2) grid edge each vertex was born on, a < b

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    @property
    def num_vertices(self) -> int:
        return len(self.positions)

    @property
    def num_faces(self) -> int:
        return len(self.triangles)

    def is_empty(self) -> bool:
        return self.num_faces == 0

    def face_cross(self) -> np.ndarray:
        p = self.positions[self.triangles]
        return np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        c = self.face_cross()
        n = np.linalg.norm(c, axis=1, keepdims=True)
        return np.divide(c, n, out=np.zeros_like(c), where=n > 0)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique undirected edges (sorted pairs) and how many faces use each."""
        e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(e, axis=0, return_counts=True)

    def euler_characteristic(self) -> int:
        used = np.unique(self.triangles).size
        return int(used - len(self.edges()[0]) + self.num_faces)

    def is_closed_manifold(self) -> bool:
        """Every edge has exactly two faces, traversed in opposite directions,
        and every vertex link is a single fan."""
        if self.is_empty():
            return False
        _, counts = self.edges()
        if np.any(counts != 2):
            return False
        directed = self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        if len(np.unique(directed, axis=0)) != len(directed):
            return False
        return _vertex_links_are_disks(self.triangles)


def _vertex_links_are_disks(triangles: np.ndarray) -> bool:
    # with the edge condition holding, the link of v is a union of cycles;
    # it is a single cycle iff #incident faces == the length of one walk
    nxt: dict[tuple[int, int], int] = {}
    incident: dict[int, int] = {}
    for a, b, c in triangles.tolist():
        for v, x, y in ((a, b, c), (b, c, a), (c, a, b)):
            nxt[(v, x)] = y
            incident[v] = incident.get(v, 0) + 1
    start: dict[int, int] = {}
    for (v, x) in nxt:
        start.setdefault(v, x)
    for v, x0 in start.items():
        x, n = x0, 0
        while True:
            x = nxt[(v, x)]
            n += 1
            if x == x0 or n > incident[v]:
                break
        if n != incident[v]:
            return False
    return True


class TetCase(Enum):
    EMPTY = 0
    ONE_TRIANGLE = 1
    TWO_TRIANGLES = 2


# reference positively oriented tet used to fix the winding of the tables
_REF_TET = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


def _build_tet_table():
    edge_id = {tuple(e): i for i, e in enumerate(TET_EDGES.tolist())}

    def eid(a, b):
        return edge_id[(min(a, b), max(a, b))]

    table = np.full((16, 2, 3), -1, dtype=np.int64)
    count = np.zeros(16, dtype=np.int64)
    for code in range(16):
        neg = [k for k in range(4) if code >> k & 1]
        pos = [k for k in range(4) if not code >> k & 1]
        if len(neg) in (0, 4):
            continue
        if len(neg) == 2:
            (a, b), (c, d) = neg, pos
            tris = [[eid(a, c), eid(a, d), eid(b, d)], [eid(a, c), eid(b, d), eid(b, c)]]
        else:
            lone = neg[0] if len(neg) == 1 else pos[0]
            others = [k for k in range(4) if k != lone]
            tris = [[eid(lone, k) for k in others]]
        # orient so that the normal points toward positive values
        s = np.where([code >> k & 1 for k in range(4)], -1.0, 1.0)
        grad = np.linalg.solve(_REF_TET[1:] - _REF_TET[0], s[1:] - s[0])
        mid = _REF_TET[TET_EDGES].mean(axis=1)
        for t, tri in enumerate(tris):
            p = mid[tri]
            if np.dot(np.cross(p[1] - p[0], p[2] - p[0]), grad) < 0:
                tri[1], tri[2] = tri[2], tri[1]
            table[code, t] = tri
        count[code] = len(tris)
    return table, count


TET_TRI_TABLE, TET_TRI_COUNT = _build_tet_table()


def classify_tet(signs) -> tuple[TetCase, np.ndarray]:
    """Classify a tet from its 4 corner signs (True = negative).

    Returns the case and the triangles as rows of local edge ids (indices into
    ``TET_EDGES``) wound so their normals point toward the positive corners.
    """
    signs = [bool(s) for s in signs]
    if len(signs) != 4:
        raise ValueError("expected 4 signs")
    code = sum(int(s) << k for k, s in enumerate(signs))
    n = int(TET_TRI_COUNT[code])
    return TetCase(n), TET_TRI_TABLE[code, :n].copy()


def edge_crossing(p_a, p_b, s_a: float, s_b: float) -> np.ndarray:
    """Zero of the linear interpolant of (s_a, s_b) along the segment p_a -> p_b."""
    assert (s_a < 0) != (s_b < 0), "edge_crossing needs a sign change"
    p_a = np.asarray(p_a, dtype=np.float64)
    p_b = np.asarray(p_b, dtype=np.float64)
    return (p_a * s_b - p_b * s_a) / (s_b - s_a)


def edge_crossing_jacobian(p_a, p_b, s_a: float, s_b: float):
    """Partials of :func:`edge_crossing`: (dx/dp_a, dx/dp_b) as scalars times I,
    and dx/ds_a, dx/ds_b as 3-vectors."""
    x = edge_crossing(p_a, p_b, s_a, s_b)
    d = s_b - s_a
    return s_b / d, -s_a / d, (x - np.asarray(p_b, float)) / d, (np.asarray(p_a, float) - x) / d


def marching_tetrahedra(grid: TetGrid) -> TriangleMesh:
    """Extract the zero level set of the grid's piecewise-linear SDF.

    One output vertex per sign-changing grid edge, ordered by the sorted edge
    pair; triangles are emitted in tet order. Zero-area triangles are kept.
    """
    V = grid.num_vertices
    neg = negative_mask(grid.sdf)
    tneg = neg[grid.tets]
    nneg = tneg.sum(axis=1)
    surf = np.flatnonzero((nneg > 0) & (nneg < 4))
    if surf.size == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 2), dtype=np.int64))

    st = grid.tets[surf]
    sneg = tneg[surf]
    code = (sneg * (1 << np.arange(4))).sum(axis=1)

    ends = st[:, TET_EDGES]  # (S, 6, 2)
    crossed = sneg[:, TET_EDGES[:, 0]] != sneg[:, TET_EDGES[:, 1]]
    lo = np.minimum(ends[..., 0], ends[..., 1])
    hi = np.maximum(ends[..., 0], ends[..., 1])
    keys = lo * V + hi
    ukeys, inv = np.unique(keys[crossed], return_inverse=True)
    vmap = np.full(crossed.shape, -1, dtype=np.int64)
    vmap[crossed] = inv

    edges = np.stack([ukeys // V, ukeys % V], axis=1)
    pos = grid.positions
    s = grid.sdf
    a, b = edges[:, 0], edges[:, 1]
    sa, sb = s[a][:, None], s[b][:, None]
    verts = (pos[a] * sb - pos[b] * sa) / (sb - sa)

    local = TET_TRI_TABLE[code]  # (S, 2, 3)
    valid = np.arange(2)[None, :] < TET_TRI_COUNT[code][:, None]
    rows = np.arange(len(surf))[:, None, None]
    tris = vmap[rows, np.where(local < 0, 0, local)]
    return TriangleMesh(verts, tris[valid], edges)


@dataclass(eq=False)
class Cotangents:
    d_position: np.ndarray  # (V, 3)
    d_sdf: np.ndarray  # (V,)


def _check_provenance(grid: TetGrid, mesh: TriangleMesh) -> np.ndarray:
    prov = mesh.provenance
    if prov is None or prov.shape != (mesh.num_vertices, 2):
        raise ValueError("mesh has no grid-edge provenance")
    if prov.size == 0:
        return prov
    if prov.min() < 0 or prov.max() >= grid.num_vertices:
        raise ValueError("provenance refers to vertices outside the grid")
    neg = negative_mask(grid.sdf)
    if np.any(neg[prov[:, 0]] == neg[prov[:, 1]]):
        raise ValueError("provenance edge without a sign change; mesh does not match grid")
    a, b = prov[:, 0], prov[:, 1]
    sa, sb = grid.sdf[a][:, None], grid.sdf[b][:, None]
    x = (grid.positions[a] * sb - grid.positions[b] * sa) / (sb - sa)
    if not np.array_equal(x, mesh.positions):
        raise ValueError("mesh positions do not match the grid; re-extract before the VJP")
    return prov


def marching_tetrahedra_vjp(grid: TetGrid, mesh: TriangleMesh, d_mesh_positions) -> Cotangents:
    """Pull a cotangent on mesh vertex positions back to grid positions and SDF."""
    g = np.asarray(d_mesh_positions, dtype=np.float64)
    if g.shape != (mesh.num_vertices, 3):
        raise ValueError(f"expected cotangent of shape ({mesh.num_vertices}, 3), got {g.shape}")
    prov = _check_provenance(grid, mesh)
    V = grid.num_vertices
    d_pos = np.zeros((V, 3))
    d_sdf = np.zeros(V)
    if prov.size == 0:
        return Cotangents(d_pos, d_sdf)

    a, b = prov[:, 0], prov[:, 1]
    pa, pb = grid.positions[a], grid.positions[b]
    sa, sb = grid.sdf[a], grid.sdf[b]
    d = (sb - sa)[:, None]
    x = mesh.positions
    ga = g * (sb[:, None] / d)
    gb = g * (-sa[:, None] / d)
    gsa = np.einsum("ij,ij->i", g, (x - pb) / d)
    gsb = np.einsum("ij,ij->i", g, (pa - x) / d)

    # bincount sums in index order, so the reduction is deterministic
    idx = np.concatenate([a, b])
    for k in range(3):
        d_pos[:, k] = np.bincount(idx, weights=np.concatenate([ga[:, k], gb[:, k]]), minlength=V)
    d_sdf[:] = np.bincount(idx, weights=np.concatenate([gsa, gsb]), minlength=V)
    return Cotangents(d_pos, d_sdf)


def marching_cubes(values, resolution: int) -> TriangleMesh:
    """Classic marching cubes on a ``(resolution+1)^3`` lattice spanning [0, 1]^3.

    ``values[i, j, k]`` is sampled at ``(i, j, k) / resolution``. Vertices use
    the same linear zero crossing as :func:`marching_tetrahedra`, shared
    between cells through the lattice edge they lie on. No gradients.
    """
    if int(resolution) != resolution or resolution < 1:
        raise ValueError(f"resolution must be a positive integer, got {resolution!r}")
    n = int(resolution)
    m = n + 1
    vals = np.asarray(values, dtype=np.float64).reshape(m, m, m)
    flat = vals.reshape(-1)
    N = m**3

    cells = np.stack(np.meshgrid(*(np.arange(n),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    corner_ids = ((cells[:, None, :] + _mc_tables.CORNERS[None]) * [m * m, m, 1]).sum(-1)  # (C, 8)
    neg = flat[corner_ids] < 0
    code = (neg * (1 << np.arange(8))).sum(axis=1)
    active = (code > 0) & (code < 255)
    corner_ids, code = corner_ids[active], code[active]
    if code.size == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    rows = _mc_tables.TRI_TABLE[code]  # (A, 16)
    tri_edges = rows[:, :15].reshape(-1, 5, 3)
    valid = tri_edges[:, :, 0] >= 0
    cell_of = np.broadcast_to(np.arange(len(code))[:, None, None], tri_edges.shape)[valid]
    local = tri_edges[valid]  # (T, 3) local edge ids

    ends = corner_ids[cell_of[:, :, None], _mc_tables.EDGES[local]]  # (T, 3, 2)
    lo = ends.min(axis=-1)
    hi = ends.max(axis=-1)
    keys = lo * N + hi
    ukeys, inv = np.unique(keys.reshape(-1), return_inverse=True)
    a, b = ukeys // N, ukeys % N
    lattice = np.stack(np.unravel_index(np.arange(N), (m, m, m)), axis=1) / n
    sa, sb = flat[a][:, None], flat[b][:, None]
    verts = (lattice[a] * sb - lattice[b] * sa) / (sb - sa)
    # the table winds toward the negative corners; flip to match MT
    tris = inv.reshape(-1, 3)[:, [0, 2, 1]]
    return TriangleMesh(verts, tris)
