"""Selective volume subdivision of tet grids and alpha-weighted Loop subdivision of meshes."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .marching import TriangleMesh
from .tetgrid import TET_EDGES, TetGrid, orient_positive, surface_tets


@dataclass(eq=False)
class SubdivisionPlan:
    selected: np.ndarray  # (k,) tet ids, ascending
    edges: np.ndarray  # (E, 2) sorted grid edges of the selected tets
    midpoints: np.ndarray  # (E,) vertex id of each edge midpoint in the subdivided grid

    @property
    def edge_midpoints(self) -> dict[tuple[int, int], int]:
        return {(int(a), int(b)): int(m) for (a, b), m in zip(self.edges, self.midpoints)}


def plan_subdivision(grid: TetGrid, tets=None) -> SubdivisionPlan:
    """Select the surface tets plus every tet sharing a vertex with one.

    Pass ``tets`` to subdivide an explicit selection instead.
    """
    if tets is None:
        surf = surface_tets(grid)
        touched = np.zeros(grid.num_vertices, dtype=bool)
        touched[grid.tets[surf].reshape(-1)] = True
        selected = np.flatnonzero(touched[grid.tets].any(axis=1))
    else:
        selected = np.unique(np.asarray(tets, dtype=np.int64))
    st = grid.tets[selected]
    keep = np.unique(st)
    edges = np.unique(np.sort(st[:, TET_EDGES].reshape(-1, 2), axis=1), axis=0)
    return SubdivisionPlan(selected, edges, len(keep) + np.arange(len(edges)))


# children of a tet in terms of its corners 0-3 and edge midpoints 4-9
# (midpoint 4 + e sits on TET_EDGES[e]: 01, 02, 03, 12, 13, 23)
_CHILDREN = np.array(
    [
        [0, 4, 5, 6],
        [4, 1, 7, 8],
        [5, 7, 2, 9],
        [6, 8, 9, 3],
        # inner octahedron split around the 02-13 diagonal
        [5, 8, 4, 7],
        [5, 8, 7, 9],
        [5, 8, 9, 6],
        [5, 8, 6, 4],
    ]
)


def subdivide_volume(grid: TetGrid, plan: SubdivisionPlan | None = None) -> TetGrid:
    """Split every selected tet into 8 through its edge midpoints.

    Midpoints take the mean rest position, deformation and SDF of their edge,
    so the piecewise-linear field, and hence the extracted surface, is
    unchanged. Unselected tets and vertices only they used are dropped.
    """
    if plan is None:
        plan = plan_subdivision(grid)
    if plan.selected.size == 0:
        raise ValueError("no-surface: nothing selected for subdivision")
    st = grid.tets[plan.selected]
    keep = np.unique(st)
    remap = np.full(grid.num_vertices, -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))

    a, b = plan.edges[:, 0], plan.edges[:, 1]

    def extend(x):
        return np.concatenate([x[keep], 0.5 * (x[a] + x[b])])

    rest = extend(grid.rest_positions)
    deform = extend(grid.deformations)
    sdf = extend(grid.sdf)

    V = grid.num_vertices
    ekeys = plan.edges[:, 0] * V + plan.edges[:, 1]
    local = np.sort(st[:, TET_EDGES], axis=2)
    mid = plan.midpoints[np.searchsorted(ekeys, local[..., 0] * V + local[..., 1])]  # (k, 6)
    nodes = np.concatenate([remap[st], mid], axis=1)  # (k, 10)
    children = nodes[:, _CHILDREN].reshape(-1, 4)
    children = orient_positive(rest, children)
    return replace(
        grid,
        rest_positions=rest,
        deformations=deform,
        sdf=sdf,
        tets=children,
        level=grid.level + 1,
    )


# ---------------------------------------------------------------------------
# Loop subdivision with a per-vertex smoothing weight


def classic_loop_alpha(valence) -> np.ndarray:
    """Alpha reproducing Loop's even-vertex rule: n * beta(n)."""
    n = np.asarray(valence, dtype=np.float64)
    return 5.0 / 8.0 - (3.0 / 8.0 + 0.25 * np.cos(2.0 * np.pi / n)) ** 2


def valences(mesh: TriangleMesh) -> np.ndarray:
    edges, _ = mesh.edges()
    return np.bincount(edges.reshape(-1), minlength=mesh.num_vertices)


@dataclass(eq=False)
class _LoopLevel:
    triangles: np.ndarray  # refined faces
    neighbor_mean: sp.csr_matrix  # (V, V)
    odd: sp.csr_matrix  # (E, V) odd-vertex stencil
    inherit: sp.csr_matrix  # (V + E, V) alpha carried to the refined mesh


def _loop_level(triangles: np.ndarray, V: int) -> _LoopLevel:
    F = len(triangles)
    he = triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)  # half-edges, 3 per face
    opp = triangles[:, [2, 0, 1]].reshape(-1)  # vertex opposite each half-edge
    key = np.sort(he, axis=1)
    edges, inv = np.unique(key, axis=0, return_inverse=True)
    E = len(edges)
    inv = inv.reshape(-1)

    # each edge has two half-edges on a closed manifold
    order = np.argsort(inv, kind="stable")
    opp_pairs = opp[order].reshape(E, 2)

    rows = np.repeat(np.arange(E), 4)
    cols = np.concatenate([edges, opp_pairs], axis=1).reshape(-1)
    vals = np.tile([3 / 8, 3 / 8, 1 / 8, 1 / 8], E)
    odd = sp.csr_matrix((vals, (rows, cols)), shape=(E, V))

    adj = sp.csr_matrix(
        (np.ones(2 * E), (edges.reshape(-1), edges[:, ::-1].reshape(-1))), shape=(V, V)
    )
    deg = np.asarray(adj.sum(axis=1)).reshape(-1)
    neighbor_mean = sp.diags(1.0 / deg) @ adj

    inherit = sp.vstack(
        [
            sp.identity(V, format="csr"),
            sp.csr_matrix((np.full(2 * E, 0.5), (np.repeat(np.arange(E), 2), edges.reshape(-1))), shape=(E, V)),
        ]
    ).tocsr()

    m = V + inv.reshape(F, 3)  # midpoints of edges 01, 12, 20
    t = triangles
    refined = np.concatenate(
        [
            np.stack([t[:, 0], m[:, 0], m[:, 2]], 1),
            np.stack([t[:, 1], m[:, 1], m[:, 0]], 1),
            np.stack([t[:, 2], m[:, 2], m[:, 1]], 1),
            np.stack([m[:, 0], m[:, 1], m[:, 2]], 1),
        ],
        axis=1,
    ).reshape(-1, 3)
    return _LoopLevel(refined, neighbor_mean.tocsr(), odd, inherit)


def _check_alphas(mesh: TriangleMesh, alphas) -> np.ndarray:
    a = np.asarray(alphas, dtype=np.float64).reshape(-1)
    if a.shape != (mesh.num_vertices,):
        raise ValueError(f"expected {mesh.num_vertices} alpha values, got {a.size}")
    if np.any((a < 0) | (a > 1)):
        raise ValueError("alpha values must lie in [0, 1]")
    return a


def _forward(mesh, alphas, iterations):
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    if iterations and not mesh.is_closed_manifold():
        raise ValueError("loop subdivision needs a closed 2-manifold mesh")
    a = _check_alphas(mesh, alphas)
    P, T = mesh.positions, mesh.triangles
    tape = []
    for _ in range(iterations):
        lvl = _loop_level(T, len(P))
        avg = lvl.neighbor_mean @ P
        even = (1.0 - a)[:, None] * P + a[:, None] * avg
        tape.append((lvl, P, avg, a))
        P = np.concatenate([even, lvl.odd @ P])
        a = lvl.inherit @ a
        T = lvl.triangles
    return P, T, a, tape


def loop_subdivide(mesh: TriangleMesh, alphas, iterations: int = 1, return_alphas: bool = False):
    """Loop subdivision where even vertices move to (1-a) v + a mean(1-ring).

    Odd vertices use the classic 3/8, 3/8, 1/8, 1/8 stencil. Alphas are given
    for the input vertices; refined odd vertices inherit the mean alpha of
    their edge. ``alphas = classic_loop_alpha(valences(mesh))`` reproduces one
    step of classic Loop.
    """
    P, T, a, _ = _forward(mesh, alphas, iterations)
    out = TriangleMesh(P, T)
    return (out, a) if return_alphas else out


def loop_subdivide_vjp(mesh: TriangleMesh, alphas, iterations: int, d_positions):
    """Gradients of <d_positions, loop_subdivide(...).positions> w.r.t. the
    input positions and alphas."""
    P, _, _, tape = _forward(mesh, alphas, iterations)
    g = np.asarray(d_positions, dtype=np.float64)
    if g.shape != P.shape:
        raise ValueError(f"cotangent shape {g.shape} does not match output {P.shape}")
    g_alpha = np.zeros(len(P))
    for lvl, Pk, avg, a in reversed(tape):
        V = len(Pk)
        g_even, g_odd = g[:V], g[V:]
        g_alpha = lvl.inherit.T @ g_alpha + np.einsum("ij,ij->i", g_even, avg - Pk)
        g = (1.0 - a)[:, None] * g_even + lvl.neighbor_mean.T @ (a[:, None] * g_even) + lvl.odd.T @ g_odd
    return g, g_alpha
