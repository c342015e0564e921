"""Deformable tetrahedral grid over the unit cube.

Each vertex carries a rest position, a clamped deformation offset and a
signed distance value (negative inside). The grid is a value type: every
mutating operation returns a new :class:`TetGrid`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import NewType

import numpy as np

TetId = NewType("TetId", int)
VertexId = NewType("VertexId", int)

SCHEMES = ("six-tet", "bcc")

# Per-axis clamp, in cell edges, that keeps every level-0 tet positively
# oriented. Signed volume is affine in each corner's offset, so the worst case
# sits on the corners of the clamp boxes; enumerating them gives exact limits
# of 1/6 (Kuhn tets) and 1/8 (BCC tets).
SAFE_CLAMP = {"six-tet": 0.16, "bcc": 0.12}

# the six local edges of a tetrahedron, as index pairs into its 4 corners
TET_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]], dtype=np.int64)


@dataclass(frozen=True, eq=False)
class TetGrid:
    rest_positions: np.ndarray  # (V, 3)
    deformations: np.ndarray  # (V, 3)
    sdf: np.ndarray  # (V,)
    tets: np.ndarray  # (K, 4) int64, positively oriented at rest
    level: int = 0
    base_resolution: int = 1
    clamp_radius: float = 0.0
    scheme: str = field(default="six-tet")

    def __post_init__(self):
        V = len(self.rest_positions)
        if self.deformations.shape != (V, 3):
            raise ValueError("deformations must have shape (V, 3)")
        if self.sdf.shape != (V,):
            raise ValueError("sdf must have shape (V,)")
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= V):
            raise ValueError("tet index out of range")

    @property
    def num_vertices(self) -> int:
        return len(self.rest_positions)

    @property
    def num_tets(self) -> int:
        return len(self.tets)

    @property
    def positions(self) -> np.ndarray:
        """Deformed vertex positions."""
        return self.rest_positions + self.deformations

    def with_sdf(self, sdf) -> "TetGrid":
        sdf = np.asarray(sdf, dtype=np.float64).reshape(-1)
        if sdf.shape != (self.num_vertices,):
            raise ValueError(f"expected {self.num_vertices} SDF values, got {sdf.shape[0]}")
        return replace(self, sdf=sdf.copy())

    def with_deformations(self, deformations) -> "TetGrid":
        d = np.asarray(deformations, dtype=np.float64)
        if d.shape != (self.num_vertices, 3):
            raise ValueError("deformations must have shape (V, 3)")
        return replace(self, deformations=np.clip(d, -self.clamp_radius, self.clamp_radius))

    def signed_volumes(self, deformed: bool = True) -> np.ndarray:
        pos = self.positions if deformed else self.rest_positions
        return tet_signed_volumes(pos, self.tets)


def tet_signed_volumes(positions: np.ndarray, tets: np.ndarray) -> np.ndarray:
    p = positions[tets]
    a = p[:, 1] - p[:, 0]
    b = p[:, 2] - p[:, 0]
    c = p[:, 3] - p[:, 0]
    return np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0


def orient_positive(positions: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Swap the last two corners of every negatively oriented tet."""
    tets = np.array(tets, dtype=np.int64, copy=True)
    neg = tet_signed_volumes(positions, tets) < 0
    tets[neg, 2], tets[neg, 3] = tets[neg, 3].copy(), tets[neg, 2].copy()
    return tets


def unique_edges(tets: np.ndarray) -> np.ndarray:
    """Sorted (a < b) unique edges of a tet list, in lexicographic order."""
    e = np.sort(tets[:, TET_EDGES].reshape(-1, 2), axis=1)
    return np.unique(e, axis=0)


def _lattice_index(n: int):
    m = n + 1

    def idx(i, j, k):
        return (np.asarray(i) * m + np.asarray(j)) * m + np.asarray(k)

    return idx


def _six_tet(n: int) -> tuple[np.ndarray, np.ndarray]:
    m = n + 1
    g = np.arange(m) / n
    rest = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    idx = _lattice_index(n)
    cells = np.stack(np.meshgrid(*(np.arange(n),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)

    tets = []
    # Kuhn decomposition: one tet per monotone path from the cell's min to max corner
    for perm in itertools.permutations(range(3)):
        corner = np.zeros(3, dtype=np.int64)
        path = [idx(*(cells + corner).T)]
        for axis in perm:
            corner[axis] += 1
            path.append(idx(*(cells + corner).T))
        tets.append(np.stack(path, axis=1))
    # interleave so that the 6 tets of one cell are contiguous
    tets = np.stack(tets, axis=1).reshape(-1, 4)
    return rest, tets


def _bcc(n: int) -> tuple[np.ndarray, np.ndarray]:
    m = n + 1
    corners, _ = _six_tet(n)
    h = 1.0 / n
    c = (np.arange(n) + 0.5) * h
    centers = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1).reshape(-1, 3)
    rest = np.concatenate([corners, centers])
    idx = _lattice_index(n)

    def center(i, j, k):
        return m**3 + (np.asarray(i) * n + np.asarray(j)) * n + np.asarray(k)

    tets = []
    for a in range(3):
        b, c_ = [x for x in range(3) if x != a]
        eb = np.zeros(3, dtype=np.int64)
        eb[b] = 1
        ec = np.zeros(3, dtype=np.int64)
        ec[c_] = 1
        ea = np.zeros(3, dtype=np.int64)
        ea[a] = 1
        # faces perpendicular to axis a, at lattice plane p along a
        shape = [n, n, n]
        shape[a] = n + 1
        faces = np.stack(np.meshgrid(*[np.arange(s) for s in shape], indexing="ij"), axis=-1)
        faces = faces.reshape(-1, 3)
        quad = [idx(*(faces + off).T) for off in (0 * ea, eb, eb + ec, ec)]
        lower_cell = faces - ea
        upper_cell = faces
        has_lower = faces[:, a] > 0
        has_upper = faces[:, a] < n

        interior = has_lower & has_upper
        c1 = center(*lower_cell[interior].T)
        c2 = center(*upper_cell[interior].T)
        for q in range(4):
            qa = quad[q][interior]
            qb = quad[(q + 1) % 4][interior]
            tets.append(np.stack([c1, c2, qa, qb], axis=1))

        # boundary faces: the pyramid (cell center, face quad) split along one diagonal
        for mask, cell in ((has_lower & ~has_upper, lower_cell), (has_upper & ~has_lower, upper_cell)):
            cc = center(*cell[mask].T)
            q0, q1, q2, q3 = (qq[mask] for qq in quad)
            tets.append(np.stack([cc, q0, q1, q2], axis=1))
            tets.append(np.stack([cc, q0, q2, q3], axis=1))
    return rest, np.concatenate(tets)


def build_grid(resolution: int, scheme: str = "six-tet", clamp_radius: float | None = None) -> TetGrid:
    """Tetrahedralize [0, 1]^3 with ``resolution`` cells per axis.

    ``six-tet`` splits every cubic cell into the 6 Kuhn tetrahedra sharing its
    main diagonal; ``bcc`` adds one vertex per cell center and builds the
    body-centered-cubic tetrahedralization (pyramids on the cube boundary).
    The default clamp radius is ``SAFE_CLAMP[scheme]`` cell edges per axis.
    """
    if int(resolution) != resolution or resolution < 1:
        raise ValueError(f"resolution must be a positive integer, got {resolution!r}")
    resolution = int(resolution)
    if scheme == "six-tet":
        rest, tets = _six_tet(resolution)
    elif scheme == "bcc":
        rest, tets = _bcc(resolution)
    else:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    tets = orient_positive(rest, tets)
    if clamp_radius is None:
        clamp_radius = SAFE_CLAMP[scheme] / resolution
    V = len(rest)
    return TetGrid(
        rest_positions=rest,
        deformations=np.zeros((V, 3)),
        sdf=np.zeros(V),
        tets=tets,
        level=0,
        base_resolution=resolution,
        clamp_radius=float(clamp_radius),
        scheme=scheme,
    )


def interpolate(grid: TetGrid, tet: int, barycentric) -> float:
    w = np.asarray(barycentric, dtype=np.float64)
    if w.shape != (4,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"barycentric weights {w.tolist()} are not on the 3-simplex")
    if not 0 <= tet < grid.num_tets:
        raise ValueError(f"tet {tet} out of range")
    return float(np.dot(w, grid.sdf[grid.tets[tet]]))


def negative_mask(sdf: np.ndarray) -> np.ndarray:
    # sign(0) is positive
    return np.asarray(sdf) < 0


def surface_tets(grid: TetGrid) -> np.ndarray:
    """Indices of tets whose corner signs are not all equal."""
    neg = negative_mask(grid.sdf)[grid.tets].sum(axis=1)
    return np.flatnonzero((neg > 0) & (neg < 4))


def apply_deformation(grid: TetGrid, deltas) -> TetGrid:
    d = np.asarray(deltas, dtype=np.float64)
    if d.shape != (grid.num_vertices, 3):
        raise ValueError(f"expected deltas of shape ({grid.num_vertices}, 3), got {d.shape}")
    return grid.with_deformations(grid.deformations + d)
