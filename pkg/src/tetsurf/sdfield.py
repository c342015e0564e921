"""Signed distance evaluation.

Analytic primitives (used as fixtures and oracle targets), exact signed
distance to a closed triangle mesh, SDF patches around a point with their
gradient w.r.t. mesh vertices, and curvature-weighted vertex selection.
Negative values are inside.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .marching import TriangleMesh


def _as_points(p):
    p = np.asarray(p, dtype=np.float64)
    return p.reshape(-1, 3), p.ndim == 1


class AnalyticSdf:
    """Base class; subclasses implement ``_eval`` on an (N, 3) array."""

    def __call__(self, p):
        pts, single = _as_points(p)
        out = self._eval(pts)
        return float(out[0]) if single else out

    def _eval(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample_surface(self, n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Uniform-by-area surface samples and outward unit normals."""
        raise NotImplementedError(f"{type(self).__name__} has no exact surface sampler")

    def __or__(self, other):
        return Union(self, other)

    def __and__(self, other):
        return Intersection(self, other)


@dataclass(frozen=True)
class Sphere(AnalyticSdf):
    center: tuple
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")

    def _eval(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=1) - self.radius

    def sample_surface(self, n, seed=0):
        rng = np.random.Generator(np.random.Philox(seed))
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.asarray(self.center) + self.radius * d, d


@dataclass(frozen=True)
class Torus(AnalyticSdf):
    """Torus around the z axis through ``center``."""

    center: tuple
    major: float
    minor: float

    def __post_init__(self):
        if self.minor <= 0 or self.major <= 0:
            raise ValueError("torus radii must be positive")

    def _eval(self, p):
        q = p - np.asarray(self.center)
        return np.hypot(np.hypot(q[:, 0], q[:, 1]) - self.major, q[:, 2]) - self.minor

    def sample_surface(self, n, seed=0):
        rng = np.random.Generator(np.random.Philox(seed))
        R, r = self.major, self.minor
        theta = np.empty(0)
        phi = np.empty(0)
        # area element is proportional to R + r cos(phi); rejection-sample phi
        while theta.size < n:
            m = 2 * (n - theta.size) + 16
            t = rng.uniform(0, 2 * np.pi, m)
            f = rng.uniform(0, 2 * np.pi, m)
            keep = rng.uniform(0, 1, m) * (R + r) < R + r * np.cos(f)
            theta = np.concatenate([theta, t[keep]])
            phi = np.concatenate([phi, f[keep]])
        theta, phi = theta[:n], phi[:n]
        nrm = np.stack([np.cos(phi) * np.cos(theta), np.cos(phi) * np.sin(theta), np.sin(phi)], axis=1)
        ring = np.stack([R * np.cos(theta), R * np.sin(theta), np.zeros(n)], axis=1)
        return np.asarray(self.center) + ring + r * nrm, nrm


@dataclass(frozen=True)
class Box(AnalyticSdf):
    center: tuple
    half_extents: tuple

    def __post_init__(self):
        if min(self.half_extents) <= 0:
            raise ValueError("box half-extents must be positive")

    def _eval(self, p):
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside

    def sample_surface(self, n, seed=0):
        return sample_surface_points(box_mesh(self.center, self.half_extents), n, seed)


@dataclass(frozen=True)
class Union(AnalyticSdf):
    """min of the two fields; a bound on the distance, not exact."""

    a: AnalyticSdf
    b: AnalyticSdf

    def _eval(self, p):
        return np.minimum(self.a._eval(p), self.b._eval(p))


@dataclass(frozen=True)
class Intersection(AnalyticSdf):
    """max of the two fields; a bound on the distance, not exact."""

    a: AnalyticSdf
    b: AnalyticSdf

    def _eval(self, p):
        return np.maximum(self.a._eval(p), self.b._eval(p))


def eval_analytic(sdf: AnalyticSdf, p):
    return sdf(p)


_ARITY = {"sphere": (4, Sphere), "torus": (5, Torus), "box": (6, Box)}


def parse_shape(spec: str) -> AnalyticSdf:
    """Parse ``kind:numbers`` terms joined by ``|`` (union) or ``&`` (intersection).

    >>> parse_shape("sphere:0.5,0.5,0.5,0.3")
    Sphere(center=(0.5, 0.5, 0.5), radius=0.3)
    """
    tokens = re.split(r"([|&])", spec.replace(" ", ""))
    shape = None
    op = None
    for tok in tokens:
        if tok in ("|", "&"):
            op = tok
            continue
        kind, _, args = tok.partition(":")
        if kind not in _ARITY:
            raise ValueError(f"unknown shape {kind!r} in {spec!r}")
        arity, cls = _ARITY[kind]
        try:
            nums = [float(x) for x in args.split(",")] if args else []
        except ValueError:
            bad = next(x for x in args.split(",") if not _is_float(x))
            raise ValueError(f"bad number {bad!r} in shape term {tok!r}") from None
        if len(nums) != arity:
            raise ValueError(f"shape term {tok!r} needs {arity} numbers, got {len(nums)}")
        c = tuple(nums[:3])
        if cls is Sphere:
            term = Sphere(c, nums[3])
        elif cls is Torus:
            term = Torus(c, nums[3], nums[4])
        else:
            term = Box(c, tuple(nums[3:]))
        if shape is None:
            shape = term
        elif op == "|":
            shape = Union(shape, term)
        else:
            shape = Intersection(shape, term)
    if shape is None:
        raise ValueError("empty shape spec")
    return shape


def _is_float(x: str) -> bool:
    try:
        float(x)
        return True
    except ValueError:
        return False


def box_mesh(center=(0.5, 0.5, 0.5), half_extents=(0.5, 0.5, 0.5)) -> TriangleMesh:
    """Closed 12-triangle box, outward winding."""
    c = np.asarray(center, dtype=np.float64)
    h = np.asarray(half_extents, dtype=np.float64)
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = []
    for a, b, cc, d in quads:
        tris += [(a, b, cc), (a, cc, d)]
    return TriangleMesh(c + h * corners, np.array(tris))


def sample_surface_points(mesh: TriangleMesh, n: int, seed: int = 0):
    """Area-uniform samples on a mesh, with face normals (no provenance)."""
    from .losses import sample_surface

    s = sample_surface(mesh, n, seed)
    return s.positions, s.normals


# ---------------------------------------------------------------------------
# point to triangle mesh distance


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to points p, all (N, 3) and paired.

    Returns the closest points and their barycentric weights (N, 3).
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    N = len(p)
    bary = np.zeros((N, 3))
    done = np.zeros(N, dtype=bool)

    def take(mask, w):
        nonlocal done
        m = mask & ~done
        bary[m] = w[m] if w.ndim == 2 else w
        done |= m

    with np.errstate(divide="ignore", invalid="ignore"):
        one = np.ones(N)
        zero = np.zeros(N)
        take((d1 <= 0) & (d2 <= 0), np.stack([one, zero, zero], 1))
        take((d3 >= 0) & (d4 <= d3), np.stack([zero, one, zero], 1))
        take((d6 >= 0) & (d5 <= d6), np.stack([zero, zero, one], 1))
        v = d1 / (d1 - d3)
        take((vc <= 0) & (d1 >= 0) & (d3 <= 0), np.stack([1 - v, v, zero], 1))
        w = d2 / (d2 - d6)
        take((vb <= 0) & (d2 >= 0) & (d6 <= 0), np.stack([1 - w, zero, w], 1))
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        take((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), np.stack([zero, 1 - w, w], 1))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        take(np.ones(N, dtype=bool), np.stack([1 - v - w, v, w], 1))
    bad = ~np.all(np.isfinite(bary), axis=1)
    if bad.any():
        bary[bad] = _degenerate_bary(p[bad], a[bad], b[bad], c[bad])
    q = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
    return q, bary


def _degenerate_bary(p, a, b, c):
    """Collinear triangles: nearest point over the three edge segments."""
    best = np.full(len(p), np.inf)
    out = np.zeros((len(p), 3))
    for i, j in ((0, 1), (1, 2), (2, 0)):
        x, y = (a, b, c)[i], (a, b, c)[j]
        e = y - x
        ee = np.einsum("ij,ij->i", e, e)
        t = np.clip(np.einsum("ij,ij->i", p - x, e) / np.where(ee > 0, ee, 1.0), 0.0, 1.0)
        d = np.linalg.norm(p - (x + t[:, None] * e), axis=1)
        better = d < best
        best[better] = d[better]
        out[better] = 0.0
        out[better, i] = 1.0 - t[better]
        out[better, j] = t[better]
    return out


@dataclass
class ClosestHit:
    distance: np.ndarray  # (N,)
    triangle: np.ndarray  # (N,)
    barycentric: np.ndarray  # (N, 3)
    point: np.ndarray  # (N, 3)


class MeshDistance:
    """Exact unsigned point-to-mesh distance.

    Triangles are grouped into spatial clusters with bounding spheres. An
    upper bound from the few triangles with the nearest centroids prunes every
    cluster whose sphere is farther away; the survivors are scanned exactly.
    """

    def __init__(self, mesh: TriangleMesh, k: int = 8, cluster_size: int = 8):
        if mesh.is_empty():
            raise ValueError("empty mesh")
        self.tri = mesh.positions[mesh.triangles]
        F = len(self.tri)
        self.centroids = self.tri.mean(axis=1)
        self.tree = cKDTree(self.centroids)
        self.k = min(k, F)

        lo = self.centroids.min(axis=0)
        span = np.maximum(self.centroids.max(axis=0) - lo, 1e-12)
        cells = max(1, round((F / cluster_size) ** (1 / 3)))
        cid = np.clip(((self.centroids - lo) / span * cells).astype(np.int64), 0, cells - 1)
        key = (cid[:, 0] * cells + cid[:, 1]) * cells + cid[:, 2]
        order = np.argsort(key, kind="stable")
        ukey, first = np.unique(key[order], return_index=True)
        self.order = order
        self.start = np.append(first, F)
        verts = self.tri[order]  # (F, 3, 3)
        sums = np.add.reduceat(self.centroids[order], first, axis=0)
        counts = np.diff(self.start)
        self.centers = sums / counts[:, None]
        owner = np.repeat(np.arange(len(ukey)), counts)
        reach = np.linalg.norm(verts - self.centers[owner][:, None], axis=2).max(axis=1)
        self.radii = np.maximum.reduceat(reach, first)

    def _exact(self, p, tids):
        t = self.tri[tids]
        q, w = closest_point_on_triangles(p, t[:, 0], t[:, 1], t[:, 2])
        return np.linalg.norm(p - q, axis=1), q, w

    def query(self, points) -> ClosestHit:
        p, _ = _as_points(points)
        N = len(p)
        _, ci = self.tree.query(p, k=self.k)
        ci = ci.reshape(N, self.k)
        d, _, _ = self._exact(np.repeat(p, self.k, axis=0), ci.reshape(-1))
        upper = d.reshape(N, self.k).min(axis=1)

        dist = np.full(N, np.inf)
        tri = np.zeros(N, dtype=np.int64)
        bary = np.zeros((N, 3))
        point = np.zeros((N, 3))
        counts = np.diff(self.start)
        step = max(1, 4_000_000 // max(len(self.centers), 1))
        for i in range(0, N, step):
            pc = p[i : i + step]
            lower = np.linalg.norm(pc[:, None, :] - self.centers[None], axis=2) - self.radii[None]
            qi, cl = np.nonzero(lower <= upper[i : i + step, None] * (1 + 1e-12) + 1e-15)
            # expand (point, cluster) pairs into (point, triangle) pairs
            n = counts[cl]
            qi = np.repeat(qi, n)
            offs = np.arange(qi.size) - np.repeat(np.cumsum(n) - n, n)
            ti = self.order[np.repeat(self.start[cl], n) + offs]
            for j in range(0, qi.size, 2_000_000):
                a, t = qi[j : j + 2_000_000], ti[j : j + 2_000_000]
                dd, qq, ww = self._exact(pc[a], t)
                g = a + i
                # keep the smallest distance, ties to the smallest triangle id
                np.minimum.at(dist, g, dd)
                hit = dd == dist[g]
                g, t, qq, ww = g[hit], t[hit], qq[hit], ww[hit]
                first = np.full(N, np.iinfo(np.int64).max)
                np.minimum.at(first, g, t)
                win = t == first[g]
                tri[g[win]], point[g[win]], bary[g[win]] = t[win], qq[win], ww[win]
        return ClosestHit(dist, tri, bary, point)


class _RayParity:
    """Crossing counts of rays from query points along one fixed direction.

    Triangles are bucketed on a 2D grid in the plane orthogonal to the ray.
    """

    def __init__(self, tri: np.ndarray, direction):
        d = np.asarray(direction, dtype=np.float64)
        self.d = d / np.linalg.norm(d)
        u = np.cross(self.d, [1.0, 0.0, 0.0] if abs(self.d[0]) < 0.9 else [0.0, 1.0, 0.0])
        u /= np.linalg.norm(u)
        self.basis = np.stack([u, np.cross(self.d, u)])
        self.tri = tri
        uv = tri @ self.basis.T  # (F, 3, 2)
        lo, hi = uv.min(axis=1), uv.max(axis=1)
        self.origin = lo.min(axis=0)
        span = np.maximum(hi.max(axis=0) - self.origin, 1e-12)
        self.nb = max(1, int(np.sqrt(len(tri))))
        self.cell = span / self.nb
        blo = self._bucket(lo)
        bhi = self._bucket(hi)
        ids, buckets = [], []
        for f in range(len(tri)):
            bx = np.arange(blo[f, 0], bhi[f, 0] + 1)
            by = np.arange(blo[f, 1], bhi[f, 1] + 1)
            bb = (bx[:, None] * self.nb + by[None, :]).reshape(-1)
            buckets.append(bb)
            ids.append(np.full(bb.size, f))
        buckets = np.concatenate(buckets)
        ids = np.concatenate(ids)
        order = np.argsort(buckets, kind="stable")
        self.tri_ids = ids[order]
        self.start = np.searchsorted(buckets[order], np.arange(self.nb * self.nb + 1))

    def _bucket(self, uv):
        return np.clip(((uv - self.origin) / self.cell).astype(np.int64), 0, self.nb - 1)

    def crossings(self, p: np.ndarray) -> np.ndarray:
        uv = p @ self.basis.T
        inside = np.all((uv >= self.origin) & (uv <= self.origin + self.cell * self.nb), axis=1)
        b = self._bucket(uv)
        b = b[:, 0] * self.nb + b[:, 1]
        cnt = np.where(inside, self.start[b + 1] - self.start[b], 0)
        qi = np.repeat(np.arange(len(p)), cnt)
        offs = np.arange(qi.size) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        ti = self.tri_ids[np.repeat(self.start[b], cnt) + offs]
        hit = _ray_hits(p[qi], self.d, self.tri[ti])
        return np.bincount(qi[hit], minlength=len(p))


def _ray_hits(o, d, tri, eps=1e-15):
    # Moller-Trumbore, rays o + t d with t > 0
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    h = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, h)
    ok = np.abs(det) > eps
    inv = np.divide(1.0, det, out=np.zeros_like(det), where=ok)
    s = o - tri[:, 0]
    u = inv * np.einsum("ij,ij->i", s, h)
    qv = np.cross(s, e1)
    v = inv * (qv @ d)
    t = inv * np.einsum("ij,ij->i", e2, qv)
    return ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)


# fixed, slightly skewed directions so rays rarely graze mesh edges
_RAY_DIRS = np.array(
    [[0.0123, 0.0071, 1.0], [1.0, 0.0137, -0.0059], [-0.0083, 1.0, 0.0111]],
)


def _require_closed(mesh: TriangleMesh):
    _, counts = mesh.edges()
    if mesh.is_empty() or np.any(counts != 2):
        raise ValueError("open-surface: signed distance needs a closed mesh")


class MeshSdf:
    """Reusable signed distance to a closed mesh (sign by 3-ray parity vote)."""

    def __init__(self, mesh: TriangleMesh):
        _require_closed(mesh)
        self.mesh = mesh
        self.distance = MeshDistance(mesh)
        tri = mesh.positions[mesh.triangles]
        self.rays = [_RayParity(tri, d) for d in _RAY_DIRS]

    def inside(self, p: np.ndarray) -> np.ndarray:
        votes = sum((r.crossings(p) % 2).astype(np.int64) for r in self.rays)
        return votes >= 2

    def query(self, points) -> tuple[np.ndarray, ClosestHit]:
        p, _ = _as_points(points)
        hit = self.distance.query(p)
        sign = np.where(self.inside(p), -1.0, 1.0)
        return sign * hit.distance, hit

    def __call__(self, points):
        pts, single = _as_points(points)
        vals, _ = self.query(pts)
        return float(vals[0]) if single else vals


def mesh_sdf(mesh: TriangleMesh, p):
    return MeshSdf(mesh)(p)


@dataclass(eq=False)
class ScalarPatch:
    origin: np.ndarray  # lattice corner (center - extent)
    spacing: float
    n: int
    values: np.ndarray  # (n, n, n)

    def points(self) -> np.ndarray:
        return patch_points(self.origin, self.spacing, self.n)


def patch_points(origin, spacing, n) -> np.ndarray:
    g = np.arange(n) * spacing
    return np.asarray(origin) + np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)


def sdf_patch(mesh: TriangleMesh, center, n: int = 16, extent: float = 0.125) -> ScalarPatch:
    """Signed distances on an n^3 lattice spanning center +- extent per axis."""
    if n < 2:
        raise ValueError("patch needs n >= 2")
    origin = np.asarray(center, dtype=np.float64) - extent
    spacing = 2.0 * extent / (n - 1)
    vals = MeshSdf(mesh)(patch_points(origin, spacing, n))
    return ScalarPatch(origin, spacing, n, vals.reshape(n, n, n))


def sdf_patch_vjp(mesh: TriangleMesh, patch: ScalarPatch, d_values) -> np.ndarray:
    """Gradient of <d_values, patch values> w.r.t. mesh vertex positions.

    The closest triangle, its barycentric coordinates and the sign are held
    fixed; a lattice point lying exactly on the surface differentiates along
    the face normal.
    """
    g = np.asarray(d_values, dtype=np.float64).reshape(-1)
    if g.size != patch.n**3:
        raise ValueError("cotangent does not match the patch size")
    pts = patch.points()
    vals, hit = MeshSdf(mesh).query(pts)
    sign = np.where(vals < 0, -1.0, 1.0)
    diff = pts - hit.point
    dist = hit.distance[:, None]
    fn = mesh.face_normals()[hit.triangle]
    # outward unit direction of d(sdf)/d(closest point) is -(p - q)/|p - q| * sign
    direction = np.where(dist > 1e-300, diff / np.maximum(dist, 1e-300), fn * sign[:, None])
    dq = -(sign * g)[:, None] * direction  # d sdf / d q
    out = np.zeros_like(mesh.positions)
    corners = mesh.triangles[hit.triangle]
    for k in range(3):
        contrib = hit.barycentric[:, k : k + 1] * dq
        for ax in range(3):
            out[:, ax] += np.bincount(corners[:, k], weights=contrib[:, ax], minlength=mesh.num_vertices)
    return out


def angle_deficits(mesh: TriangleMesh) -> np.ndarray:
    """2*pi minus the incident face angles at each vertex."""
    p = mesh.positions[mesh.triangles]
    total = np.zeros(mesh.num_vertices)
    for k in range(3):
        u = p[:, (k + 1) % 3] - p[:, k]
        v = p[:, (k + 2) % 3] - p[:, k]
        ang = np.arctan2(np.linalg.norm(np.cross(u, v), axis=1), np.einsum("ij,ij->i", u, v))
        total += np.bincount(mesh.triangles[:, k], weights=ang, minlength=mesh.num_vertices)
    return 2.0 * np.pi - total


def high_curvature_vertices(mesh: TriangleMesh, k: int, seed: int = 0, tol: float = 1e-9) -> np.ndarray:
    """Draw k vertex ids (with replacement), probability proportional to |angle deficit|.

    Deficits below ``tol`` count as flat and are never drawn.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    w = np.abs(angle_deficits(mesh))
    w[w < tol] = 0.0
    if w.sum() == 0:
        raise ValueError("mesh has no curved vertices")
    rng = np.random.Generator(np.random.Philox(seed))
    cdf = np.cumsum(w)
    return np.searchsorted(cdf, rng.uniform(0, cdf[-1], k), side="right")
