import numpy as np
import pytest
from conftest import icosahedron

from tetsurf.marching import TriangleMesh, marching_tetrahedra
from tetsurf.sdfield import (
    Box,
    Intersection,
    MeshDistance,
    MeshSdf,
    Sphere,
    Torus,
    Union,
    angle_deficits,
    box_mesh,
    closest_point_on_triangles,
    eval_analytic,
    high_curvature_vertices,
    mesh_sdf,
    parse_shape,
    sdf_patch,
    sdf_patch_vjp,
)
from tetsurf.subdivision import loop_subdivide
from tetsurf.tetgrid import build_grid


def test_analytic_examples():
    s = Sphere((0.5, 0.5, 0.5), 0.3)
    assert eval_analytic(s, (0.5, 0.5, 0.5)) == pytest.approx(-0.3)
    assert eval_analytic(s, (0.5, 0.5, 1.1)) == pytest.approx(0.3)
    t = Torus((0.5, 0.5, 0.5), 0.25, 0.1)
    assert eval_analytic(t, (0.75, 0.5, 0.5)) == pytest.approx(-0.1)
    b = Box((0, 0, 0), (1, 2, 3))
    assert eval_analytic(b, (0, 0, 0)) == -1.0
    assert eval_analytic(b, (4, 6, 3)) == pytest.approx(5.0)


def test_union_and_intersection(rng):
    a, b = Sphere((0.3, 0.5, 0.5), 0.2), Box((0.6, 0.5, 0.5), (0.1, 0.2, 0.2))
    p = rng.random((50, 3))
    np.testing.assert_array_equal(Union(a, b)(p), np.minimum(a(p), b(p)))
    np.testing.assert_array_equal((a & b)(p), np.maximum(a(p), b(p)))
    assert isinstance(a | b, Union) and isinstance(a & b, Intersection)


@pytest.mark.parametrize(
    "shape",
    [Sphere((0.5, 0.5, 0.5), 0.3), Torus((0.5, 0.5, 0.5), 0.25, 0.1), Box((0.5, 0.5, 0.5), (0.3, 0.2, 0.1))],
)
def test_eikonal(shape, rng):
    p = rng.random((400, 3))
    if isinstance(shape, Box):
        p = p[shape(p) > 0.01]  # outside, away from the medial creases
    elif isinstance(shape, Torus):
        q = p - 0.5
        ring = np.hypot(q[:, 0], q[:, 1])
        p = p[(np.abs(ring - 0.25) + np.abs(q[:, 2]) > 0.02) & (ring > 0.02)]
    else:
        p = p[np.linalg.norm(p - 0.5, axis=1) > 0.02]
    h = 1e-6
    grad = np.stack([(shape(p + h * e) - shape(p - h * e)) / (2 * h) for e in np.eye(3)], axis=1)
    np.testing.assert_allclose(np.linalg.norm(grad, axis=1), 1.0, atol=1e-6)


def test_primitive_samplers_lie_on_surface():
    for shape in (Sphere((0.5, 0.5, 0.5), 0.3), Torus((0.5, 0.5, 0.5), 0.25, 0.1), Box((0.5, 0.5, 0.5), (0.3, 0.2, 0.1))):
        p, n = shape.sample_surface(500, 1)
        assert np.abs(shape(p)).max() < 1e-12
        np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-12)
        # normals point outward
        assert np.all(shape(p + 1e-4 * n) > 0)


def test_parse_shape():
    assert parse_shape("sphere:0.5,0.5,0.5,0.3") == Sphere((0.5, 0.5, 0.5), 0.3)
    u = parse_shape("sphere:0.3,0.5,0.5,0.2 | box:0.6,0.5,0.5,0.1,0.1,0.1")
    assert isinstance(u, Union)
    assert isinstance(parse_shape("torus:0.5,0.5,0.5,0.25,0.1&sphere:0.5,0.5,0.5,0.3"), Intersection)
    with pytest.raises(ValueError, match="'zz'"):
        parse_shape("sphere:0.5,zz,0.5,0.3")
    with pytest.raises(ValueError, match="cone"):
        parse_shape("cone:1,2,3")
    with pytest.raises(ValueError, match="needs 4"):
        parse_shape("sphere:1,2,3")
    with pytest.raises(ValueError):
        parse_shape("sphere:0.5,0.5,0.5,-1")


def test_closest_point_matches_dense_search(rng):
    tri = rng.normal(size=(3, 3))
    p = rng.normal(size=(200, 3)) * 2
    q, w = closest_point_on_triangles(p, *(np.repeat(tri[None, k], 200, axis=0) for k in range(3)))
    assert np.all(w >= -1e-12) and np.allclose(w.sum(1), 1)
    u = np.linspace(0, 1, 301)
    uu, vv = np.meshgrid(u, u)
    keep = uu + vv <= 1
    dense = tri[0] + uu[keep][:, None] * (tri[1] - tri[0]) + vv[keep][:, None] * (tri[2] - tri[0])
    best = np.linalg.norm(p[:, None] - dense[None], axis=2).min(axis=1)
    d = np.linalg.norm(p - q, axis=1)
    assert np.all(d <= best + 1e-12)
    assert np.all(best - d < 1e-2)


def test_mesh_distance_equals_brute_force(sphere, rng):
    g = build_grid(10, "bcc")
    m = marching_tetrahedra(g.with_sdf(sphere(g.positions)))
    p = rng.random((300, 3))
    tri = m.positions[m.triangles]
    F = len(tri)
    brute = np.full(len(p), np.inf)
    for i in range(len(p)):
        q, _ = closest_point_on_triangles(np.repeat(p[i : i + 1], F, 0), tri[:, 0], tri[:, 1], tri[:, 2])
        brute[i] = np.linalg.norm(q - p[i], axis=1).min()
    np.testing.assert_array_equal(MeshDistance(m).query(p).distance, brute)


def test_mesh_sdf_on_unit_cube(rng):
    cube = box_mesh()
    assert mesh_sdf(cube, (0.5, 0.5, 0.5)) == pytest.approx(-0.5, abs=1e-15)
    assert abs(mesh_sdf(cube, (0.3, 0.7, 1.0))) <= 1e-12
    p = rng.uniform(-0.5, 1.5, (100, 3))
    np.testing.assert_allclose(mesh_sdf(cube, p), Box((0.5, 0.5, 0.5), (0.5, 0.5, 0.5))(p), atol=1e-9, rtol=0)


def test_mesh_sdf_sign_flips_along_segment(torus):
    g = build_grid(24, "bcc")
    m = marching_tetrahedra(g.with_sdf(torus(g.positions)))
    t = np.linspace(0, 1, 801)[:, None]
    seg = (1 - t) * np.array([0.02, 0.5, 0.5]) + t * np.array([0.98, 0.5, 0.5])
    s = mesh_sdf(m, seg)
    flips = np.count_nonzero(np.diff(np.sign(s)) != 0)
    assert flips == 4  # in and out of the tube on both sides


def test_open_surface_rejected():
    cube = box_mesh()
    with pytest.raises(ValueError, match="open-surface"):
        MeshSdf(TriangleMesh(cube.positions, cube.triangles[:-1]))


def test_patch_examples(sphere):
    cube = box_mesh()
    p = sdf_patch(cube, (0.5, 0.5, 0.5), n=2, extent=0.25)
    np.testing.assert_allclose(p.values, -0.25, atol=1e-15)
    g = build_grid(12, "bcc")
    m = marching_tetrahedra(g.with_sdf(sphere(g.positions)))
    patch = sdf_patch(m, m.positions[0], n=5, extent=0.05)
    np.testing.assert_array_equal(patch.values.reshape(-1), mesh_sdf(m, patch.points()))
    assert patch.values.min() < 0 < patch.values.max()
    with pytest.raises(ValueError):
        sdf_patch(m, m.positions[0], n=1)


def test_patch_vjp_translation(rng):
    cube = box_mesh()
    patch = sdf_patch(cube, (0.5, 0.5, 0.9), n=4, extent=0.05)
    cot = rng.normal(size=patch.values.shape)
    grad = sdf_patch_vjp(cube, patch, cot)
    # translating the mesh along z shifts values near the top face by -dz
    h = 1e-6
    e = np.zeros_like(cube.positions)
    e[:, 2] = 1.0

    def f(t):
        return np.sum(sdf_patch(TriangleMesh(cube.positions + t * e, cube.triangles), (0.5, 0.5, 0.9), 4, 0.05).values * cot)

    fd = (f(h) - f(-h)) / (2 * h)
    assert fd == pytest.approx(-cot.sum(), rel=1e-5)
    assert np.sum(grad * e) == pytest.approx(fd, rel=1e-5)
    v = rng.normal(size=cube.positions.shape) * 0.1
    fd = (np.sum(sdf_patch(TriangleMesh(cube.positions + h * v, cube.triangles), (0.5, 0.5, 0.9), 4, 0.05).values * cot)
          - np.sum(sdf_patch(TriangleMesh(cube.positions - h * v, cube.triangles), (0.5, 0.5, 0.9), 4, 0.05).values * cot)) / (2 * h)
    assert np.sum(grad * v) == pytest.approx(fd, rel=1e-5)


def _tessellated_cube(n=4):
    """Unit cube with each face split into an n x n grid of quads."""
    pts, tris, index = [], [], {}

    def vid(p):
        key = tuple(np.round(p, 12))
        if key not in index:
            index[key] = len(pts)
            pts.append(p)
        return index[key]

    for axis in range(3):
        for side in (0.0, 1.0):
            u, v = [a for a in range(3) if a != axis]
            for i in range(n):
                for j in range(n):
                    q = []
                    for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = np.zeros(3)
                        p[axis], p[u], p[v] = side, (i + di) / n, (j + dj) / n
                        q.append(vid(p))
                    tris += [(q[0], q[1], q[2]), (q[0], q[2], q[3])]
    return TriangleMesh(np.array(pts), np.array(tris))


def test_curvature_selection_on_cube():
    cube = _tessellated_cube()
    picks = high_curvature_vertices(cube, 500, seed=4)
    corners = np.flatnonzero(np.all((cube.positions == 0) | (cube.positions == 1), axis=1))
    assert len(corners) == 8
    assert set(picks) <= set(corners)
    np.testing.assert_array_equal(picks, high_curvature_vertices(cube, 500, seed=4))
    with pytest.raises(ValueError):
        high_curvature_vertices(cube, 0)


def test_curvature_selection_on_sphere_is_near_uniform():
    ico = icosahedron()
    m = loop_subdivide(ico, np.zeros(ico.num_vertices), 3)
    m = TriangleMesh(m.positions / np.linalg.norm(m.positions, axis=1, keepdims=True), m.triangles)
    d = angle_deficits(m)
    assert d.sum() == pytest.approx(4 * np.pi)  # Gauss-Bonnet
    # no vertex dominates, and the effective number of candidates is close to all of them
    prob = d / d.sum()
    assert d.min() > 0 and d.max() / d.mean() < 1.5
    assert 1.0 / np.sum(prob**2) > 0.9 * m.num_vertices
    picks = np.bincount(high_curvature_vertices(m, 200_000, seed=1), minlength=m.num_vertices)
    assert picks.min() > 0
    expected = 200_000 * prob
    assert np.all(np.abs(picks - expected) < 5 * np.sqrt(expected) + 1)
