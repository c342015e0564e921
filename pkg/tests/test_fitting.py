from dataclasses import replace

import numpy as np
import pytest

from tetsurf.fitting import (
    FitConfig,
    FitError,
    Target,
    advance_level,
    evaluate,
    fit,
    gradient_check,
    initialize,
    noisy_surface_points,
    oracle_bench,
    step,
    surface_chamfer_l1,
)
from tetsurf.losses import LossWeights, PointSample
from tetsurf.marching import marching_tetrahedra
from tetsurf.sdfield import MeshDistance, box_mesh
from tetsurf.tetgrid import build_grid, surface_tets


@pytest.fixture
def sphere_target(sphere):
    return Target(noisy_surface_points(sphere, 2000, 0.005, 0))


def small(**kw):
    base = dict(base_resolution=8, iterations_per_level=10, sample_count=1000)
    base.update(kw)
    return FitConfig(**base)


def test_config_validation():
    for bad in (dict(iterations_per_level=0), dict(beta1=1.0), dict(beta2=0.0), dict(step_size=0.0), dict(levels=-1)):
        with pytest.raises(ValueError):
            FitConfig(**bad)


def test_initialize(sphere_target):
    a = initialize(sphere_target, small())
    assert surface_tets(a.grid).size > 0
    assert not a.grid.deformations.any()
    b = initialize(sphere_target, small())
    assert a.grid.sdf.tobytes() == b.grid.sdf.tobytes()
    with pytest.raises(ValueError):
        Target(PointSample(np.zeros((0, 3)), None))


def test_initialize_without_normals_is_offset_distance(sphere):
    pts = noisy_surface_points(sphere, 1000, 0.0, 0)
    t = Target(PointSample(pts.positions, None))
    s = initialize(t, small())
    d = t.signed_distance(s.grid.rest_positions)
    np.testing.assert_allclose(s.grid.sdf, d - 0.5 / 8, atol=0)


def test_zero_weights_leave_parameters_unchanged(sphere_target):
    cfg = small(weights=LossWeights(0, 0, 0, 0, 0), surface_subdiv_iters=1)
    s = initialize(sphere_target, cfg)
    sdf, d, a = s.grid.sdf.copy(), s.grid.deformations.copy(), s.raw_alpha.copy()
    step(s, sphere_target, cfg)
    np.testing.assert_array_equal(s.grid.sdf, sdf)
    np.testing.assert_array_equal(s.grid.deformations, d)
    np.testing.assert_array_equal(s.raw_alpha, a)


def test_pure_deformation_loss_shrinks_every_offset(sphere_target, rng):
    cfg = small(weights=LossWeights(0, 0, 0, 0, 1.0))
    s = initialize(sphere_target, cfg)
    c = s.grid.clamp_radius
    d = rng.uniform(0.3, 1.0, (s.grid.num_vertices, 3)) * c * rng.choice([-1, 1], (s.grid.num_vertices, 3))
    s.grid = s.grid.with_deformations(d)
    before = np.linalg.norm(s.grid.deformations, axis=1)
    step(s, sphere_target, cfg)
    assert np.all(np.linalg.norm(s.grid.deformations, axis=1) < before)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_is_reported(sphere_target):
    s = initialize(sphere_target, small())
    sdf = s.grid.sdf.copy()
    sdf[sdf > 0.2] = 1e300
    s.grid = s.grid.with_sdf(sdf)
    with pytest.raises(FitError, match="diverged"):
        step(s, sphere_target, small())


def _perturbed_state(target, cfg, rng, levels=0):
    s = initialize(target, cfg)
    for _ in range(levels):
        advance_level(s, target, cfg)
    g = s.grid
    g = g.with_deformations(rng.uniform(-0.5, 0.5, (g.num_vertices, 3)) * g.clamp_radius)
    sdf = g.sdf + rng.normal(scale=1e-3, size=g.num_vertices)
    sdf = np.where(np.abs(sdf) < 2e-3, np.where(sdf < 0, -2e-3, 2e-3), sdf)
    s.grid = g.with_sdf(sdf)
    s.raw_alpha = rng.normal(size=g.num_vertices)
    return s


@pytest.mark.parametrize("levels", [0, 1])
@pytest.mark.parametrize("surface_iters", [0, 1])
def test_full_chain_gradient(sphere_target, rng, levels, surface_iters):
    cfg = small(base_resolution=4, surface_subdiv_iters=surface_iters, sample_count=500)
    s = _perturbed_state(sphere_target, cfg, rng, levels)
    checks = gradient_check(s.grid, sphere_target, cfg, raw_alpha=s.raw_alpha, directions=8)
    assert max(c.relative_error for c in checks) < 1e-3


def test_mesh_target_gradient(rng):
    from tetsurf.sdfield import Box

    mesh = box_mesh((0.5, 0.5, 0.5), (0.3, 0.25, 0.2))
    t = Target(mesh, 500, 0)
    cfg = small(base_resolution=4, sample_count=500)
    s = _perturbed_state(t, cfg, rng)
    checks = gradient_check(s.grid, t, cfg, directions=6)
    assert max(c.relative_error for c in checks) < 1e-3
    np.testing.assert_allclose(s.mesh_target_sdf, Box((0.5, 0.5, 0.5), (0.3, 0.25, 0.2))(s.grid.rest_positions), atol=1e-12)


def test_advance_level(sphere_target):
    cfg = small(base_resolution=10, iterations_per_level=15)
    s = initialize(sphere_target, cfg)
    for _ in range(15):
        step(s, sphere_target, cfg)
    before_grid = s.grid
    before = evaluate(s, sphere_target, cfg).report
    n_surf = surface_tets(s.grid).size
    advance_level(s, sphere_target, cfg)
    after = evaluate(s, sphere_target, cfg).report
    g = s.grid
    assert g.level == 1
    assert n_surf <= surface_tets(g).size <= 8 * n_surf
    # the extracted surface is unchanged; surface terms only move by resampling
    a, b = marching_tetrahedra(before_grid), marching_tetrahedra(g)
    assert MeshDistance(a).query(b.positions).distance.max() < 1e-9
    assert abs(a.area() - b.area()) < 1e-9 * a.area()
    assert abs(after.cd - before.cd) < 2e-2 * before.cd
    # parameters and optimizer moments line up with the new vertex set
    V = g.num_vertices
    assert s.raw_alpha.shape == (V,)
    for store in (s.optimizer.m, s.optimizer.v):
        assert store["sdf"].shape == (V,) and store["deform"].shape == (V, 3)
        assert all(np.isfinite(x).all() for x in store.values())
    new = slice(V - len(np.unique(before_grid.tets[surface_tets(before_grid)])), V)
    assert not s.optimizer.m["sdf"][V - 1] and not s.optimizer.v["deform"][V - 1].any()
    # every tet of the new grid is a child of a tet that was selected
    assert np.all(g.signed_volumes() > 0)
    step(s, sphere_target, cfg)
    assert new.stop == V


def test_advance_level_without_surface_fails(sphere_target):
    s = initialize(sphere_target, small())
    s.grid = s.grid.with_sdf(np.abs(s.grid.sdf) + 1)
    with pytest.raises(FitError, match="no-surface"):
        advance_level(s, sphere_target, small())


def test_torus_fit_keeps_genus(torus):
    t = noisy_surface_points(torus, 3000, 0.002, 1)
    mesh, hist = fit(t, small(base_resolution=20, iterations_per_level=40, sample_count=3000))
    assert mesh.is_closed_manifold()
    assert mesh.euler_characteristic() == 0
    assert hist[-1].cd < hist[0].cd


def test_sphere_fit_converges_tenfold(sphere):
    pts = noisy_surface_points(sphere, 5000, 0.0, 0)
    cfg = FitConfig(base_resolution=16, iterations_per_level=200)
    state = initialize(Target(pts), cfg)
    start = surface_chamfer_l1(marching_tetrahedra(state.grid), sphere)
    mesh, _ = fit(pts, cfg)
    assert surface_chamfer_l1(mesh, sphere) * 10 <= start


def test_median_loss_non_increasing(sphere):
    pts = noisy_surface_points(sphere, 3000, 0.005, 2)
    _, hist = fit(pts, FitConfig(base_resolution=12, iterations_per_level=200, sample_count=3000))
    total = np.array([r.total for r in hist])
    medians = [np.median(total[i : i + 50]) for i in range(0, 200, 50)]
    assert all(b <= a for a, b in zip(medians, medians[1:]))


def test_surface_subdivision_path(sphere_target):
    mesh, hist = fit(sphere_target, small(surface_subdiv_iters=1, iterations_per_level=5))
    coarse, _ = fit(sphere_target, small(surface_subdiv_iters=1, disable_surface_subdiv=True, iterations_per_level=5))
    assert mesh.num_faces == 4 * coarse.num_faces
    assert len(hist) == 5


def test_fit_is_deterministic(sphere_target):
    cfg = small(iterations_per_level=8, levels=1)
    _, h1 = fit(sphere_target, cfg)
    _, h2 = fit(sphere_target, cfg)
    _, h4 = fit(sphere_target, replace(cfg, workers=4))
    assert [r.total for r in h1] == [r.total for r in h2] == [r.total for r in h4]
    assert len(h1) == 16


def test_oracle_bench_small(torus):
    rows = oracle_bench(torus, [9**3, 17**3], eval_samples=5000)
    mc = [r.chamfer_l1 for r in rows if r.method == "MC"]
    mt = [r.chamfer_l1 for r in rows if r.method == "MT"]
    assert all(a <= b for a, b in zip(mt, mc))
    assert mc[1] < mc[0] and mt[1] < mt[0]
    assert [r.vertices for r in rows if r.method == "MT"] == [r.vertices for r in rows if r.method == "MC"]
    with pytest.raises(ValueError):
        oracle_bench(torus, [])


def test_fitted_beats_oracle_mt_on_thin_box(thin_box):
    cfg = FitConfig(iterations_per_level=150)
    rows = oracle_bench(thin_box, [17**3], eval_samples=5000, fit_config=cfg)
    by = {r.method: r for r in rows}
    assert by["fit"].vertices == by["MT"].vertices
    assert by["fit"].chamfer_l1 < by["MT"].chamfer_l1
