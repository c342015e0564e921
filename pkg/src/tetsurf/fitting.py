"""Coarse-to-fine fitting of grid SDF values and deformations to a target surface.

The forward pass is MT -> optional Loop subdivision -> surface sampling ->
losses; the backward pass chains the hand-written VJPs of each stage and
feeds an Adam update.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.spatial import cKDTree

from .losses import (
    LossReport,
    LossWeights,
    PointSample,
    chamfer,
    deformation_regularization,
    normal_consistency,
    resample,
    sample_surface,
    sample_surface_vjp,
    total_loss,
)
from .marching import TriangleMesh, marching_cubes, marching_tetrahedra, marching_tetrahedra_vjp
from .sdfield import AnalyticSdf, MeshDistance, MeshSdf
from .subdivision import loop_subdivide, loop_subdivide_vjp, plan_subdivision, subdivide_volume
from .tetgrid import TetGrid, build_grid, surface_tets

log = logging.getLogger(__name__)


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitConfig:
    base_resolution: int = 32
    scheme: str = "six-tet"
    iterations_per_level: int = 200
    levels: int = 0
    surface_subdiv_iters: int = 0
    sample_count: int = 5000
    weights: LossWeights = field(default_factory=LossWeights)
    chamfer_order: str = "L2"
    step_size: float = 1e-3  # SDF values
    deform_step_size: float = 1e-3
    alpha_step_size: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    freeze_deformation: bool = False
    disable_volume_subdiv: bool = False
    disable_surface_subdiv: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.iterations_per_level < 1:
            raise ValueError("iterations_per_level must be >= 1")
        if self.levels < 0 or self.surface_subdiv_iters < 0:
            raise ValueError("levels and surface_subdiv_iters must be >= 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if min(self.step_size, self.deform_step_size, self.alpha_step_size) <= 0:
            raise ValueError("step sizes must be positive")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if self.workers < 1 and self.workers != -1:
            raise ValueError("workers must be >= 1, or -1 for all cores")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class Adam:
    """Adam with bias-corrected moments over a dict of named arrays."""

    def __init__(self, lrs: dict[str, float], beta1=0.9, beta2=0.999, eps=1e-8):
        self.lrs = lrs
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            out[k] = p - self.lrs[k] * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
        return out

    def remap(self, keep: np.ndarray, total: int):
        """Carry moments of kept entries to a resized parameter vector; new entries start at zero."""
        for store in (self.m, self.v):
            for k, arr in store.items():
                new = np.zeros((total,) + arr.shape[1:])
                new[: len(keep)] = arr[keep]
                store[k] = new


class Target:
    """What the fit is pulled toward: surface samples with normals, plus a distance.

    Mesh targets use the exact mesh SDF. Point targets use the distance to the
    nearest point, signed by the current iterate; for the initial guess,
    oriented points are signed with a generalized winding number instead.
    """

    def __init__(self, source: PointSample | TriangleMesh, sample_count: int = 5000, seed: int = 0):
        if isinstance(source, TriangleMesh):
            if source.is_empty():
                raise ValueError("empty target mesh")
            self.mesh = source
            self.points = sample_surface(source, sample_count, seed)
            self._mesh_sdf = MeshSdf(source)
        else:
            if len(source) == 0:
                raise ValueError("empty target point cloud")
            self.mesh = None
            self.points = source
            self._mesh_sdf = None
        n = self.points.normals
        self.has_normals = n is not None and bool(np.all(np.abs(np.linalg.norm(n, axis=1) - 1.0) < 1e-6))
        self._tree = cKDTree(self.points.positions)

    @property
    def is_mesh(self) -> bool:
        return self.mesh is not None

    def signed_distance(self, x: np.ndarray, current_sdf: np.ndarray | None = None, workers: int = 1) -> np.ndarray:
        """Target distance at ``x``; for point clouds the sign comes from ``current_sdf``
        (unsigned when it is None)."""
        if self._mesh_sdf is not None:
            return self._mesh_sdf(x)
        d, _ = self._tree.query(x, k=1, workers=workers)
        if current_sdf is None:
            return d
        return np.where(current_sdf < 0, -d, d)

    def winding_number(self, x: np.ndarray, k: int = 8) -> np.ndarray:
        """Generalized winding number of the oriented points, about 1 inside and 0 outside.

        Each point stands for a disk whose area comes from its k-th neighbor distance.
        """
        if not self.has_normals:
            raise ValueError("winding number needs oriented points")
        p, n = self.points.positions, self.points.normals
        r, _ = self._tree.query(p, k=min(k + 1, len(p)))
        area = np.pi * r[:, -1] ** 2 / k
        an = n * area[:, None]
        out = np.empty(len(x))
        step = max(1, 2_000_000 // len(p))
        for i in range(0, len(x), step):
            d = p[None] - x[i : i + step, None]
            r3 = np.maximum(np.einsum("ijk,ijk->ij", d, d), 1e-24) ** 1.5
            out[i : i + step] = np.einsum("ijk,jk->i", d / r3[..., None], an) / (4 * np.pi)
        return out

    def initial_distance(self, x: np.ndarray, workers: int = 1) -> np.ndarray:
        """Best available signed distance with no iterate to borrow a sign from."""
        if self._mesh_sdf is not None:
            return self._mesh_sdf(x)
        d, _ = self._tree.query(x, k=1, workers=workers)
        if not self.has_normals:
            return d
        return np.where(self.winding_number(x) > 0.5, -d, d)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(eq=False)
class FitState:
    grid: TetGrid
    raw_alpha: np.ndarray  # (V,) per grid vertex, alpha = sigmoid(raw)
    optimizer: Adam
    iteration: int = 0
    history: list = field(default_factory=list)
    mesh_target_sdf: np.ndarray | None = None  # cached at rest positions for mesh targets


# classic Loop alpha for the regular valence-6 case
_ALPHA0 = 3.0 / 8.0


def initialize(target: Target | PointSample | TriangleMesh, config: FitConfig) -> FitState:
    """Build the grid and seed its SDF from the target.

    The seed is ``min(s, |s| - h/2)`` with ``s`` the initial target distance:
    the target dilated by half a cell, so thin parts missed by the lattice
    still produce a surface. For unoriented point clouds this is ``d - h/2``.
    """
    if not isinstance(target, Target):
        target = Target(target, config.sample_count, config.seed)
    grid = build_grid(config.base_resolution, config.scheme)
    h = 1.0 / config.base_resolution
    cache = None
    s = target.initial_distance(grid.rest_positions, workers=config.workers)
    if target.is_mesh:
        cache = s
    sdf = np.minimum(s, np.abs(s) - 0.5 * h)
    grid = grid.with_sdf(sdf)
    if surface_tets(grid).size == 0:
        raise FitError("initial grid has no surface; is the target inside the unit cube?")
    raw_alpha = np.full(grid.num_vertices, np.log(_ALPHA0 / (1 - _ALPHA0)))
    opt = Adam(
        {"sdf": config.step_size, "deform": config.deform_step_size, "alpha": config.alpha_step_size},
        config.beta1,
        config.beta2,
    )
    return FitState(grid, raw_alpha, opt, mesh_target_sdf=cache)


@dataclass(eq=False)
class Frozen:
    """Non-differentiable choices of one evaluation: sample provenance,
    nearest-neighbor correspondences and the L_SDF target values."""

    face_ids: np.ndarray
    barycentric: np.ndarray
    correspondences: tuple[np.ndarray, np.ndarray]
    target_sdf: np.ndarray


@dataclass(eq=False)
class Evaluation:
    report: LossReport
    mesh: TriangleMesh
    grad_sdf: np.ndarray
    grad_deform: np.ndarray
    grad_alpha: np.ndarray
    frozen: Frozen


def _surface_subdiv_iters(config: FitConfig) -> int:
    return 0 if config.disable_surface_subdiv else config.surface_subdiv_iters


def mesh_alphas(grid_alpha: np.ndarray, mesh: TriangleMesh) -> np.ndarray:
    """Alpha of each MT vertex: mean over the grid edge it was born on."""
    return 0.5 * (grid_alpha[mesh.provenance[:, 0]] + grid_alpha[mesh.provenance[:, 1]])


def chained_loss(
    grid: TetGrid,
    raw_alpha: np.ndarray,
    target: Target,
    config: FitConfig,
    sample_seed=0,
    frozen: Frozen | None = None,
    target_sdf: np.ndarray | None = None,
    iteration: int = 0,
) -> Evaluation:
    """Total loss and its gradient w.r.t. grid SDF, deformations and raw alpha.

    Forward: MT, optional Loop subdivision, surface sampling, losses.
    Backward: the VJPs of those stages in reverse. Passing ``frozen`` from a
    previous call reuses its discrete choices, which makes the loss a smooth
    function of the parameters as long as no SDF sign flips. ``target_sdf``
    supplies precomputed L_SDF targets (required for mesh targets).
    """
    w = config.weights
    mesh = marching_tetrahedra(grid)
    if mesh.is_empty():
        raise FitError(f"diverged: surface vanished at iteration {iteration}")
    iters = _surface_subdiv_iters(config)
    alpha_grid = _sigmoid(raw_alpha)
    if iters and mesh.is_closed_manifold():
        a_mesh = mesh_alphas(alpha_grid, mesh)
        surf = loop_subdivide(mesh, a_mesh, iters)
    else:
        if iters:
            log.warning("iteration %d: MT surface is not a closed manifold; skipping surface subdivision", iteration)
        iters = 0
        surf = mesh

    if frozen is None:
        sample = sample_surface(surf, config.sample_count, sample_seed)
        corr = None
        t_sdf = target_sdf
        if t_sdf is None and not target.is_mesh:
            t_sdf = target.signed_distance(grid.positions, grid.sdf, workers=config.workers)
    else:
        sample = resample(surf, PointSample(None, None, frozen.face_ids, frozen.barycentric))
        corr = frozen.correspondences
        t_sdf = frozen.target_sdf
    if t_sdf is None:
        raise ValueError("mesh targets need cached target SDF values")

    cd, g_p, _, corr = chamfer(
        sample, target.points, config.chamfer_order, with_grad=True, workers=config.workers, correspondences=corr
    )
    if target.has_normals:
        nc, g_n, _ = normal_consistency(sample, target.points, with_grad=True, p_to_q=corr[0])
    else:
        nc, g_n = 0.0, np.zeros_like(g_p)
    resid = grid.sdf - t_sdf
    l_sdf = float(np.mean(resid * resid))
    g_sdf_reg = 2.0 * resid / grid.num_vertices
    l_def, g_def_reg = deformation_regularization(grid, with_grad=True)

    report = total_loss({"cd": cd, "normal": nc, "g": 0.0, "sdf": l_sdf, "deform": l_def}, w)
    if not np.isfinite(report.total):
        raise FitError(f"diverged: non-finite loss {report} at iteration {iteration}")

    d_surf = sample_surface_vjp(surf, sample, w.cd * g_p, w.normal * g_n)
    g_alpha = np.zeros(grid.num_vertices)
    if iters:
        d_mesh, d_a_mesh = loop_subdivide_vjp(mesh, a_mesh, iters, d_surf)
        da = 0.5 * d_a_mesh
        for k in range(2):
            g_alpha += np.bincount(mesh.provenance[:, k], weights=da, minlength=grid.num_vertices)
        g_alpha *= alpha_grid * (1.0 - alpha_grid)
    else:
        d_mesh = d_surf
    cot = marching_tetrahedra_vjp(grid, mesh, d_mesh)
    g_sdf = cot.d_sdf + w.sdf * g_sdf_reg
    g_def = cot.d_position + w.deform * g_def_reg
    if config.freeze_deformation:
        g_def = np.zeros_like(g_def)
    fz = Frozen(sample.face_ids, sample.barycentric, corr, t_sdf)
    return Evaluation(report, mesh, g_sdf, g_def, g_alpha, fz)


def evaluate(state: FitState, target: Target, config: FitConfig) -> Evaluation:
    """Loss and gradients at the current state, sampling with (seed, iteration)."""
    return chained_loss(
        state.grid,
        state.raw_alpha,
        target,
        config,
        sample_seed=(config.seed, state.iteration),
        target_sdf=state.mesh_target_sdf,
        iteration=state.iteration,
    )


@dataclass(frozen=True)
class GradCheck:
    analytic: float
    numeric: float

    @property
    def relative_error(self) -> float:
        return abs(self.analytic - self.numeric) / max(abs(self.analytic), abs(self.numeric), 1e-300)


def gradient_check(
    grid: TetGrid,
    target: Target,
    config: FitConfig,
    raw_alpha: np.ndarray | None = None,
    target_sdf: np.ndarray | None = None,
    directions: int = 20,
    h: float = 1e-5,
    seed: int = 0,
) -> list[GradCheck]:
    """Compare chained VJPs with central differences along random directions.

    Discrete choices are frozen at the base point. Directions are scaled so
    that no SDF value can change sign; deformation steps avoid the clamp.
    """
    if raw_alpha is None:
        raw_alpha = np.zeros(grid.num_vertices)
    if target_sdf is None and target.is_mesh:
        target_sdf = target.signed_distance(grid.rest_positions)
    base = chained_loss(grid, raw_alpha, target, config, sample_seed=seed, target_sdf=target_sdf)
    rng = np.random.Generator(np.random.Philox(seed + 1))
    margin = float(np.min(np.abs(grid.sdf)))
    if margin <= 2 * h:
        raise ValueError("grid SDF values too close to zero for a sign-preserving check")

    def loss(g, a):
        return chained_loss(g, a, target, config, frozen=base.frozen).report.total

    out = []
    for _ in range(directions):
        vs = rng.standard_normal(grid.num_vertices)
        vs /= np.abs(vs).max()  # |h vs| <= h < margin / 2
        vd = rng.standard_normal((grid.num_vertices, 3))
        if config.freeze_deformation:
            vd[:] = 0.0
        va = rng.standard_normal(grid.num_vertices)
        analytic = float(vs @ base.grad_sdf + np.sum(vd * base.grad_deform) + va @ base.grad_alpha)
        plus = replace(grid, sdf=grid.sdf + h * vs, deformations=grid.deformations + h * vd)
        minus = replace(grid, sdf=grid.sdf - h * vs, deformations=grid.deformations - h * vd)
        numeric = (loss(plus, raw_alpha + h * va) - loss(minus, raw_alpha - h * va)) / (2 * h)
        out.append(GradCheck(analytic, numeric))
    return out


def step(state: FitState, target: Target, config: FitConfig) -> FitState:
    """One Adam step on (SDF, deformation, alpha); the deformation clamp is reapplied."""
    ev = evaluate(state, target, config)
    grid = state.grid
    params = {"sdf": grid.sdf, "deform": grid.deformations, "alpha": state.raw_alpha}
    grads = {"sdf": ev.grad_sdf, "deform": ev.grad_deform, "alpha": ev.grad_alpha}
    new = state.optimizer.step(params, grads)
    deform = grid.deformations if config.freeze_deformation else new["deform"]
    state.grid = grid.with_sdf(new["sdf"]).with_deformations(deform)
    state.raw_alpha = new["alpha"]
    state.iteration += 1
    state.history.append(ev.report)
    return state


def advance_level(state: FitState, target: Target, config: FitConfig) -> FitState:
    """Subdivide the surface tets and their vertex neighbors; new vertices start
    from the mean of their edge and with zero optimizer moments."""
    grid = state.grid
    plan = plan_subdivision(grid)
    if plan.selected.size == 0:
        raise FitError("no-surface: nothing to subdivide")
    keep = np.unique(grid.tets[plan.selected])
    new_grid = subdivide_volume(grid, plan)
    a, b = plan.edges[:, 0], plan.edges[:, 1]
    state.raw_alpha = np.concatenate([state.raw_alpha[keep], 0.5 * (state.raw_alpha[a] + state.raw_alpha[b])])
    state.optimizer.remap(keep, new_grid.num_vertices)
    if state.mesh_target_sdf is not None:
        mids = target.signed_distance(new_grid.rest_positions[len(keep) :])
        state.mesh_target_sdf = np.concatenate([state.mesh_target_sdf[keep], mids])
    state.grid = new_grid
    return state


def final_mesh(state: FitState, config: FitConfig) -> TriangleMesh:
    mesh = marching_tetrahedra(state.grid)
    iters = _surface_subdiv_iters(config)
    if iters and mesh.is_closed_manifold():
        return loop_subdivide(mesh, mesh_alphas(_sigmoid(state.raw_alpha), mesh), iters)
    return mesh


def fit(target, config: FitConfig, callback=None) -> tuple[TriangleMesh, list[LossReport]]:
    """Run ``(levels + 1) * iterations_per_level`` steps, subdividing between levels.

    With ``disable_volume_subdiv`` the step budget is unchanged and the grid
    simply stays at the base level.
    """
    if not isinstance(target, Target):
        target = Target(target, config.sample_count, config.seed)
    state = initialize(target, config)
    for level in range(config.levels + 1):
        if level > 0 and not config.disable_volume_subdiv:
            advance_level(state, target, config)
        for _ in range(config.iterations_per_level):
            step(state, target, config)
            if callback is not None:
                callback(state)
    return final_mesh(state, config), state.history


# ---------------------------------------------------------------------------
# evaluation against analytic shapes and the MC / MT oracle comparison


def surface_chamfer_l1(mesh: TriangleMesh, shape: AnalyticSdf, n: int = 20000, seed: int = 0) -> float:
    """Chamfer-L1 between a mesh and an analytic surface, both directions exact.

    Mesh samples are scored with the analytic distance |sdf|; analytic surface
    samples with the exact distance to the mesh. Requires a primitive whose
    field is an exact distance and that has a surface sampler.
    """
    if mesh.is_empty():
        return float("inf")
    pts = sample_surface(mesh, n, seed).positions
    forward = float(np.mean(np.abs(shape(pts))))
    ref, _ = shape.sample_surface(n, seed + 1)
    backward = float(np.mean(MeshDistance(mesh).query(ref).distance))
    return forward + backward


def lattice_points(resolution: int) -> np.ndarray:
    g = np.arange(resolution + 1) / resolution
    return np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)


def grid_vertex_count(resolution: int, scheme: str) -> int:
    m = resolution + 1
    return m**3 + (resolution**3 if scheme == "bcc" else 0)


def resolution_for_budget(budget: int, scheme: str) -> int:
    """Largest resolution whose vertex count does not exceed ``budget``."""
    n = 1
    while grid_vertex_count(n + 1, scheme) <= budget:
        n += 1
    return n


def noisy_surface_points(shape: AnalyticSdf, n: int = 5000, sigma: float = 0.005, seed: int = 0) -> PointSample:
    """Surface samples with isotropic Gaussian position noise; normals stay exact."""
    pos, nrm = shape.sample_surface(n, seed)
    rng = np.random.Generator(np.random.Philox(seed + 7919))
    return PointSample(pos + sigma * rng.standard_normal(pos.shape), nrm)


@dataclass(frozen=True)
class BenchRow:
    method: str
    budget: int
    resolution: int
    vertices: int
    chamfer_l1: float


def oracle_bench(
    shape: AnalyticSdf,
    budgets,
    scheme: str = "six-tet",
    eval_samples: int = 20000,
    seed: int = 0,
    fit_config: FitConfig | None = None,
    fit_points: int = 5000,
    fit_noise: float = 0.005,
) -> list[BenchRow]:
    """Extract the exact SDF with MC and MT at equal query budgets.

    A budget is a number of SDF evaluations. MC gets the largest cubic
    lattice within it, MT the largest grid of ``scheme`` within it. With
    ``fit_config`` a fitted grid at the MT resolution is scored as well,
    fitted from noisy surface points.
    """
    budgets = list(budgets)
    if not budgets:
        raise ValueError("no budgets given")
    rows = []
    for budget in budgets:
        n_mc = resolution_for_budget(budget, "six-tet")
        mc = marching_cubes(shape(lattice_points(n_mc)), n_mc)
        rows.append(BenchRow("MC", budget, n_mc, (n_mc + 1) ** 3, surface_chamfer_l1(mc, shape, eval_samples, seed)))

        n_mt = resolution_for_budget(budget, scheme)
        grid = build_grid(n_mt, scheme)
        grid = grid.with_sdf(shape(grid.positions))
        mt = marching_tetrahedra(grid)
        rows.append(BenchRow("MT", budget, n_mt, grid.num_vertices, surface_chamfer_l1(mt, shape, eval_samples, seed)))

        if fit_config is not None:
            cfg = replace(fit_config, base_resolution=n_mt, scheme=scheme, levels=0)
            pts = noisy_surface_points(shape, fit_points, fit_noise, seed)
            mesh, _ = fit(pts, cfg)
            rows.append(BenchRow("fit", budget, n_mt, grid.num_vertices, surface_chamfer_l1(mesh, shape, eval_samples, seed)))
    return rows
