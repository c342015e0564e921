"""Command-line front end: build, extract, fit, bench and patch.

File formats are ASCII OBJ (v/f lines, 1-based), XYZ point clouds with
optional normals, flat key=value configs, CSV tables and a JSON manifest.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .fitting import FitConfig, FitError, Target, fit, lattice_points, oracle_bench
from .losses import TERMS, LossWeights, PointSample
from .marching import TriangleMesh, marching_cubes, marching_tetrahedra
from .sdfield import parse_shape, sdf_patch
from .tetgrid import SCHEMES, build_grid

log = logging.getLogger("tetsurf")

# ---------------------------------------------------------------------------
# file formats


def write_obj(path, mesh: TriangleMesh) -> int:
    """Write an ASCII OBJ and return the number of faces written.

    Zero-area triangles are dropped. When there are any, exactly coincident
    vertices are welded first and the back-to-back face pairs this creates
    cancel, so the surface stays closed.
    """
    pos, tris = mesh.positions, mesh.triangles
    if mesh.num_faces and np.any(mesh.face_areas() <= 0):
        pos, inv = np.unique(pos, axis=0, return_inverse=True)
        tris = inv.reshape(-1)[tris]
        tris = tris[(tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])]
        _, which, count = np.unique(np.sort(tris, axis=1), axis=0, return_inverse=True, return_counts=True)
        tris = tris[count[which.reshape(-1)] == 1]
        tris = tris[TriangleMesh(pos, tris).face_areas() > 0]
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in pos]
    lines += [f"f {a} {b} {c}" for a, b, c in tris + 1]
    Path(path).write_text("\n".join(lines) + "\n" if lines else "")
    return len(tris)


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise ValueError(f"unsupported-face: {path}:{lineno} has {len(parts) - 1} vertices, only triangles are read")
            idx = []
            for tok in parts[1:]:
                i = int(tok.split("/")[0])
                idx.append(i - 1 if i > 0 else len(verts) + i)
            faces.append(idx)
    pos = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    tri = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if tri.size and (tri.min() < 0 or tri.max() >= len(pos)):
        raise ValueError(f"{path}: face index out of range")
    return TriangleMesh(pos, tri)


def read_xyz(path) -> PointSample:
    """Points as ``x y z`` or ``x y z nx ny nz`` rows; normals are normalized."""
    data = np.loadtxt(path, dtype=np.float64, ndmin=2, comments="#")
    if data.size == 0:
        raise ValueError(f"{path}: no points")
    if data.shape[1] == 3:
        return PointSample(data, None)
    if data.shape[1] == 6:
        n = data[:, 3:]
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        if np.any(norm == 0):
            raise ValueError(f"{path}: zero-length normal")
        return PointSample(data[:, :3].copy(), n / norm)
    raise ValueError(f"{path}: expected 3 or 6 columns, got {data.shape[1]}")


def write_xyz(path, sample: PointSample):
    cols = sample.positions if sample.normals is None else np.hstack([sample.positions, sample.normals])
    np.savetxt(path, cols, fmt="%.17g")


# ---------------------------------------------------------------------------
# key=value configuration

_WEIGHT_KEYS = {f"lambda_{k}": k for k in ("cd", "normal", "g", "sdf")} | {"lambda_def": "deform"}


def _parse_value(key: str, raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"config key {key}: expected a boolean, got {raw!r}")
    try:
        return type(default)(raw)
    except ValueError:
        raise ValueError(f"config key {key}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text: str, base: FitConfig | None = None) -> FitConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    base = base or FitConfig()
    updates, weights = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in _WEIGHT_KEYS:
            weights[_WEIGHT_KEYS[key]] = _parse_value(key, raw, 0.0)
        elif key in FitConfig.field_names() and key != "weights":
            updates[key] = _parse_value(key, raw, getattr(base, key))
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
    if weights:
        updates["weights"] = replace(base.weights, **weights)
    return replace(base, **updates)


def config_to_dict(cfg: FitConfig) -> dict:
    out = {f.name: getattr(cfg, f.name) for f in fields(cfg) if f.name != "weights"}
    for key, name in _WEIGHT_KEYS.items():
        out[key] = getattr(cfg.weights, name)
    return out


def config_from_dict(d: dict) -> FitConfig:
    d = dict(d)
    weights = LossWeights(**{name: d.pop(key) for key, name in _WEIGHT_KEYS.items() if key in d})
    return FitConfig(weights=weights, **d)


@dataclass
class RunManifest:
    config: dict
    seed: int
    versions: dict
    timing: dict
    outputs: dict
    final: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))


def _versions() -> dict:
    return {"tetsurf": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()}


# ---------------------------------------------------------------------------
# subcommands


def cmd_build(args) -> int:
    grid = build_grid(args.res, args.scheme)
    if args.shape:
        grid = grid.with_sdf(parse_shape(args.shape)(grid.positions))
    print(f"{grid.scheme} grid: {grid.num_vertices} vertices, {grid.num_tets} tets, clamp {grid.clamp_radius:.6g}")
    if args.out:
        np.savez(args.out, rest_positions=grid.rest_positions, tets=grid.tets, sdf=grid.sdf)
    return 0


def cmd_extract(args) -> int:
    shape = parse_shape(args.shape)
    if args.method == "mc":
        mesh = marching_cubes(shape(lattice_points(args.res)), args.res)
    else:
        grid = build_grid(args.res, args.scheme)
        mesh = marching_tetrahedra(grid.with_sdf(shape(grid.positions)))
    n = write_obj(args.out, mesh)
    print(f"{args.method}: {mesh.num_vertices} vertices, {n} faces -> {args.out}")
    return 0


_ABLATIONS = {"no-deform": "freeze_deformation", "no-volume": "disable_volume_subdiv", "no-surface": "disable_surface_subdiv"}


def _load_target(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    if path.suffix.lower() == ".obj":
        return read_obj(path)
    return read_xyz(path)


def cmd_fit(args) -> int:
    source = _load_target(Path(args.input))
    cfg = parse_config(Path(args.config).read_text()) if args.config else FitConfig()
    overrides = {_ABLATIONS[a]: True for a in args.ablate or []}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    cfg = replace(cfg, **overrides)

    out = Path(args.out)
    history_path = Path(args.history) if args.history else out.with_suffix(".history.csv")
    manifest_path = Path(args.manifest) if args.manifest else out.with_suffix(".json")

    t0 = time.perf_counter()
    target = Target(source, cfg.sample_count, cfg.seed)
    mesh, history = fit(target, cfg)
    elapsed = time.perf_counter() - t0

    write_obj(out, mesh)
    with open(history_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", *TERMS, "total"])
        for i, r in enumerate(history):
            w.writerow([i, *(repr(getattr(r, k)) for k in TERMS), repr(r.total)])
    # the timing entry is the only field that varies between identical runs
    manifest = RunManifest(
        config=config_to_dict(cfg),
        seed=cfg.seed,
        versions=_versions(),
        timing={"fit_seconds": elapsed},
        outputs={"mesh": str(out), "history": str(history_path), "manifest": str(manifest_path)},
        final=history[-1].as_dict() if history else {},
    )
    manifest_path.write_text(manifest.to_json() + "\n")
    first, last = history[0], history[-1]
    print(f"fit: {len(history)} steps, chamfer {first.cd:.6g} -> {last.cd:.6g}, {elapsed:.1f}s -> {out}")
    return 0


DEFAULT_BUDGETS = (17**3, 33**3, 65**3)


def _parse_budgets(text: str) -> list[int]:
    items = [t for t in text.replace(" ", "").split(",") if t]
    if not items:
        raise ValueError("empty budget list")
    budgets = []
    for t in items:
        try:
            budgets.append(int(eval_budget(t)))
        except ValueError:
            raise ValueError(f"bad budget {t!r}") from None
    return budgets


def eval_budget(token: str) -> int:
    """A budget is an integer or ``n^3`` / ``n**3``."""
    for op in ("**", "^"):
        if op in token:
            base, exp = token.split(op, 1)
            return int(base) ** int(exp)
    return int(token)


def cmd_bench(args) -> int:
    shape = parse_shape(args.shape)
    budgets = _parse_budgets(args.budgets)
    rows = oracle_bench(shape, budgets, scheme=args.scheme, eval_samples=args.samples, seed=args.seed)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "budget", "resolution", "vertices", "chamfer_l1"])
        for r in rows:
            w.writerow([r.method, r.budget, r.resolution, r.vertices, repr(r.chamfer_l1)])
    for r in rows:
        print(f"{r.method:>3} budget={r.budget:>7} res={r.resolution:>3} vertices={r.vertices:>7} chamfer_l1={r.chamfer_l1:.6g}")
    return 0


def _triple(text: str) -> np.ndarray:
    vals = [float(t) for t in text.split(",")]
    if len(vals) != 3:
        raise ValueError(f"expected x,y,z, got {text!r}")
    return np.array(vals)


def cmd_patch(args) -> int:
    mesh = read_obj(args.mesh)
    patch = sdf_patch(mesh, _triple(args.center), args.n, args.extent)
    doc = {
        "origin": patch.origin.tolist(),
        "spacing": patch.spacing,
        "n": patch.n,
        "values": patch.values.reshape(-1).tolist(),
    }
    Path(args.out).write_text(json.dumps(doc) + "\n")
    inside = int(np.sum(patch.values < 0))
    print(f"patch: {patch.n}^3 values, {inside} inside -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tetsurf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"tetsurf {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="build a tet grid and report its size")
    b.add_argument("--res", type=int, required=True)
    b.add_argument("--scheme", choices=SCHEMES, default="six-tet")
    b.add_argument("--shape", help="optional analytic shape to evaluate on the grid")
    b.add_argument("--out", help="write grid arrays to this .npz")
    b.set_defaults(func=cmd_build)

    e = sub.add_parser("extract", help="extract an analytic shape with MT or MC")
    e.add_argument("--shape", required=True, help="e.g. sphere:0.5,0.5,0.5,0.3")
    e.add_argument("--res", type=int, default=32)
    e.add_argument("--method", choices=("mt", "mc"), default="mt")
    e.add_argument("--scheme", choices=SCHEMES, default="six-tet")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_extract)

    f = sub.add_parser("fit", help="fit a grid to a point cloud (.xyz) or mesh (.obj)")
    f.add_argument("input")
    f.add_argument("--config", help="key=value config file")
    f.add_argument("--out", required=True, help="output mesh (.obj)")
    f.add_argument("--history", help="loss history CSV (default: <out>.history.csv)")
    f.add_argument("--manifest", help="run manifest JSON (default: <out>.json)")
    f.add_argument("--ablate", action="append", choices=sorted(_ABLATIONS))
    f.add_argument("--seed", type=int)
    f.add_argument("--workers", type=int)
    f.set_defaults(func=cmd_fit)

    be = sub.add_parser("bench", help="MC vs MT oracle benchmark on an analytic shape")
    be.add_argument("--shape", default="torus:0.5,0.5,0.5,0.25,0.1")
    be.add_argument("--budgets", default=",".join(map(str, DEFAULT_BUDGETS)), help="comma-separated query counts")
    be.add_argument("--scheme", choices=SCHEMES, default="six-tet")
    be.add_argument("--samples", type=int, default=20000)
    be.add_argument("--seed", type=int, default=0)
    be.add_argument("--out", required=True)
    be.set_defaults(func=cmd_bench)

    pa = sub.add_parser("patch", help="signed-distance patch of a closed mesh")
    pa.add_argument("--mesh", required=True)
    pa.add_argument("--center", required=True, help="x,y,z")
    pa.add_argument("--n", type=int, default=16)
    pa.add_argument("--extent", type=float, default=0.125)
    pa.add_argument("--out", required=True)
    pa.set_defaults(func=cmd_patch)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, FitError, OSError) as exc:
        print(f"tetsurf {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
