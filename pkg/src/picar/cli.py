"""Command-line entry point: ``picar <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .config import PRESETS, config_hash, mesh_nodes_for, rank_grid_for, resolve
from .exceptions import ConfigError, PicarError


def _jobs(args) -> int:
    if getattr(args, "jobs", None):
        return int(args.jobs)
    return int(os.environ.get("PICAR_JOBS", "1"))


def _load_config(args, preset=None) -> dict:
    over = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            over = json.load(fh)
    cli = {}
    for key, path in (("family", "family"), ("seed", "seed"), ("replicates", "replicates"),
                      ("precision", "precision"), ("car_rho", "car_rho"), ("threshold", "threshold")):
        v = getattr(args, key, None)
        if v is not None:
            cli[path] = v
    for key, sub in (("mesh_nodes", ("mesh", "nodes")), ("mesh_buffer", ("mesh", "buffer")),
                     ("rank_max", ("rank", "max")), ("rank", ("rank", "fixed")),
                     ("rank_grid", ("rank", "grid")), ("iterations", ("mcmc", "iterations")),
                     ("burn_in", ("mcmc", "burn_in")), ("thin", ("mcmc", "thin"))):
        v = getattr(args, key, None)
        if v is not None:
            cli.setdefault(sub[0], {})[sub[1]] = v
    cli["jobs"] = _jobs(args)
    merged = dict(over)
    for k, v in cli.items():
        if isinstance(v, dict):
            merged[k] = {**merged.get(k, {}), **v}
        else:
            merged[k] = v
    return resolve(merged, preset)


def _add_common(p, *, model=True, mcmc=False):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help="worker processes (default: $PICAR_JOBS or 1)")
    if model:
        p.add_argument("--family", choices=["binary", "poisson", "count", "ordinal", "svc"])
        p.add_argument("--mesh-nodes", type=int, dest="mesh_nodes")
        p.add_argument("--mesh-buffer", type=float, dest="mesh_buffer")
        p.add_argument("--rank-max", type=int, dest="rank_max")
        p.add_argument("--rank-grid", choices=["default", "full"], dest="rank_grid")
        p.add_argument("--precision", choices=["ind", "icar", "car"])
        p.add_argument("--car-rho", type=float, dest="car_rho")
    if mcmc:
        p.add_argument("--rank", type=int, help="fixed rank; bypasses the heuristic")
        p.add_argument("--iterations", type=int)
        p.add_argument("--burn-in", type=int, dest="burn_in")
        p.add_argument("--thin", type=int)
        p.add_argument("--threshold", type=float)


def _dataset(path, family):
    from .randfield import Dataset

    return Dataset.from_csv(path, family)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    from .pipeline import derive_seed, simulate
    from .randfield import MaternParams
    from .study import write_manifest

    cfg = _load_config(args, args.preset)
    os.makedirs(args.out, exist_ok=True)
    m = cfg["matern"]
    files = []
    for rep in range(cfg["replicates"]):
        ds = simulate(cfg["family"], cfg["n"], cfg["n_cv"], seed=derive_seed(cfg["seed"], "data", rep),
                      beta=cfg["beta"], matern=MaternParams(m["sigma2"], m["phi"], m["nu"]),
                      theta=cfg["theta"], T=cfg["T"])
        path = os.path.join(args.out, f"dataset_{rep:03d}.csv")
        ds.to_csv(path)
        files.append(path)
    write_manifest(args.out, cfg, files)
    print(f"wrote {len(files)} datasets to {args.out}")
    return 0


def cmd_mesh(args) -> int:
    from .mesh import build_mesh, save_mesh

    cfg = _load_config(args)
    ds = _dataset(args.data, cfg["family"])
    m = mesh_nodes_for(cfg, ds.n)
    mesh = build_mesh(ds.all_locations, m, cfg["mesh"]["buffer"], seed=cfg["seed"])
    save_mesh(mesh, args.out)
    print(f"mesh: {mesh.n_vertices} vertices, {mesh.n_triangles} triangles -> {args.out}")
    return 0


def cmd_basis(args) -> int:
    from .basis import moran_basis, save_basis
    from .mesh import adjacency, load_mesh

    mesh = load_mesh(args.mesh)
    P = min(args.rank_max or 200, mesh.n_vertices - 2)
    B = moran_basis(adjacency(mesh), P, method=args.eigen_method, seed=args.seed or 0)
    save_basis(B, args.out)
    print(f"basis: {B.rank} positive eigenpairs of {P} requested -> {args.out}")
    return 0


def cmd_select_rank(args) -> int:
    from .glm import select_rank
    from .pipeline import build_basis_system, design
    from .study import write_csv

    cfg = _load_config(args)
    ds = _dataset(args.data, cfg["family"])
    system = build_basis_system(ds, mesh_nodes=mesh_nodes_for(cfg, ds.n),
                                buffer_fraction=cfg["mesh"]["buffer"], rank_max=cfg["rank"]["max"],
                                seed=cfg["seed"])
    grid = rank_grid_for(cfg, system.P)
    J = int(max(ds.z.max(), ds.z_cv.max())) if ds.family == "ordinal" else None
    icpt = cfg["intercept"]
    sel = select_rank(design(ds.family, ds.X, icpt), ds.z, system.AM,
                      design(ds.family, ds.X_cv, icpt), ds.z_cv, system.AM_cv, family=ds.family,
                      grid=grid, J=J, n_jobs=cfg["jobs"])
    write_csv(args.out, [{"rank": r, "cvmspe": s} for r, s in sel.table()], ["rank", "cvmspe"])
    print(sel.chosen)
    return 0


def cmd_fit(args) -> int:
    from .basis import save_basis
    from .mcmc import ChainConfig
    from .mesh import save_mesh
    from .pipeline import fit_dataset
    from .study import write_csv, write_manifest

    cfg = _load_config(args)
    ds = _dataset(args.data, cfg["family"])
    os.makedirs(args.out, exist_ok=True)
    mc = cfg["mcmc"]
    t0 = time.perf_counter()
    try:
        res = fit_dataset(ds, mesh_nodes=mesh_nodes_for(cfg, ds.n),
                          buffer_fraction=cfg["mesh"]["buffer"], rank_max=cfg["rank"]["max"],
                          seed=cfg["seed"], rank=cfg["rank"]["fixed"],
                          rank_grid=rank_grid_for(cfg),
                          precision=cfg["precision"], car_rho=cfg["car_rho"],
                          chain=ChainConfig(mc["iterations"], mc["burn_in"], mc["thin"], cfg["seed"]),
                          n_jobs=cfg["jobs"], threshold=cfg["threshold"],
                          intercept=cfg["intercept"])
    except PicarError as exc:
        raise PicarError(f"fit failed: {exc}") from exc
    files = res.chain.to_csv(args.out)
    files.append(write_csv(os.path.join(args.out, "metrics.csv"), [res.metrics]))
    files.append(write_csv(os.path.join(args.out, "predictions.csv"),
                           [{"mean": m, "sd": s, "z_hat": z} for m, s, z in
                            zip(res.prediction.mean, res.prediction.sd, res.prediction.z_hat)]))
    if res.selection is not None:
        files.append(write_csv(os.path.join(args.out, "rank_selection.csv"),
                               [{"rank": r, "cvmspe": s} for r, s in res.selection.table()]))
    mesh_path = os.path.join(args.out, "mesh.txt")
    save_mesh(res.system.mesh, mesh_path)
    basis_path = os.path.join(args.out, "basis.txt")
    save_basis(res.system.basis.truncate(res.rank), basis_path)
    files += [mesh_path, basis_path]
    write_manifest(args.out, cfg, files, timings={**res.timings, "total": time.perf_counter() - t0},
                   cells=[{"acceptance": res.chain.acceptance, "ess": res.chain.ess,
                           "rank": res.rank}],
                   extra={"family": ds.family, "rank": res.rank,
                          "beta_names": res.chain.beta_names})
    row = {k: v for k, v in res.metrics.items()}
    print(json.dumps(row, default=float))
    return 0


def cmd_predict(args) -> int:
    from .basis import load_basis
    from .evaluate import cvmspe, mpr, predict
    from .mcmc import chain_from_csv
    from .mesh import load_mesh, projector
    from .pipeline import design
    from .study import write_csv

    with open(os.path.join(args.fit_dir, "manifest.json")) as fh:
        man = json.load(fh)
    family = man["family"]
    ds = _dataset(args.data, family)
    mesh = load_mesh(os.path.join(args.fit_dir, "mesh.txt"))
    B = load_basis(os.path.join(args.fit_dir, "basis.txt"))
    AM_cv = np.asarray(projector(mesh, ds.cv_locations) @ B.vectors)
    draws = chain_from_csv(args.fit_dir, family)
    names = man.get("beta_names")
    X_cv = design(family, ds.X_cv, bool(names) and "beta_0" in names)
    pred = predict(draws, family, AM_cv, X_cv, beta_names=names)
    out = args.out or os.path.join(args.fit_dir, "predictions_new.csv")
    write_csv(out, [{"mean": m, "sd": s, "z_hat": z}
                    for m, s, z in zip(pred.mean, pred.sd, pred.z_hat)])
    err = mpr(ds.z_cv, pred.z_hat) if family == "ordinal" else cvmspe(ds.z_cv, pred.z_hat)
    print(json.dumps({"metric": "mpr" if family == "ordinal" else "cvmspe", "value": err}))
    return 0


def cmd_study(args) -> int:
    from .study import run_study

    cfg = _load_config(args, args.preset)
    man = run_study(args.preset, cfg, args.out)
    print(f"study {args.preset}: {len(man['files'])} files, {len(man['failures'])} failed cells "
          f"-> {args.out} (config {config_hash(cfg)[:12]})")
    return 1 if man["failures"] else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="picar", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate study datasets")
    p.add_argument("preset", nargs="?", choices=["binary", "poisson", "ordinal", "svc"])
    p.add_argument("--out", required=True)
    p.add_argument("--replicates", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("mesh", help="build a mesh around a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("basis", help="Moran basis of a saved mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rank-max", type=int, dest="rank_max")
    p.add_argument("--eigen-method", choices=["auto", "lanczos", "dense"], default="auto")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_basis)

    p = sub.add_parser("select-rank", help="rank heuristic; writes rank,cvmspe CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_select_rank)

    p = sub.add_parser("fit", help="mesh, basis, rank heuristic and sampler in one go")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_common(p, mcmc=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict a dataset's cv rows from a fit directory")
    p.add_argument("--fit-dir", required=True, dest="fit_dir")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("study", help="run a canned replication study")
    p.add_argument("preset", choices=PRESETS)
    p.add_argument("--out", required=True)
    p.add_argument("--replicates", type=int)
    _add_common(p, mcmc=True)
    p.set_defaults(func=cmd_study)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except PicarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
