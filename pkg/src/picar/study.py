"""Canned replication studies producing CSV tables, SVG plots and a run manifest."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import platform
import time

import numpy as np

from .config import FAMILY_ALIASES, canonical_json, config_hash, mesh_nodes_for, rank_grid_for
from .evaluate import coverage_study
from .mcmc import ChainConfig
from .pipeline import build_basis_system, derive_seed, fit_dataset, simulate
from .randfield import MaternParams


def _matern(cfg, key="matern"):
    m = cfg[key]
    return MaternParams(float(m["sigma2"]), float(m["phi"]), float(m["nu"]))


def _chain_config(cfg, stage_rep=0, base=None):
    mc = cfg["mcmc"]
    seed = derive_seed(cfg["seed"] if base is None else base, "mcmc", stage_rep)
    return ChainConfig(int(mc["iterations"]), int(mc["burn_in"]), int(mc["thin"]), seed)


def _rank_grid(cfg):
    return rank_grid_for(cfg)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_csv(path, rows, columns=None) -> str:
    rows = list(rows)
    if columns is None:
        columns = []
        for r in rows:
            for k in r:
                if k not in columns:
                    columns.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])
    return path


def _fmt(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.6g}"
    return v


def line_plot(path, series: dict, xlabel: str, ylabel: str, vline=None, title=None) -> str:
    """Static SVG line plot; ``series`` maps label -> (x, y)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "picar"
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (x, y) in series.items():
        y = np.asarray(y, dtype=float)
        ax.plot(x, np.where(np.isfinite(y), y, np.nan), marker="o", ms=3, label=str(label))
    if vline is not None:
        ax.axvline(vline, color="red", lw=1)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _versions():
    import scipy

    from . import __version__

    return {"picar": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_manifest(out_dir, cfg, files, *, timings=None, cells=None, failures=None,
                   extra=None) -> str:
    """Run manifest with config hash, seed, versions, timings and file hashes."""
    man = {"config": json.loads(canonical_json(cfg)), "config_hash": config_hash(cfg),
           "seed": cfg.get("seed"), "versions": _versions(), "timings": timings or {},
           "cells": cells or [], "failures": failures or [],
           "files": {os.path.relpath(f, out_dir): sha256_file(f) for f in sorted(files)}}
    if extra:
        man.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
    return path


def _run_cells(fn, cells, jobs):
    def safe(cell):
        try:
            return cell, fn(cell), None
        except Exception as exc:  # noqa: BLE001 - collected into the failure manifest
            return cell, None, f"{type(exc).__name__}: {exc}"

    if jobs == 1:
        return [safe(c) for c in cells]
    from joblib import Parallel, delayed
    return Parallel(n_jobs=jobs)(delayed(safe)(c) for c in cells)


def _cell_record(res):
    ch = res.chain
    return {"rank": res.rank, "precision": res.precision, "acceptance": ch.acceptance,
            "ess": ch.ess, "wall_time": ch.wall_time, "timings": res.timings}


def _metric_row(res, family, extra=None):
    row = dict(extra or {})
    m = res.metrics
    row["rank"] = res.rank
    for k, v in m.items():
        if k.startswith(("beta_", "alpha_")):
            row[k] = v
    row["mpr" if family == "ordinal" else "cvmspe"] = m["cvmspe"]
    row["time_min"] = m["time_min"]
    es = res.chain.es_per_sec()
    row["es_per_sec_beta_min"] = min(v for k, v in es.items() if k.startswith("beta"))
    return row


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------


def rank_study(cfg, out_dir):
    """Tables across ranks and across precision kernels for one dataset."""
    fam = cfg["family"]
    t0 = time.perf_counter()
    ds = simulate(fam, cfg["n"], cfg["n_cv"], seed=derive_seed(cfg["seed"], "data", 0),
                  beta=cfg["beta"], matern=_matern(cfg), theta=cfg["theta"], T=cfg["T"])
    system = build_basis_system(ds, mesh_nodes=mesh_nodes_for(cfg, ds.n),
                                buffer_fraction=cfg["mesh"]["buffer"], rank_max=cfg["rank"]["max"],
                                seed=derive_seed(cfg["seed"], "mesh", 0))
    base = fit_dataset(ds, system=system, rank=cfg["rank"]["fixed"], rank_grid=_rank_grid(cfg),
                       precision=cfg["precision"], car_rho=cfg["car_rho"],
                       chain=_chain_config(cfg), threshold=cfg["threshold"],
                       intercept=cfg["intercept"])
    files, cells, failures = [], [_cell_record(base)], []
    label = "mpr" if fam == "ordinal" else "cvmspe"
    if base.selection is not None:
        sel = base.selection
        files.append(write_csv(os.path.join(out_dir, "rank_selection.csv"),
                               [{"rank": r, label: s} for r, s in sel.table()], ["rank", label]))
        files.append(line_plot(os.path.join(out_dir, "rank_selection.svg"),
                               {label: (sel.grid, sel.cvmspe)}, "rank p",
                               f"held-out {label} (GLM)", vline=sel.chosen))
    ranks = [r for r in cfg.get("ranks", []) if r <= system.P and r != base.rank]
    results = _run_cells(
        lambda r: fit_dataset(ds, system=system, rank=r, precision=cfg["precision"],
                              car_rho=cfg["car_rho"], chain=_chain_config(cfg),
                              threshold=cfg["threshold"], store_delta=False,
                              intercept=cfg["intercept"]),
        ranks, cfg["jobs"])
    rows = {base.rank: _metric_row(base, fam, {"chosen": 1})}
    for r, res, err in results:
        if res is None:
            failures.append({"cell": f"rank={r}", "error": err})
            continue
        rows[r] = _metric_row(res, fam, {"chosen": 0})
        cells.append(_cell_record(res))
    files.append(write_csv(os.path.join(out_dir, "rank_table.csv"),
                           [rows[r] for r in sorted(rows)]))
    precs = [p for p in cfg.get("precisions", []) if p != cfg["precision"]]
    results = _run_cells(
        lambda p: fit_dataset(ds, system=system, rank=base.rank, precision=p,
                              car_rho=cfg["car_rho"], chain=_chain_config(cfg),
                              threshold=cfg["threshold"], store_delta=False,
                              intercept=cfg["intercept"]),
        precs, cfg["jobs"])
    prow = {cfg["precision"]: _metric_row(base, fam, {"precision": cfg["precision"]})}
    for p, res, err in results:
        if res is None:
            failures.append({"cell": f"precision={p}", "error": err})
            continue
        prow[p] = _metric_row(res, fam, {"precision": p})
        cells.append(_cell_record(res))
    order = [p for p in ("ind", "icar", "car") if p in prow]
    files.append(write_csv(os.path.join(out_dir, "precision_table.csv"), [prow[p] for p in order]))
    timings = {"total": time.perf_counter() - t0}
    return files, cells, failures, timings


def mesh_sweep(cfg, out_dir):
    """Prediction error, prediction sd and chosen rank across mesh sizes and smoothness."""
    t0 = time.perf_counter()
    families = [FAMILY_ALIASES[f] for f in cfg.get("families", [cfg["family"]])]
    nodes = cfg.get("mesh_nodes_grid", [100, 500, 750, 1000, 1500, 2000])
    nus = cfg.get("nu_grid", [0.5, 2.5, math.inf])
    cells = [(f, nu, m) for f in families for nu in nus for m in nodes]

    def run(cell):
        fam, nu, m = cell
        fi, ni = families.index(fam), nus.index(nu)
        rep = 100 * fi + ni
        mp = MaternParams(cfg["matern"]["sigma2"], cfg["matern"]["phi"], nu)
        ds = simulate(fam, cfg["n"], cfg["n_cv"], seed=derive_seed(cfg["seed"], "data", rep),
                      beta=cfg["beta"], matern=mp)
        return fit_dataset(ds, mesh_nodes=m, buffer_fraction=cfg["mesh"]["buffer"],
                           rank_max=min(cfg["rank"]["max"], m - 3), rank_grid=_rank_grid(cfg),
                           precision=cfg["precision"], car_rho=cfg["car_rho"],
                           chain=_chain_config(cfg, rep), threshold=cfg["threshold"],
                           seed=derive_seed(cfg["seed"], "mesh", rep), store_delta=False,
                           intercept=cfg["intercept"])

    results = _run_cells(run, cells, cfg["jobs"])
    files, records, failures = [], [], []
    table = {}
    for (fam, nu, m), res, err in results:
        if res is None:
            failures.append({"cell": f"{fam} nu={nu} m={m}", "error": err})
            continue
        err_v = res.metrics["misclassification"] if fam == "binary" else res.metrics["cvmspe"]
        table[(fam, nu, m)] = (err_v, res.metrics["mean_pred_sd"], res.rank)
        records.append(_cell_record(res))
    for fam in families:
        for idx, what in enumerate(("error", "sd", "rank")):
            rows = []
            for nu in nus:
                row = {"nu": "inf" if nu == math.inf else nu}
                for m in nodes:
                    v = table.get((fam, nu, m))
                    row[str(m)] = "" if v is None else v[idx]
                rows.append(row)
            files.append(write_csv(os.path.join(out_dir, f"mesh_{fam}_{what}.csv"), rows,
                                   ["nu", *[str(m) for m in nodes]]))
        series = {f"nu={'inf' if nu == math.inf else nu}":
                  (nodes, [table.get((fam, nu, m), (np.nan, np.nan))[1] for m in nodes])
                  for nu in nus}
        files.append(line_plot(os.path.join(out_dir, f"mesh_{fam}_sd.svg"), series,
                               "mesh nodes m", "mean prediction sd"))
    return files, records, failures, {"total": time.perf_counter() - t0}


def basis_compare(cfg, out_dir):
    """Moran basis against Matérn eigenvectors, bi-square and thin-plate bases (SVC design)."""
    t0 = time.perf_counter()
    ds = simulate(cfg["family"], cfg["n"], cfg["n_cv"], seed=derive_seed(cfg["seed"], "data", 0),
                  beta=cfg["beta"], matern=_matern(cfg), T=cfg["T"])
    kinds = cfg.get("basis_kinds", ["moran", "matern_eig", "bisquare", "thin_plate"])
    mb = cfg.get("matern_basis", {"sigma2": 1.0, "phi": 0.2, "nu": 2.5})
    mbp = MaternParams(mb["sigma2"], mb["phi"], float(mb["nu"]))

    def run(kind):
        system = build_basis_system(ds, kind=kind, mesh_nodes=mesh_nodes_for(cfg, ds.n),
                                    buffer_fraction=cfg["mesh"]["buffer"],
                                    rank_max=cfg["rank"]["max"],
                                    seed=derive_seed(cfg["seed"], "mesh", 0),
                                    n_knots=cfg.get("n_knots", 64), omega=cfg.get("omega", 0.3),
                                    matern=mbp)
        fixed = system.P if kind in ("bisquare", "thin_plate") else cfg["rank"]["fixed"]
        prec = cfg["precision"] if kind == "moran" else "ind"
        return fit_dataset(ds, system=system, rank=fixed, rank_grid=_rank_grid(cfg),
                           precision=prec, car_rho=cfg["car_rho"], chain=_chain_config(cfg),
                           store_delta=False, intercept=cfg["intercept"])

    results = _run_cells(run, kinds, cfg["jobs"])
    rows, records, failures = [], [], []
    for kind, res, err in results:
        if res is None:
            failures.append({"cell": kind, "error": err})
            continue
        rows.append(_metric_row(res, cfg["family"], {"basis": kind}))
        records.append(_cell_record(res))
    files = [write_csv(os.path.join(out_dir, "basis_compare.csv"), rows)]
    return files, records, failures, {"total": time.perf_counter() - t0}


def coverage(cfg, out_dir):
    """Interval coverage of the regression coefficients over replicates."""
    t0 = time.perf_counter()
    rows, failures = [], []
    for fam in [FAMILY_ALIASES[f] for f in cfg.get("families", [cfg["family"]])]:
        sub = {"family": fam, "n": cfg["n"], "n_cv": cfg["n_cv"], "beta": cfg["beta"],
               "theta": cfg["theta"], "matern": cfg["matern"], "seed": cfg["seed"],
               "mesh_nodes": mesh_nodes_for(cfg, cfg["n"]), "buffer_fraction": cfg["mesh"]["buffer"],
               "rank_max": cfg["rank"]["max"], "rank": cfg["rank"]["fixed"],
               "rank_grid": _rank_grid(cfg), "precisions": cfg.get("precisions", [cfg["precision"]]),
               "car_rho": cfg["car_rho"], "mcmc": cfg["mcmc"], "intercept": cfg["intercept"]}
        tab = coverage_study(sub, cfg["replicates"], n_jobs=cfg["jobs"],
                             min_replicates=min(10, cfg["replicates"]))
        for prec, name, v, n_ok in tab.rows():
            rows.append({"family": fam, "precision": prec, "parameter": name, "coverage": v,
                         "replicates": n_ok, "failed": len(tab.failures)})
        failures += [{"cell": f"{fam} replicate {r}", "error": msg} for r, msg in tab.failures]
    files = [write_csv(os.path.join(out_dir, "coverage.csv"), rows,
                       ["family", "precision", "parameter", "coverage", "replicates", "failed"])]
    return files, [], failures, {"total": time.perf_counter() - t0}


RUNNERS = {"binary": rank_study, "poisson": rank_study, "ordinal": rank_study, "svc": rank_study,
           "mesh_sweep": mesh_sweep, "basis_compare": basis_compare, "coverage": coverage}


def run_study(preset: str, cfg: dict, out_dir) -> dict:
    """Run ``preset`` with a resolved config; returns the manifest as a dict."""
    os.makedirs(out_dir, exist_ok=True)
    files, cells, failures, timings = RUNNERS[preset](cfg, out_dir)
    path = write_manifest(out_dir, cfg, files, timings=timings, cells=cells, failures=failures,
                          extra={"preset": preset})
    with open(path) as fh:
        return json.load(fh)
