"""End-to-end acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line (collected in the terminal summary)
before asserting, so a failing criterion still reports its numbers.
"""

import csv
import os
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy import linalg as sla
from scipy import stats

from picar import basis as bmod
from picar.config import mesh_nodes_for, resolve
from picar.mcmc import ChainConfig, ModelSpec, gibbs_tau, run_chain
from picar.mesh import adjacency, build_mesh, projector
from picar.pipeline import build_basis_system, derive_seed, fit_dataset, simulate
from picar.study import _matern, basis_compare, coverage

from oracles import circumcircle_violations, dense_moran

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

FAMILY_PRESET = {"binary": "binary", "count": "poisson", "ordinal": "ordinal"}
_FITS: dict = {}


def _dataset(family, rep):
    cfg = resolve(preset=FAMILY_PRESET[family])
    ds = simulate(family, cfg["n"], cfg["n_cv"], seed=derive_seed(cfg["seed"], "data", rep),
                  beta=cfg["beta"], matern=_matern(cfg), theta=cfg["theta"])
    return cfg, ds


def reference_fit(family, rep=0, precision="icar"):
    """Full-scale fit: heuristic rank under ICAR, other kernels reuse that rank."""
    key = (family, rep, precision)
    if key in _FITS:
        return _FITS[key]
    cfg, ds = _dataset(family, rep)
    if (family, rep, "system") not in _FITS:
        t0 = time.perf_counter()
        _FITS[(family, rep, "system")] = build_basis_system(
            ds, mesh_nodes=mesh_nodes_for(cfg, ds.n), buffer_fraction=cfg["mesh"]["buffer"],
            rank_max=cfg["rank"]["max"], seed=derive_seed(cfg["seed"], "mesh", rep))
        _FITS[(family, rep, "basis_time")] = time.perf_counter() - t0
    system = _FITS[(family, rep, "system")]
    rank = None if precision == "icar" else reference_fit(family, rep, "icar").rank
    mc = cfg["mcmc"]
    t0 = time.perf_counter()
    res = fit_dataset(ds, system=system, rank=rank, precision=precision, car_rho=cfg["car_rho"],
                      chain=ChainConfig(mc["iterations"], mc["burn_in"], mc["thin"],
                                        derive_seed(cfg["seed"], "mcmc", rep)))
    res.timings["wall"] = time.perf_counter() - t0 + _FITS.get((family, rep, "basis_time"), 0.0)
    _FITS[key] = res
    return res


def covers(res, name, truth):
    _, lo, hi = res.prediction.params[name]
    return lo <= truth <= hi


def fmt_ci(res, name):
    m, lo, hi = res.prediction.params[name]
    return f"{name}={m:.3f} ({lo:.3f},{hi:.3f})"


def test_criterion_01_binary_replication(record_criterion):
    lines, passed = [], 0
    for rep in range(5):
        res = reference_fit("binary", rep)
        err = res.metrics["cvmspe"]
        ok_ci = covers(res, "beta_1", 1.0) and covers(res, "beta_2", 1.0)
        minutes = res.timings["wall"] / 60
        ok = err <= 0.33 and ok_ci and minutes <= 30
        passed += ok
        lines.append(f"seed{rep}:p={res.rank},cvmspe={err:.3f},ci={'ok' if ok_ci else 'miss'},"
                     f"{minutes:.2f}min")
    ok = passed >= 4
    record_criterion(1, "binary replication", ok, f"{passed}/5 seeds pass; " + "; ".join(lines))
    assert ok


def test_criterion_02_poisson(record_criterion):
    res = reference_fit("count", 0)
    err = res.metrics["cvmspe"]
    ok_ci = covers(res, "beta_1", 1.0) and covers(res, "beta_2", 1.0)
    ok = err <= 2.0 and ok_ci
    record_criterion(2, "poisson study", ok,
                     f"rank={res.rank} cvmspe={err:.3f} (<=2.0) {fmt_ci(res, 'beta_1')} "
                     f"{fmt_ci(res, 'beta_2')}")
    assert ok


def test_criterion_03_ordinal(record_criterion):
    res = reference_fit("ordinal", 0)
    err = res.metrics["mpr"]
    ok_ci = covers(res, "beta_1", 1.0) and covers(res, "beta_2", 1.0)
    alphas = [res.prediction.params[f"alpha_{j}"][0] for j in (2, 3)]
    ok_alpha = all(abs(a) <= 0.25 for a in alphas)
    ok = err <= 0.46 and ok_ci and ok_alpha
    record_criterion(3, "ordinal study", ok,
                     f"rank={res.rank} mpr={err:.3f} (<=0.46) {fmt_ci(res, 'beta_1')} "
                     f"{fmt_ci(res, 'beta_2')} alpha means={np.round(alphas, 3).tolist()}")
    assert ok


def test_criterion_04_precision_insensitivity(record_criterion):
    details, ok = [], True
    for family in ("binary", "count", "ordinal"):
        fits = {p: reference_fit(family, 0, p) for p in ("ind", "icar", "car")}
        errs = np.array([f.metrics["cvmspe"] for f in fits.values()])
        rel = (errs.max() - errs.min()) / errs.min()
        names = [k for k in fits["icar"].prediction.params if k.startswith("beta_")]
        means = np.array([[f.prediction.params[k][0] for k in names] for f in fits.values()])
        spread = float((means.max(axis=0) - means.min(axis=0)).max())
        fam_ok = rel <= 0.10 and spread <= 0.1
        ok &= fam_ok
        details.append(f"{family}:rel={rel:.3f},beta_spread={spread:.3f}")
    record_criterion(4, "precision insensitivity", ok, "; ".join(details))
    assert ok


def test_criterion_05_coverage(record_criterion, tmp_path):
    cfg = resolve(preset="coverage")
    t0 = time.perf_counter()
    coverage(cfg, str(tmp_path))
    minutes = (time.perf_counter() - t0) / 60
    with open(tmp_path / "coverage.csv") as fh:
        rows = list(csv.DictReader(fh))
    # regression coefficients only; ordinal cutoffs are reported but not scored
    vals = {(r["family"], r["parameter"]): float(r["coverage"]) for r in rows
            if r["parameter"].startswith("beta_")}
    failed = sum(int(r["failed"]) for r in rows)
    ok = (len(vals) == 6 and all(0.85 <= v <= 0.99 for v in vals.values())
          and minutes <= 8 * 60 * 8)
    record_criterion(5, "coverage", ok,
                     ", ".join(f"{f}/{p}={v:.2f}" for (f, p), v in vals.items())
                     + f"; failed replicates={failed}; {minutes:.1f} min on 1 worker")
    assert ok


def test_criterion_06_eigensolver_oracle(record_criterion):
    rng = np.random.default_rng(606)
    t0 = time.perf_counter()
    worst_rel, worst_angle, sizes = 0.0, 0.0, []
    for i in range(20):
        m_target = int(rng.integers(200, 501))
        locs = rng.uniform(size=(int(rng.integers(100, 300)), 2))
        mesh = build_mesh(locs, m_target, 0.1, seed=i)
        assert mesh.n_vertices <= 500
        sizes.append(mesh.n_vertices)
        N = adjacency(mesh)
        lz = bmod.moran_basis(N, 50, method="lanczos", seed=i)
        vals, vecs = np.linalg.eigh(dense_moran(N))
        dv, dV = vals[::-1][:50], vecs[:, ::-1][:, :50]
        assert lz.rank == 50
        worst_rel = max(worst_rel, float(np.max(np.abs(lz.values - dv) / np.abs(dv))))
        worst_angle = max(worst_angle, float(sla.subspace_angles(lz.vectors, dV).max()))
    secs = time.perf_counter() - t0
    ok = worst_rel <= 1e-8 and worst_angle <= 1e-6 and secs <= 120
    record_criterion(6, "eigensolver oracle", ok,
                     f"20 meshes m={min(sizes)}..{max(sizes)}; max rel eig err={worst_rel:.2e}; "
                     f"max principal angle={worst_angle:.2e}; {secs:.1f}s")
    assert ok


def test_criterion_07_geometry(record_criterion):
    rng = np.random.default_rng(707)
    locs = rng.uniform(size=(1200, 2))
    mesh = build_mesh(locs, 2000, 0.1, seed=7)
    S = np.vstack([locs, rng.uniform(size=(800, 2))])
    A = projector(mesh, S)
    worst = 0.0
    for _ in range(100):
        a, b, c = rng.standard_normal(3)
        f_nodes = a + b * mesh.vertices[:, 0] + c * mesh.vertices[:, 1]
        worst = max(worst, float(np.abs(A @ f_nodes - (a + b * S[:, 0] + c * S[:, 1])).max()))
    bad, checked = 0, []
    for m in (100, 500, 1000, 2000):
        msh = mesh if m == 2000 else build_mesh(rng.uniform(size=(m // 2, 2)), m, 0.1, seed=m)
        assert msh.n_vertices <= 2000
        bad += circumcircle_violations(msh.vertices, msh.triangles)
        checked.append(msh.n_vertices)
    ok = worst <= 1e-10 and bad == 0
    record_criterion(7, "geometry exactness", ok,
                     f"100 affine fields max err={worst:.1e}; Delaunay violations={bad} "
                     f"over meshes m={checked}")
    assert ok


def test_criterion_08_gibbs_conjugacy(record_criterion):
    rng = np.random.default_rng(808)
    locs = rng.uniform(size=(300, 2))
    mesh = build_mesh(locs, 500, 0.1, seed=8)
    N = adjacency(mesh)
    M = bmod.moran_basis(N, 30).vectors
    results = []
    spec_hyper = {"binary/count/ordinal": ("a_tau", "b_tau"), "svc tau_b": ("a_tau2", "b_tau2")}
    for i, kind in enumerate(("ind", "icar", "car")):
        kernel = bmod.precision_kernel(kind, N, M)
        spec = ModelSpec("svc", np.ones((3, 1)), np.zeros((3, 30)), kernel)
        delta = rng.standard_normal(30) * 3.0
        for j, (label, (a_name, b_name)) in enumerate(spec_hyper.items()):
            a, b = getattr(spec, a_name), getattr(spec, b_name)
            draw_rng = np.random.default_rng(8000 + 10 * i + j)
            draws = np.array([gibbs_tau(delta, kernel, a, b, draw_rng) for _ in range(10_000)])
            shape, rate = a + 15.0, b + 0.5 * float(delta @ kernel.K @ delta)
            pval = stats.kstest(draws, stats.gamma(shape, scale=1.0 / rate).cdf).pvalue
            results.append((f"{kind}/{label}", pval))
    ok = all(p > 0.01 for _, p in results)
    record_criterion(8, "gibbs conjugacy", ok, ", ".join(f"{k} p={p:.3f}" for k, p in results))
    assert ok


def _per_iteration(mesh, N, B, n, p, reps=3, iters=3000):
    r = np.random.default_rng(n + p)
    S = r.uniform(size=(n, 2))
    AM = np.asarray(projector(mesh, S) @ B.vectors[:, :p])
    X = np.column_stack([r.standard_normal((n, 2)), np.ones(n)])
    z = (r.uniform(size=n) < 0.5).astype(float)
    spec = ModelSpec("binary", X, AM, bmod.precision_kernel("icar", N, B.vectors[:, :p]),
                     intercept=True)
    return min(run_chain(spec, z, ChainConfig(iters, 500, 5, s), store_delta=False).wall_time
               / iters for s in range(reps))


def _linear_ok(x, t):
    fit = stats.linregress(x, t)
    growth = max(b / a for a, b in zip(t, t[1:]))
    return fit.rvalue ** 2, growth


def test_criterion_09_linear_scaling(record_criterion):
    rng = np.random.default_rng(909)
    mesh = build_mesh(rng.uniform(size=(1000, 2)), 1649, 0.1, seed=9)
    N = adjacency(mesh)
    B = bmod.moran_basis(N, 200)
    ps, ns = [25, 50, 100, 200], [1000, 2000, 4000]
    tp = [_per_iteration(mesh, N, B, 1000, p) for p in ps]
    tn = [_per_iteration(mesh, N, B, n, 50) for n in ns]
    r2p, gp = _linear_ok(ps, tp)
    r2n, gn = _linear_ok(ns, tn)
    ok = r2p >= 0.95 and gp <= 2.5 and r2n >= 0.95 and gn <= 2.5
    record_criterion(9, "O(np) scaling", ok,
                     f"p-sweep us/it={np.round(np.array(tp) * 1e6, 1).tolist()} R2={r2p:.3f} "
                     f"max doubling x{gp:.2f}; n-sweep us/it={np.round(np.array(tn) * 1e6, 1).tolist()} "
                     f"R2={r2n:.3f} max doubling x{gn:.2f}")
    assert ok


def test_criterion_10_basis_bakeoff(record_criterion, tmp_path):
    cfg = resolve(preset="basis_compare")
    basis_compare(cfg, str(tmp_path))
    with open(tmp_path / "basis_compare.csv") as fh:
        err = {r["basis"]: float(r["cvmspe"]) for r in csv.DictReader(fh)}
    vs_mat = abs(err["moran"] - err["matern_eig"]) / err["matern_eig"]
    ok = err["moran"] < err["thin_plate"] and vs_mat <= 0.15
    record_criterion(10, "basis bake-off", ok,
                     f"n={cfg['n'] + cfg['n_cv']}; cvmspe " + ", ".join(
                         f"{k}={v:.2f}" for k, v in err.items())
                     + f"; moran vs matern_eig rel diff={vs_mat:.3f} (<=0.15)")
    assert ok


def test_criterion_11_property_suite(record_criterion):
    tests_dir = os.path.dirname(__file__)
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", tests_dir, "-q", "-m", "not acceptance",
                           "-p", "no:cacheprovider"], capture_output=True, text=True)
    secs = time.perf_counter() - t0
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = proc.returncode == 0 and secs < 300
    record_criterion(11, "property suite", ok, f"{summary}; {secs:.0f}s (<300s)")
    assert ok
