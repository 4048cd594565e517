"""Study configuration: defaults, validation and hashing."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from importlib import resources

from .exceptions import ConfigError

PRESETS = ("binary", "poisson", "ordinal", "svc", "mesh_sweep", "basis_compare", "coverage")
FAMILY_ALIASES = {"poisson": "count", "count": "count", "binary": "binary",
                  "ordinal": "ordinal", "svc": "svc"}

DEFAULTS = {
    "family": "binary",
    "n": 1000,
    "n_cv": 400,
    "beta": [1.0, 1.0],
    "matern": {"sigma2": 1.0, "phi": 0.2, "nu": 2.5},
    "theta": [0.0, 1.0, 2.0],
    "T": [[1.0, 0.3], [0.3, 0.2]],
    "mesh": {"nodes": None, "gamma": 1.649, "buffer": 0.1},
    "rank": {"grid": "default", "max": 200, "fixed": None},
    "precision": "icar",
    "car_rho": 0.5,
    "mcmc": {"iterations": 50000, "burn_in": 10000, "thin": 5},
    "replicates": 1,
    "seed": 2024,
    "threshold": 0.5,
    "jobs": 1,
    "intercept": True,
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError([f"unknown preset {name!r}; choose from {', '.join(PRESETS)}"])
    text = resources.files("picar.presets").joinpath(f"{name}.json").read_text()
    return json.loads(text)


def resolve(config: dict | None = None, preset: str | None = None) -> dict:
    """Defaults, then the preset, then user overrides; validated."""
    cfg = copy.deepcopy(DEFAULTS)
    if preset is not None:
        cfg = _merge(cfg, load_preset(preset))
        cfg["preset"] = preset
    cfg = _merge(cfg, config or {})
    validate(cfg)
    return cfg


def _num(errors, cfg, path, lo=None, hi=None, integer=False, allow_none=False,
         lo_open=False):
    cur = cfg
    for key in path.split("."):
        if not isinstance(cur, dict) or key not in cur:
            errors.append(f"{path}: missing")
            return
        cur = cur[key]
    if cur is None and allow_none:
        return
    if isinstance(cur, bool) or not isinstance(cur, (int, float)):
        errors.append(f"{path}: expected a number, got {cur!r}")
        return
    if integer and (not float(cur).is_integer()):
        errors.append(f"{path}: expected an integer, got {cur!r}")
    if lo is not None and (cur <= lo if lo_open else cur < lo):
        errors.append(f"{path}: must be {'>' if lo_open else '>='} {lo}, got {cur}")
    if hi is not None and cur > hi:
        errors.append(f"{path}: must be <= {hi}, got {cur}")


def validate(cfg: dict) -> None:
    """Check every constraint and raise one :class:`ConfigError` listing all violations."""
    errors: list[str] = []
    fam = cfg.get("family")
    if fam not in FAMILY_ALIASES:
        errors.append(f"family: unknown {fam!r}; choose binary, poisson/count, ordinal or svc")
    _num(errors, cfg, "n", 1, integer=True)
    _num(errors, cfg, "n_cv", 1, integer=True)
    _num(errors, cfg, "matern.sigma2", 0, lo_open=True)
    _num(errors, cfg, "matern.phi", 0, lo_open=True)
    nu = cfg.get("matern", {}).get("nu")
    if isinstance(nu, str):
        nu = math.inf if nu.lower() in ("inf", "infinity") else nu
        cfg["matern"]["nu"] = nu
    if nu not in (0.5, 1.5, 2.5, math.inf):
        errors.append(f"matern.nu: {nu!r} unsupported; choose 0.5, 1.5, 2.5 or inf")
    beta = cfg.get("beta")
    if not isinstance(beta, list) or not beta or not all(isinstance(b, (int, float)) for b in beta):
        errors.append("beta: expected a non-empty list of numbers")
    theta = cfg.get("theta")
    if fam == "ordinal":
        if (not isinstance(theta, list) or len(theta) < 1 or theta[0] != 0
                or any(b <= a for a, b in zip(theta, theta[1:]))):
            errors.append(f"theta: must start at 0 and increase strictly, got {theta!r}")
    if fam == "svc":
        T = cfg.get("T")
        ok = (isinstance(T, list) and len(T) == 2 and all(isinstance(r, list) and len(r) == 2 for r in T))
        if not ok:
            errors.append("T: expected a 2x2 matrix")
        else:
            a, b, c, d = T[0][0], T[0][1], T[1][0], T[1][1]
            if b != c or a <= 0 or a * d - b * c <= 0:
                errors.append("T: must be symmetric positive definite")
        if isinstance(beta, list) and len(beta) < 1:
            errors.append("beta: svc needs at least one covariate")
    _num(errors, cfg, "mesh.nodes", 4, integer=True, allow_none=True)
    _num(errors, cfg, "mesh.gamma", 0, lo_open=True)
    _num(errors, cfg, "mesh.buffer", 0)
    _num(errors, cfg, "rank.max", 2, integer=True)
    _num(errors, cfg, "rank.fixed", 1, integer=True, allow_none=True)
    grid = cfg.get("rank", {}).get("grid")
    if not (grid in ("default", "full") or (isinstance(grid, list) and grid
                                               and all(isinstance(g, int) and g >= 2 for g in grid))):
        errors.append(f"rank.grid: 'default', 'full' or a list of integers >= 2, got {grid!r}")
    mesh_nodes = cfg.get("mesh", {}).get("nodes")
    rmax = cfg.get("rank", {}).get("max")
    if isinstance(mesh_nodes, int) and isinstance(rmax, int) and rmax >= mesh_nodes:
        errors.append(f"rank.max: must be below the mesh size {mesh_nodes}, got {rmax}")
    if cfg.get("precision") not in ("ind", "icar", "car"):
        errors.append(f"precision: choose ind, icar or car, got {cfg.get('precision')!r}")
    for p in cfg.get("precisions", []):
        if p not in ("ind", "icar", "car"):
            errors.append(f"precisions: unknown kind {p!r}")
    _num(errors, cfg, "car_rho", 0, 1, lo_open=True)
    if cfg.get("car_rho") == 1:
        errors.append("car_rho: must be < 1")
    _num(errors, cfg, "mcmc.iterations", 1, integer=True)
    _num(errors, cfg, "mcmc.burn_in", 0, integer=True)
    _num(errors, cfg, "mcmc.thin", 1, integer=True)
    mc = cfg.get("mcmc", {})
    if isinstance(mc.get("iterations"), int) and isinstance(mc.get("burn_in"), int):
        if mc["burn_in"] >= mc["iterations"]:
            errors.append("mcmc.burn_in: must be smaller than mcmc.iterations")
    _num(errors, cfg, "replicates", 1, integer=True)
    _num(errors, cfg, "seed", 0, integer=True)
    _num(errors, cfg, "threshold", 0, 1)
    _num(errors, cfg, "jobs", 1, integer=True)
    if not isinstance(cfg.get("intercept"), bool):
        errors.append(f"intercept: expected true or false, got {cfg.get('intercept')!r}")
    for key in ("ranks", "mesh_nodes_grid"):
        v = cfg.get(key)
        if v is not None and not (isinstance(v, list) and all(isinstance(x, int) and x >= 1 for x in v)):
            errors.append(f"{key}: expected a list of positive integers")
    nus = cfg.get("nu_grid")
    if nus is not None:
        parsed = [math.inf if isinstance(x, str) and x.lower() == "inf" else x for x in nus]
        bad = [x for x in parsed if x not in (0.5, 1.5, 2.5, math.inf)]
        if bad:
            errors.append(f"nu_grid: unsupported values {bad}")
        else:
            cfg["nu_grid"] = parsed
    fams = cfg.get("families")
    if fams is not None:
        bad = [f for f in fams if f not in FAMILY_ALIASES] if isinstance(fams, list) else [fams]
        if bad or not fams:
            errors.append(f"families: unknown or empty {bad!r}")
    kinds = cfg.get("basis_kinds")
    if kinds is not None:
        bad = [k for k in kinds if k not in ("moran", "matern_eig", "bisquare", "thin_plate")]
        if bad:
            errors.append(f"basis_kinds: unknown {bad}")
    if errors:
        raise ConfigError(errors)
    cfg["family"] = FAMILY_ALIASES[fam]


def _jsonable(obj):
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def canonical_json(cfg: dict) -> str:
    return json.dumps(_jsonable(cfg), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def mesh_nodes_for(cfg: dict, n: int) -> int:
    m = cfg["mesh"].get("nodes")
    return int(m) if m else int(round(cfg["mesh"]["gamma"] * n))


def rank_grid_for(cfg: dict, P: int | None = None):
    """Explicit rank grid, or ``None`` for the default coarse grid."""
    grid = cfg["rank"]["grid"]
    if grid == "default":
        return None
    if grid == "full":
        return list(range(2, (P or cfg["rank"]["max"]) + 1))
    return list(grid)
