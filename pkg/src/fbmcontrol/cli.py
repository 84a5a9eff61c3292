"""Command-line front end: path generation, verification suites, LQ solver.

Configs are flat JSON files; coefficient entries are numbers (constants) or
named catalog functions, e.g. {"kind": "sin", "a": 0.5, "b": 0.2, "omega": 1.0}.
Exit codes: 0 pass, 1 check failure, 2 usage error, 3 non-convergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .adjoint import stationarity_residual, bsde_residual
from .errors import DomainError
from .fbm import Hurst, PathSet, TimeGrid, fbm_from_kernel, generate_bm
from .lq import (LqSpec, PicardOptions, convexity_check, lq_picard_solve,
                 optimality_sweep, riccati_oracle, random_adapted_directions)
from .sde import ControlProcess
from .verify import run_suite, suite_names

EXIT_OK = 0
EXIT_CHECK_FAILURE = 1
EXIT_USAGE = 2
EXIT_NO_CONVERGENCE = 3

# flat schema: name -> (kind, default); kind in {int, float, hurst, coef, list}
CONFIG_SCHEMA = {
    "experiment": ("str", "run"),
    "hurst": ("hurst", 0.75),
    "T": ("pos_float", 1.0),
    "n_steps": ("pos_int", 256),
    "n_paths": ("pos_int", 10000),
    "seed": ("nonneg_int", 12345),
    "m": ("pos_int", 1),
    "A": ("coef", -1.0),
    "A_tilde": ("coef", 1.0),
    "M": ("coef", 0.2),
    "M_tilde": ("coef", 0.0),
    "N": ("coef", 0.0),
    "Q": ("coef", 1.0),
    "R": ("coef", 1.0),
    "G": ("pos_float", 1.0),
    "x0": ("float", 1.0),
    "basis_degree": ("pos_int", 2),
    "theta": ("unit_float", 0.5),
    "tol": ("pos_float", 1e-3),
    "max_iter": ("pos_int", 50),
    "eps_list": ("float_list", [0.05, 0.1, 0.2]),
    "n_directions": ("pos_int", 8),
    "u0": ("float", 0.0),
}

COEF_CATALOG = {
    "const": (("value",), lambda p: (lambda t: p["value"])),
    "affine": (("a", "b"), lambda p: (lambda t: p["a"] + p["b"] * t)),
    "sin": (("a", "b", "omega", "phase"),
            lambda p: (lambda t: p["a"] + p["b"] * np.sin(p["omega"] * t + p["phase"]))),
    "cos": (("a", "b", "omega", "phase"),
            lambda p: (lambda t: p["a"] + p["b"] * np.cos(p["omega"] * t + p["phase"]))),
}


class ConfigError(ValueError):
    pass


def _validate_field(name, kind, raw):
    try:
        if kind == "str":
            if not isinstance(raw, str):
                raise ConfigError(f"{name} must be a string")
            return raw
        if kind == "pos_int":
            v = int(raw)
            if v < 1 or v != raw:
                raise ConfigError(f"{name} must be a positive integer, got {raw}")
            return v
        if kind == "nonneg_int":
            v = int(raw)
            if v < 0 or v != raw:
                raise ConfigError(f"{name} must be a non-negative integer, got {raw}")
            return v
        if kind == "float":
            return float(raw)
        if kind == "pos_float":
            v = float(raw)
            if not v > 0:
                raise ConfigError(f"{name} must be positive, got {raw}")
            return v
        if kind == "unit_float":
            v = float(raw)
            if not 0 < v <= 1:
                raise ConfigError(f"{name} must lie in (0, 1], got {raw}")
            return v
        if kind == "hurst":
            Hurst(float(raw))  # raises DomainError outside (1/2, 1)
            return float(raw)
        if kind == "float_list":
            if not isinstance(raw, (list, tuple)) or not raw:
                raise ConfigError(f"{name} must be a non-empty list of numbers")
            return [float(x) for x in raw]
        if kind == "coef":
            if isinstance(raw, (int, float)):
                return float(raw)
            if isinstance(raw, dict):
                k = raw.get("kind")
                if k not in COEF_CATALOG:
                    raise ConfigError(
                        f"{name}: unknown coefficient kind {k!r}; "
                        f"catalog: {sorted(COEF_CATALOG)}")
                params, _builder = COEF_CATALOG[k]
                missing = [p for p in params if p not in raw]
                if missing:
                    raise ConfigError(f"{name}: missing parameters {missing} for kind {k!r}")
                return {key: (raw[key] if key == "kind" else float(raw[key]))
                        for key in ("kind", *params)}
            raise ConfigError(f"{name} must be a number or a catalog object")
    except (TypeError, ValueError, DomainError) as exc:
        raise ConfigError(f"invalid {name}: {exc}") from exc
    raise ConfigError(f"unknown schema kind {kind}")


def load_config(path) -> dict:
    """Parse and schema-validate a flat JSON config; defaults filled in."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(CONFIG_SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config fields: {unknown}")
    cfg = {}
    for name, (kind, default) in CONFIG_SCHEMA.items():
        cfg[name] = _validate_field(name, kind, raw[name]) if name in raw else default
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _coef_fn(entry):
    if isinstance(entry, dict):
        params, builder = COEF_CATALOG[entry["kind"]]
        return builder(entry)
    return float(entry)


def lq_spec_from_config(cfg: dict) -> LqSpec:
    return LqSpec(A=_coef_fn(cfg["A"]), A_tilde=_coef_fn(cfg["A_tilde"]),
                  M=_coef_fn(cfg["M"]), M_tilde=_coef_fn(cfg["M_tilde"]),
                  N=_coef_fn(cfg["N"]), Q=_coef_fn(cfg["Q"]),
                  R=_coef_fn(cfg["R"]), G=cfg["G"], x0=cfg["x0"], T=cfg["T"])


def generate_paths(cfg: dict, workers: int = 1) -> PathSet:
    """Config-driven coupled path bundle; identical for any worker count.

    Workers split the path range into index-defined blocks; every block is
    produced by its own per-path keyed substreams, so the assembled array is
    a pure function of the config.
    """
    grid = TimeGrid(cfg["T"], cfg["n_steps"])
    n_paths, m, seed = cfg["n_paths"], cfg["m"], cfg["seed"]
    if workers <= 1:
        bm = generate_bm(grid, m, n_paths, seed)
    else:
        from .rng import SubstreamSampler
        bounds = np.linspace(0, n_paths, workers + 1).astype(int)
        blocks = [range(bounds[i], bounds[i + 1]) for i in range(workers)]

        def draw(block):
            return SubstreamSampler(seed).normal_block(block, m, grid.n_steps)

        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(draw, blocks))
        dB = np.concatenate(parts, axis=0) * np.sqrt(grid.dt)
        B = np.zeros((n_paths, m, grid.n_nodes))
        np.cumsum(dB, axis=-1, out=B[..., 1:])
        bm = PathSet(grid, m, n_paths, seed, None, dB, B, None)
    return fbm_from_kernel(bm, Hurst(cfg["hurst"]))


def _report_header(cfg: dict) -> list[str]:
    return [f"# config_hash: {config_hash(cfg)}",
            f"# seed: {cfg['seed']}",
            f"# grid: T={cfg['T']} n_steps={cfg['n_steps']}",
            f"# n_paths: {cfg['n_paths']}  hurst: {cfg['hurst']}",
            f"# resolved_config: {json.dumps(cfg, sort_keys=True)}"]


def _write_checks(path: Path, cfg: dict, checks) -> None:
    with open(path, "w", newline="") as fh:
        for line in _report_header(cfg):
            fh.write(line + "\n")
        fh.write("name,value,stderr\n")
        for c in checks:
            fh.write(c.row() + "\n")


def _write_summary(path: Path, cfg: dict, lines) -> None:
    with open(path, "w") as fh:
        for line in _report_header(cfg):
            fh.write(line + "\n")
        for line in lines:
            fh.write(line + "\n")


def cmd_paths(cfg: dict, out: Path, workers: int) -> int:
    paths = generate_paths(cfg, workers)
    paths.to_csv(out / "paths.csv")
    # covariance validation on the generated bundle
    n = paths.n_paths
    var_T = float(paths.BH[:, 0, -1].var(ddof=1))
    var_true = cfg["T"] ** (2 * cfg["hurst"])
    se = var_T * np.sqrt(2.0 / n)
    z_var = abs(var_T - var_true) / se
    inc_var = float(paths.dB.var(ddof=1)) * cfg["n_steps"] / cfg["T"]
    z_inc = abs(inc_var - 1.0) / np.sqrt(2.0 / (n * cfg["n_steps"]))
    checks = [
        ("bh_terminal_variance_z", z_var, se),
        ("bm_increment_variance_z", z_inc, 0.0),
    ]
    ok = z_var <= 4.0 and z_inc <= 4.0
    with open(out / "covariance_report.csv", "w", newline="") as fh:
        for line in _report_header(cfg):
            fh.write(line + "\n")
        fh.write("name,value,stderr\n")
        for name, v, s in checks:
            fh.write(f"{name},{v:.17g},{s:.17g}\n")
    return EXIT_OK if ok else EXIT_CHECK_FAILURE


def cmd_verify(cfg: dict, suite: str, out: Path) -> int:
    checks = run_suite(suite, hurst=cfg["hurst"], n_steps=cfg["n_steps"],
                       n_paths=cfg["n_paths"], seed=cfg["seed"], T=cfg["T"],
                       table_out=out / f"{suite}_table.csv")
    _write_checks(out / f"verify_{suite}.csv", cfg, checks)
    lines = [f"{'PASS' if c.passed else 'FAIL'} {c.name}: value={c.value:.6g} "
             f"tol={c.tolerance:.6g} {c.detail}" for c in checks]
    _write_summary(out / f"verify_{suite}_summary.txt", cfg, lines)
    for line in lines:
        print(line)
    return EXIT_OK if all(c.passed for c in checks) else EXIT_CHECK_FAILURE


def cmd_solve_lq(cfg: dict, out: Path, workers: int) -> int:
    spec = lq_spec_from_config(cfg)
    grid = TimeGrid(cfg["T"], cfg["n_steps"])
    try:
        spec.validate_on(grid)
    except DomainError as exc:
        print(f"config violates the LQ invariants: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILURE
    paths = generate_paths(cfg, workers)
    options = PicardOptions(theta=cfg["theta"], tol=cfg["tol"],
                            max_iter=cfg["max_iter"], u0=cfg["u0"])
    sol = lq_picard_solve(spec, paths, options)
    lines = [f"converged: {sol.converged}",
             f"iterations: {len(sol.iterations)}",
             f"theta: {cfg['theta']}  tol: {cfg['tol']}  max_iter: {cfg['max_iter']}",
             f"J: {sol.J:.8f} +- {sol.J_stderr:.8f}"]
    for row in sol.iterations:
        lines.append(f"iter {row['iter']}: control_change={row['change']:.6e} "
                     f"J={row['J']:.8f} +- {row['J_stderr']:.2e}")

    # control and adjoint exports (control capped to the first 200 paths)
    n_dump = min(sol.u.values.shape[0], 200)
    with open(out / "control.csv", "w", newline="") as fh:
        fh.write(f"# first {n_dump} paths\n")
        fh.write("path,node,t,u\n")
        t = grid.nodes
        for p in range(n_dump):
            for k in range(grid.n_nodes):
                fh.write(f"{p},{k},{t[k]:.17g},{sol.u.values[p, k]:.17g}\n")
    sol.estimate.to_csv(out / "adjoint.csv")

    exit_code = EXIT_OK
    if not sol.converged:
        lines.append("NON-CONVERGENCE: control change above tol at max_iter")
        _write_summary(out / "solve_summary.txt", cfg, lines)
        return EXIT_NO_CONVERGENCE

    res = stationarity_residual(sol.problem, sol.estimate)
    res.to_csv(out / "stationarity_residual.csv")
    z = res.max_abs_z()
    lines.append(f"stationarity_residual max |z|: {z:.3f} (tolerance 3)")
    if z > 3:
        exit_code = EXIT_CHECK_FAILURE

    bs = bsde_residual(sol.problem, sol.estimate)
    bs.to_csv(out / "bsde_residual.csv")
    lines.append(f"bsde_residual mean_sq (avg): {bs.mean_sq.mean():.3e}")

    if spec.is_brownian_only(grid):
        ric = riccati_oracle(spec, grid)
        gap = abs(sol.J - ric.J)
        budget = 3 * sol.J_stderr + 0.02 * sol.J
        lines.append(f"riccati_oracle J: {ric.J:.8f}  |gap|: {gap:.3e} "
                     f"(budget {budget:.3e})")
        if gap > budget:
            exit_code = EXIT_CHECK_FAILURE

    directions = random_adapted_directions(paths, cfg["n_directions"],
                                           cfg["seed"] + 99)
    rows = optimality_sweep(spec, sol.u, directions, cfg["eps_list"], paths)
    n_bad = sum((not r.diff_ok()) or (not r.deriv_ok()) for r in rows)
    lines.append(f"optimality_sweep: {len(rows)} rows, {n_bad} violations")
    with open(out / "optimality_sweep.csv", "w", newline="") as fh:
        fh.write("direction,eps,dJ,dJ_stderr,deriv,deriv_stderr\n")
        for r in rows:
            fh.write(f"{r.direction},{r.eps:.17g},{r.dJ:.17g},{r.dJ_stderr:.17g},"
                     f"{r.deriv:.17g},{r.deriv_stderr:.17g}\n")
    if n_bad:
        exit_code = EXIT_CHECK_FAILURE

    conv = convexity_check(spec, sol.u,
                           ControlProcess.from_values(sol.u.values + 0.5),
                           paths)
    lines.append(f"convexity margin: {conv.margin_mean:.6e} "
                 f"+- {conv.margin_stderr:.2e} (holds: {conv.holds()})")
    if not conv.holds():
        exit_code = EXIT_CHECK_FAILURE

    _write_summary(out / "solve_summary.txt", cfg, lines)
    for line in lines:
        print(line)
    return exit_code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fbmcontrol",
        description="Mixed fractional Brownian control: paths, verification "
                    "suites, and the linear-quadratic solver.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="flat JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--workers", type=int, default=1,
                       help="worker count (results are independent of it)")

    add_common(sub.add_parser("paths", help="generate coupled B/B^H paths"))
    pv = sub.add_parser("verify", help="run a named verification suite")
    pv.add_argument("suite", choices=suite_names())
    add_common(pv)
    add_common(sub.add_parser("solve-lq", help="solve the LQ problem end to end"))

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors
        return int(exc.code) if exc.code else 0

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.workers < 1:
        print("workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE

    if args.command == "paths":
        return cmd_paths(cfg, out, args.workers)
    if args.command == "verify":
        return cmd_verify(cfg, args.suite, out)
    if args.command == "solve-lq":
        return cmd_solve_lq(cfg, out, args.workers)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
