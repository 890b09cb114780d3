"""Command-line interface: configured runs with reproducible file outputs.

Every run reads one JSON config (schema-validated, unknown fields
rejected), applies any flag overrides, writes its tables under the
output directory, and finishes with a manifest.json that echoes the
effective config, the package version and the run diagnostics -- enough
to reproduce the outputs byte for byte. Floats are written with repr,
files are written to a temp name and atomically renamed, and nothing
records wall-clock time, so rerunning a config yields identical bytes.

Subcommands and their files:

solve      ocp_solution.csv   node,depth,prob,state,control
                              (control empty on leaf rows)
           stage_summary.csv  k,value,state_mean,state_min,state_max
                              [,theta_0,...]
turnpike   trajectories_N{N}.csv  path,prob,k,state,control
                              (one file per horizon; every root-to-leaf
                              path of the optimal tree, for fan plots)
           distances.csv      N,k,d_wasserstein,d_moment[,theta_0,...],
                              stage_cost,state_min,state_max
           stationary.json    the reference estimate behind the curves
mpc        trace.csv          path,step,state,control,noise,
                              stage_cost_eval,stage_cost_theta
           law.csv            step,atom,state,prob (abstract algorithm
                              only: the exact closed-loop state laws)
           summary.json       closed-loop costs and solve counters
sweep      sweep.csv          algorithm,horizon,theta_label[,theta_0,..],
                              j_avg,stderr,j_cl,stationary_cost
           cells/cell_{i}.json  one file per cell, written as completed
risk-eval  (no files) prints the risk value of a literal ensemble
check      (no files) Jacobian probes and evaluator cross-checks

Exit codes: 0 success, 2 config error, 3 solver failure, 4 resource cap.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import jsonschema
import numpy as np

from . import __version__
from . import mpc as _mpc
from . import risk as _risk
from . import tree as _tree
from . import turnpike as _turnpike
from .ensemble import Ensemble
from .optimizer import OptimizerError, SolveOptions
from .sysmodel import make_example1, make_example2, probe_jacobians

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_RESOURCE = 4


class ConfigError(Exception):
    """Invalid run configuration; the message names the offending field."""


# ------------------------------------------------------------ schemas

_PROBLEM = {
    "type": "object",
    "properties": {
        "name": {"enum": ["example1", "example2"]},
        "gamma": {"type": "number", "exclusiveMinimum": 0},
    },
    "required": ["name"],
    "additionalProperties": False,
}

_RISK = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["expectation", "avar_exact", "avar_softplus",
                          "kl_divergence"]},
        "alpha": {"type": "number", "exclusiveMinimum": 0, "maximum": 1.0},
        "c": {"type": "number", "minimum": 0},
    },
    "required": ["kind"],
    "additionalProperties": False,
}

_SOLVER = {
    "type": "object",
    "properties": {
        "tol_grad_inf": {"type": "number", "exclusiveMinimum": 0},
        "max_iter": {"type": "integer", "minimum": 1},
        "memory": {"type": "integer", "minimum": 1},
        "armijo_c1": {"type": "number"},
        "backtrack_factor": {"type": "number"},
        "max_backtracks": {"type": "integer", "minimum": 1},
    },
    "additionalProperties": False,
}

_THETA = {"type": "array", "items": {"type": "number"}, "minItems": 1}


def _schema(extra: dict, required: list) -> dict:
    props = {
        "problem": _PROBLEM,
        "risk": _RISK,
        "x0": {"type": "number"},
        "out_dir": {"type": "string", "minLength": 1},
        "seed": {"type": "integer", "minimum": 0},
        "solver": _SOLVER,
    }
    props.update(extra)
    return {
        "type": "object",
        "properties": props,
        "required": ["problem", "risk", "x0"] + required,
        "additionalProperties": False,
    }


_HORIZON = {"type": "integer", "minimum": 1}
_HORIZONS = {"type": "array", "items": _HORIZON, "minItems": 1}

_SCHEMAS = {
    "solve": _schema({"horizon": _HORIZON, "theta": _THETA}, ["horizon"]),
    "turnpike": _schema({
        "horizons": _HORIZONS,
        "n_long": {"type": "integer", "minimum": 5},
        "order": {"type": "number", "exclusiveMinimum": 0},
        "jobs": {"type": "integer", "minimum": 1},
    }, ["horizons"]),
    "mpc": _schema({
        "algorithm": {"enum": ["abstract", "implementable", "fixed_theta"]},
        "eval_risk": _RISK,
        "horizon": _HORIZON,
        "steps": {"type": "integer", "minimum": 1},
        "paths": {"type": "integer", "minimum": 1},
        "theta": _THETA,
        "n_long": {"type": "integer", "minimum": 5},
        "exact_atom_cap": {"type": "integer", "minimum": 1},
    }, ["horizon"]),
    "sweep": _schema({
        "eval_risk": _RISK,
        "horizons": _HORIZONS,
        "steps": {"type": "integer", "minimum": 1},
        "paths": {"type": "integer", "minimum": 1},
        "theta_offsets": {"type": "array", "items": _THETA, "minItems": 1},
        "theta_scales": {"type": "array", "items": {"type": "number"},
                         "minItems": 1},
        "n_long": {"type": "integer", "minimum": 5},
        "jobs": {"type": "integer", "minimum": 1},
    }, ["horizons"]),
}

# filled in when flags are absent; echoed into the manifest either way
_DEFAULTS = {
    "solve": {"out_dir": "."},
    "turnpike": {"out_dir": ".", "n_long": 13, "order": 2.0, "jobs": 1},
    "mpc": {"out_dir": ".", "algorithm": "implementable", "steps": 100,
            "paths": 200, "seed": 0, "n_long": 13},
    "sweep": {"out_dir": ".", "steps": 100, "paths": 200, "seed": 0,
              "n_long": 13, "jobs": 1},
}


def _validate(config: dict, command: str) -> dict:
    try:
        jsonschema.validate(config, _SCHEMAS[command])
    except jsonschema.ValidationError as err:
        raise ConfigError(f"config field {err.json_path}: {err.message}")
    cfg = dict(_DEFAULTS[command])
    cfg.update(config)
    cfg.setdefault("seed", 0)
    return cfg


# ----------------------------------------------------- config -> objects

def _make_problem(d: dict):
    if d["name"] == "example1":
        if "gamma" in d:
            raise ConfigError("config field $.problem.gamma: only example2 "
                              "takes a control weight")
        return make_example1()
    return make_example2(gamma=d.get("gamma", 15.0))


def _make_spec(d: dict, where: str = "risk"):
    kind = d["kind"]
    if kind == "expectation":
        return _risk.expectation()
    if kind in ("avar_exact", "avar_softplus"):
        if "alpha" not in d:
            raise ConfigError(f"config field $.{where}.alpha: required for {kind}")
        return getattr(_risk, kind)(d["alpha"])
    if "c" not in d:
        raise ConfigError(f"config field $.{where}.c: required for kl_divergence")
    return _risk.kl_divergence(d["c"])


def _make_options(cfg: dict):
    if "solver" not in cfg:
        return None
    try:
        return SolveOptions(**cfg["solver"])
    except ValueError as err:
        raise ConfigError(f"config field $.solver: {err}")


def _check_theta(spec, theta, where: str):
    try:
        spec.theta_from_external(np.asarray(theta, dtype=float))
    except ValueError as err:
        raise ConfigError(f"config field $.{where}: {err}")
    return [float(v) for v in theta]


# --------------------------------------------------------- file output

def _fmt(v) -> str:
    # missing values (None or NaN) become empty cells
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    f = float(v)
    return "" if math.isnan(f) else repr(f)


def _write_csv(path: str, header: list, rows) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    os.replace(tmp, path)


def _jsonsafe(obj):
    """NaN -> null so the emitted JSON stays strictly parseable."""
    if isinstance(obj, dict):
        return {k: _jsonsafe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonsafe(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return None if math.isnan(f) else f
    if isinstance(obj, np.ndarray):
        return _jsonsafe(obj.tolist())
    return obj


def _write_json(path: str, doc: dict) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(_jsonsafe(doc), sort_keys=True, indent=2) + "\n")
    os.replace(tmp, path)


def _write_manifest(out_dir: str, command: str, cfg: dict, diagnostics: dict) -> None:
    _write_json(os.path.join(out_dir, "manifest.json"), {
        "command": command,
        "config": cfg,
        "version": __version__,
        "diagnostics": diagnostics,
    })


def _theta_header(theta_dim: int) -> list:
    return [f"theta_{i}" for i in range(theta_dim)]


# ------------------------------------------------------------ commands

def cmd_solve(cfg: dict) -> int:
    problem = _make_problem(cfg["problem"])
    spec = _make_spec(cfg["risk"])
    options = _make_options(cfg)
    N = cfg["horizon"]
    fixed = None
    if "theta" in cfg:
        theta = _check_theta(spec, cfg["theta"], "theta")
        # one frozen parameter vector, applied at every stage
        fixed = np.tile(spec.theta_from_external(theta), (N, 1))
    tree = _tree.build_tree(problem.noise, N)
    d, ro, diag = _tree.solve_ocp(problem, tree, Ensemble.point(cfg["x0"]),
                                  spec, options=options, fixed_thetas=fixed)
    if not diag["converged"]:
        raise OptimizerError(f"solve did not converge: {diag['message']}")

    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    rows = []
    for node in range(tree.node_count):
        k = int(tree.depth[node])
        rows.append([node, k, tree.path_probs[node], ro.states[node, 0],
                     d.controls[node, 0] if k < N else None])
    _write_csv(os.path.join(out, "ocp_solution.csv"),
               ["node", "depth", "prob", "state", "control"], rows)

    srows = []
    for k in range(N):
        sl = tree.stage_slice(k)
        xs = ro.states[sl, 0]
        row = [k, ro.stage_values[k], float(tree.path_probs[sl] @ xs),
               float(xs.min()), float(xs.max())]
        if spec.theta_dim:
            row += list(diag["theta_stages"][k])
        srows.append(row)
    _write_csv(os.path.join(out, "stage_summary.csv"),
               ["k", "value", "state_mean", "state_min", "state_max"]
               + _theta_header(spec.theta_dim), srows)

    _write_manifest(out, "solve", cfg, {
        "backend": diag["backend"],
        "converged": diag["converged"],
        "iterations": diag["iterations"],
        "n_evals": diag["n_evals"],
        "grad_inf": diag["grad_inf"],
        "objective": diag["objective"],
        "nodes": tree.node_count,
    })
    print(f"wrote {out}/ocp_solution.csv ({tree.node_count} nodes), "
          f"stage_summary.csv, manifest.json")
    return EXIT_OK


def cmd_turnpike(cfg: dict) -> int:
    problem = _make_problem(cfg["problem"])
    spec = _make_spec(cfg["risk"])
    options = _make_options(cfg)
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)

    est = _turnpike.estimate_stationary(problem, spec, cfg["n_long"],
                                        cfg["x0"], options=options)
    for N in cfg["horizons"]:
        bundle = _turnpike.trajectory_bundle(problem, spec, N, cfg["x0"],
                                             options=options)
        _write_csv(os.path.join(out, f"trajectories_N{N}.csv"),
                   ["path", "prob", "k", "state", "control"],
                   [[r["path"], r["prob"], r["k"], r["state"], r["control"]]
                    for r in bundle])
        print(f"wrote {out}/trajectories_N{N}.csv "
              f"({1 + max(r['path'] for r in bundle)} paths)", file=sys.stderr)

    curves = _turnpike.turnpike_curves(problem, spec, cfg["horizons"],
                                       cfg["x0"], est, r=cfg["order"],
                                       options=options, jobs=cfg["jobs"])
    _write_csv(os.path.join(out, "distances.csv"),
               ["N", "k", "d_wasserstein", "d_moment"]
               + _theta_header(spec.theta_dim)
               + ["stage_cost", "state_min", "state_max"],
               [[r["N"], r["k"], r["d_wasserstein"], r["d_moment"],
                 *r["theta"], r["stage_cost"], r["state_min"], r["state_max"]]
                for r in curves])

    stationary = {
        "stage_cost": est.stage_cost,
        "theta_s": list(est.theta_s),
        "horizon": est.horizon,
        "stage": est.stage,
        "x_atoms": est.x_dist.values().tolist(),
        "x_probs": est.x_dist.probs.tolist(),
        "u_atoms": est.u_dist.values().tolist(),
        "u_probs": est.u_dist.probs.tolist(),
    }
    _write_json(os.path.join(out, "stationary.json"), stationary)
    _write_manifest(out, "turnpike", cfg, {
        "stationary": {k: stationary[k] for k in
                       ("stage_cost", "theta_s", "horizon", "stage")},
        "rows": len(curves),
    })
    print(f"wrote {out}/distances.csv ({len(curves)} rows), stationary.json, "
          f"manifest.json")
    return EXIT_OK


def _resolve_theta(cfg: dict, problem, spec, options):
    """The run's frozen parameter: explicit, or estimated from the turnpike."""
    if "theta" in cfg:
        return _check_theta(spec, cfg["theta"], "theta"), None
    est = _turnpike.estimate_stationary(problem, spec, cfg["n_long"],
                                        cfg["x0"], options=options)
    return [float(v) for v in est.theta_s], est


def cmd_mpc(cfg: dict) -> int:
    problem = _make_problem(cfg["problem"])
    spec = _make_spec(cfg["risk"])
    options = _make_options(cfg)
    eval_spec = _make_spec(cfg["eval_risk"], "eval_risk") if "eval_risk" in cfg else None
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)

    theta, est = (None, None)
    if cfg["algorithm"] == "fixed_theta":
        if spec.theta_dim == 0:
            raise ConfigError("config field $.algorithm: fixed_theta needs a "
                              "parametric risk measure")
        theta, est = _resolve_theta(cfg, problem, spec, options)
    elif "theta" in cfg:
        raise ConfigError("config field $.theta: only the fixed_theta "
                          "algorithm takes a frozen parameter")

    kw = dict(algorithm=cfg["algorithm"], horizon=cfg["horizon"],
              steps=cfg["steps"], spec=spec, eval_spec=eval_spec,
              fixed_theta=None if theta is None else tuple(theta),
              mc_paths=cfg["paths"], seed=cfg["seed"], options=options)
    if "exact_atom_cap" in cfg:
        kw["exact_atom_cap"] = cfg["exact_atom_cap"]
    try:
        run_cfg = _mpc.MpcConfig(**kw)
    except ValueError as err:
        raise ConfigError(f"config: {err}")

    summary = {"algorithm": cfg["algorithm"], "steps": cfg["steps"],
               "theta": theta}
    if est is not None:
        summary["theta_source"] = {"horizon": est.horizon, "stage": est.stage}
    if cfg["algorithm"] == "abstract":
        prop = _mpc.run_exact_propagation(problem, run_cfg, cfg["x0"])
        lrows = []
        for j, law in enumerate(prop.state_ensembles):
            lrows += [[j, i, law.values()[i], law.probs[i]]
                      for i in range(law.size)]
        _write_csv(os.path.join(out, "law.csv"),
                   ["step", "atom", "state", "prob"], lrows)
        _write_csv(os.path.join(out, "stage_costs.csv"),
                   ["step", "stage_cost_eval", "stage_cost_theta", "atoms"],
                   [[j, prop.stage_costs_eval[j], prop.stage_costs_theta[j],
                     prop.atom_counts[j]] for j in range(cfg["steps"])])
        summary.update(j_cl=prop.j_cl, j_avg=prop.j_avg, stderr=None,
                       n_solves=prop.n_solves, n_memo_hits=prop.n_memo_hits,
                       atom_counts=[int(n) for n in prop.atom_counts])
        files = f"{out}/law.csv, stage_costs.csv"
    else:
        trace = _mpc.run_closed_loop(problem, run_cfg, cfg["x0"])
        rows = []
        for pth in range(cfg["paths"]):
            for j in range(cfg["steps"]):
                rows.append([pth, j, trace.states[pth, j, 0],
                             trace.controls[pth, j, 0], trace.noises[pth, j, 0],
                             trace.stage_costs_eval[j],
                             trace.stage_costs_theta[j]])
        _write_csv(os.path.join(out, "trace.csv"),
                   ["path", "step", "state", "control", "noise",
                    "stage_cost_eval", "stage_cost_theta"], rows)
        nb = trace.j_avg_batches.size
        stderr = (float(np.std(trace.j_avg_batches, ddof=1) / np.sqrt(nb))
                  if nb > 1 else None)
        summary.update(j_cl=trace.j_cl, j_avg=trace.j_avg, stderr=stderr,
                       paths=cfg["paths"], n_solves=trace.n_solves,
                       n_memo_hits=trace.n_memo_hits)
        files = f"{out}/trace.csv"
    _write_json(os.path.join(out, "summary.json"), summary)
    _write_manifest(out, "mpc", cfg, summary)
    print(f"wrote {files}, summary.json, manifest.json "
          f"(j_avg={summary['j_avg']!r})")
    return EXIT_OK


def _variant_label(kind: str, value) -> str:
    if kind == "offset":
        if all(v == 0 for v in value):
            return "theta_s"
        inner = ",".join(f"{v:g}" for v in value)
        return f"theta_s+({inner})"
    if value == 1.0:
        return "theta_s"
    return f"{value:g}*theta_s"


def cmd_sweep(cfg: dict) -> int:
    problem = _make_problem(cfg["problem"])
    spec = _make_spec(cfg["risk"])
    options = _make_options(cfg)
    eval_spec = _make_spec(cfg["eval_risk"], "eval_risk") if "eval_risk" in cfg else None
    if "theta_offsets" in cfg and "theta_scales" in cfg:
        raise ConfigError("config field $.theta_scales: give offsets or "
                          "scales, not both")
    variants = [("offset", None)]
    if "theta_offsets" in cfg:
        variants = [("offset", off) for off in cfg["theta_offsets"]]
    elif "theta_scales" in cfg:
        variants = [("scale", s) for s in cfg["theta_scales"]]
    parametric = spec.theta_dim > 0
    if not parametric and ("theta_offsets" in cfg or "theta_scales" in cfg):
        raise ConfigError("config field $.risk.kind: parameter cells need a "
                          "parametric risk measure")
    out = cfg["out_dir"]
    cells_dir = os.path.join(out, "cells")
    os.makedirs(cells_dir, exist_ok=True)

    est = _turnpike.estimate_stationary(problem, spec, cfg["n_long"],
                                        cfg["x0"], options=options)
    base = _mpc.MpcConfig(algorithm="implementable", horizon=cfg["horizons"][0],
                          steps=cfg["steps"], spec=spec, eval_spec=eval_spec,
                          mc_paths=cfg["paths"], seed=cfg["seed"],
                          options=options)

    cells = []
    for N in cfg["horizons"]:
        for kind, value in variants:
            if not parametric:
                label, theta = base.algorithm, None
            elif kind == "offset" and value is None:
                label, theta = "theta_s", list(est.theta_s)
            elif kind == "offset":
                if len(value) != spec.theta_dim:
                    raise ConfigError("config field $.theta_offsets: entries "
                                      f"need {spec.theta_dim} components")
                label = _variant_label(kind, value)
                theta = [float(t + o) for t, o in zip(est.theta_s, value)]
            else:
                label = _variant_label(kind, value)
                theta = [float(value * t) for t in est.theta_s]
            if theta is not None:
                _check_theta(spec, theta, "theta_offsets/theta_scales")
            cells.append({"horizon": int(N), "label": label, "theta": theta})

    def run_cell(i: int) -> dict:
        cell = cells[i]
        rows = _mpc.performance_sweep(
            problem, base, cfg["x0"], [cell["horizon"]],
            thetas=None if cell["theta"] is None else [cell["theta"]],
            stationary_cost=est.stage_cost)
        row = dict(rows[0], label=cell["label"])
        _write_json(os.path.join(cells_dir, f"cell_{i:02d}.json"), row)
        print(f"cell {i + 1}/{len(cells)}: N={cell['horizon']} "
              f"{cell['label']} j_avg={row['j_avg']!r}", file=sys.stderr)
        return row

    jobs = min(cfg["jobs"], len(cells))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_cell, range(len(cells))))
    else:
        results = [run_cell(i) for i in range(len(cells))]

    _write_csv(os.path.join(out, "sweep.csv"),
               ["algorithm", "horizon", "theta_label"]
               + _theta_header(spec.theta_dim)
               + ["j_avg", "stderr", "j_cl", "stationary_cost"],
               [[r["algorithm"], r["horizon"], r["label"],
                 *(r["theta"] or () if parametric else ()),
                 r["j_avg"], r["stderr"], r["j_cl"], r["stationary_cost"]]
                for r in results])
    _write_manifest(out, "sweep", cfg, {
        "stationary": {"stage_cost": est.stage_cost,
                       "theta_s": list(est.theta_s),
                       "horizon": est.horizon, "stage": est.stage},
        "cells": len(cells),
    })
    print(f"wrote {out}/sweep.csv ({len(cells)} cells), manifest.json")
    return EXIT_OK


def cmd_risk_eval(args) -> int:
    d = {"kind": args.kind}
    if args.alpha is not None:
        d["alpha"] = args.alpha
    if args.c is not None:
        d["c"] = args.c
    spec = _make_spec(d)
    try:
        values = [float(v) for v in args.values.split(",")]
        probs = [float(v) for v in args.probs.split(",")]
        e = Ensemble.from_scalars(values, probs)
    except ValueError as err:
        raise ConfigError(f"bad ensemble: {err}")
    if args.theta is not None:
        try:
            theta = [float(v) for v in args.theta.split(",")]
            pv = _risk.psi(spec, e.values(), theta)
        except ValueError as err:
            raise ConfigError(f"bad theta: {err}")
        doc = {"kind": args.kind, "theta": theta,
               "value": float(e.probs @ np.asarray(pv))}
    else:
        rv = _risk.evaluate(spec, e)
        doc = {"kind": args.kind, "value": rv.value,
               "theta_star": list(rv.theta_star)}
    print(json.dumps(_jsonsafe(doc), sort_keys=True))
    return EXIT_OK


def cmd_check(args) -> int:
    failures = 0

    def report(name: str, err: float, tol: float):
        nonlocal failures
        ok = err <= tol
        failures += 0 if ok else 1
        print(f"{name}: max err {err:.3e} (tol {tol:g}) "
              f"{'ok' if ok else 'FAIL'}")

    for name, p in (("example1", make_example1()),
                    ("example2", make_example2())):
        rep = probe_jacobians(p, seed=args.seed)
        report(f"jacobians {name}", rep.max_rel_error, 1e-5)

    x0 = Ensemble(np.array([[1.0], [-0.5]]), np.array([0.4, 0.6]))
    dec = _tree.value_decomposition_check(make_example1(), x0, 4)
    report("value decomposition example1 N=4", dec["residual"], 1e-5)

    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for c in (0.0, 0.1, 0.5, 2.0):
        for _ in range(15):
            n = int(rng.integers(2, 9))
            z = Ensemble.from_scalars(rng.normal(0, 2, n), np.full(n, 1.0 / n))
            got = _risk.evaluate(_risk.kl_divergence(c), z).value
            ref = _risk.kl_reduced(c, z)
            worst = max(worst, abs(got - ref))
    report("kl evaluator vs reduced form (60 cases)", worst, 1e-7)

    worst = 0.0
    for _ in range(30):
        n = int(rng.integers(2, 9))
        pr = rng.dirichlet(np.ones(n))
        z = Ensemble.from_scalars(rng.normal(0, 2, n), pr)
        alpha = float(rng.uniform(0.05, 0.9))
        got = _risk.evaluate(_risk.avar_exact(alpha), z).value
        # the parametric form is minimized at an atom of the support
        ref = min(float(t + (pr @ np.maximum(z.values() - t, 0.0)) / alpha)
                  for t in z.values())
        worst = max(worst, abs(got - ref))
    report("avar evaluator vs parametric scan (30 cases)", worst, 1e-9)

    if failures:
        print(f"{failures} check(s) failed")
        return EXIT_SOLVER
    print("all checks passed")
    return EXIT_OK


# -------------------------------------------------------------- driver

_OVERRIDES = ("out_dir", "seed", "x0", "horizon", "steps", "paths")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="riskmpc",
        description="Risk-averse stochastic MPC runs with file outputs")
    sub = ap.add_subparsers(dest="command", required=True)

    run = argparse.ArgumentParser(add_help=False)
    run.add_argument("--config", required=True, help="JSON run configuration")
    run.add_argument("--out", dest="out_dir", help="output directory override")
    run.add_argument("--seed", type=int)
    run.add_argument("--jobs", type=int,
                     help="worker pool size (default: RISKMPC_JOBS or 1)")
    run.add_argument("--x0", type=float)
    run.add_argument("--horizon", type=int)
    run.add_argument("--steps", type=int)
    run.add_argument("--paths", type=int)

    for name, help_ in (("solve", "solve one tree OCP and dump the solution"),
                        ("turnpike", "trajectory bundles and distance curves"),
                        ("mpc", "simulate one closed loop"),
                        ("sweep", "closed-loop cost table over horizons and "
                                  "risk parameters")):
        sub.add_parser(name, parents=[run], help=help_)

    ev = sub.add_parser("risk-eval", help="evaluate a risk measure on a "
                                          "literal ensemble")
    ev.add_argument("--kind", required=True,
                    choices=["expectation", "avar_exact", "avar_softplus",
                             "kl_divergence"])
    ev.add_argument("--alpha", type=float)
    ev.add_argument("--c", type=float)
    ev.add_argument("--values", required=True, help="comma-separated atoms")
    ev.add_argument("--probs", required=True,
                    help="comma-separated probabilities")
    ev.add_argument("--theta", help="evaluate the parametric integrand at "
                                    "this theta instead of minimizing")

    ck = sub.add_parser("check", help="Jacobian probes and evaluator "
                                      "cross-checks")
    ck.add_argument("--seed", type=int, default=0)
    return ap


def _load_config(args) -> dict:
    try:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}")
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    for field in _OVERRIDES:
        v = getattr(args, field, None)
        if v is not None:
            raw[field] = v
    if args.command in ("turnpike", "sweep"):
        if args.jobs is not None:
            raw["jobs"] = args.jobs
        elif "jobs" not in raw and os.environ.get("RISKMPC_JOBS"):
            try:
                raw["jobs"] = int(os.environ["RISKMPC_JOBS"])
            except ValueError:
                raise ConfigError("RISKMPC_JOBS must be an integer")
    elif args.jobs is not None:
        raise ConfigError("--jobs only applies to turnpike and sweep")
    return _validate(raw, args.command)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "risk-eval":
            return cmd_risk_eval(args)
        if args.command == "check":
            return cmd_check(args)
        cfg = _load_config(args)
        fn = {"solve": cmd_solve, "turnpike": cmd_turnpike,
              "mpc": cmd_mpc, "sweep": cmd_sweep}[args.command]
        return fn(cfg)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (_tree.TreeSizeError, _mpc.AtomCapError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RESOURCE
    except (OptimizerError, _tree.RolloutError, _risk.RiskMinimizationError,
            _turnpike.TurnpikeError, _mpc.MpcError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
