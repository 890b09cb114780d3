"""Scenario-tree compilation of the finite-horizon risk-averse OCP.

Controls live on tree nodes (one per node of depth < N), which is exactly
the non-anticipativity constraint: a control may depend on the noise
realized so far and nothing else. Per-stage risk parameters are lifted
into the decision vector; the infimum over theta commutes with the
infimum over controls, so the solver may order the two freely. It nests
them: each control evaluation re-solves the stage inner problems exactly,
and the inner optimum cancels the theta block of the gradient, leaving
the control gradient of the reduced objective.

Indexing: breadth-first by depth. Depth-k nodes occupy
[offsets[k], offsets[k+1]); the child of the node with relative index j
on noise branch b has relative index j*m + b at depth k+1. A node's
relative index therefore encodes its branch history in base m, most
significant digit first.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from . import optimizer as _opt
from . import risk as _risk
from .ensemble import Ensemble
from .sysmodel import Problem

__all__ = [
    "ScenarioTree",
    "DecisionVector",
    "Rollout",
    "TreeSizeError",
    "RolloutError",
    "build_tree",
    "default_decision",
    "shift_decision",
    "rollout",
    "objective_and_gradient",
    "solve_ocp",
    "value_decomposition_check",
]

NODE_CAP = 200_000

_COMPILED_KINDS = {"expectation": 0, "avar_softplus": 1, "kl_divergence": 2}


class TreeSizeError(RuntimeError):
    pass


class RolloutError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScenarioTree:
    """Complete m-ary tree (or forest, one root per initial atom)."""

    N: int
    m: int
    n_roots: int
    offsets: np.ndarray      # (N+2,) depth block boundaries
    parent: np.ndarray       # (node_count,), -1 at roots
    depth: np.ndarray        # (node_count,)
    branch: np.ndarray       # (node_count,) noise branch taken into the node, -1 at roots
    path_probs: np.ndarray   # (node_count,) root prob times branch probs along the path
    root_probs: np.ndarray   # (n_roots,)

    @property
    def node_count(self) -> int:
        return int(self.offsets[-1])

    @property
    def inner_count(self) -> int:
        """Nodes carrying a control (depth < N)."""
        return int(self.offsets[self.N])

    def stage_slice(self, k: int) -> slice:
        return slice(int(self.offsets[k]), int(self.offsets[k + 1]))


def build_tree(noise: Ensemble, N: int, root_probs=None, node_cap: int = NODE_CAP) -> ScenarioTree:
    """Complete m-ary scenario tree of depth N over the given noise support."""
    if N < 1:
        raise ValueError("N must be >= 1")
    m = noise.size
    if root_probs is None:
        root_probs = np.array([1.0])
    root_probs = np.asarray(root_probs, dtype=float)
    R = root_probs.size

    counts = []
    total = 0
    c = R
    for _ in range(N + 1):
        counts.append(c)
        total += c
        if total > node_cap:
            raise TreeSizeError(
                f"tree needs more than {node_cap} nodes "
                f"(m={m}, N={N}, roots={R}); shrink the horizon or raise the cap"
            )
        c *= m
    offsets = np.zeros(N + 2, dtype=np.int64)
    offsets[1:] = np.cumsum(counts)

    parent = np.full(total, -1, dtype=np.int64)
    depth = np.zeros(total, dtype=np.int64)
    branch = np.full(total, -1, dtype=np.int64)
    path_probs = np.empty(total)
    path_probs[:R] = root_probs
    for k in range(N):
        lo, hi = int(offsets[k]), int(offsets[k + 1])
        chi = int(offsets[k + 2])
        rel = np.arange(chi - hi)
        parent[hi:chi] = lo + rel // m
        branch[hi:chi] = rel % m
        depth[hi:chi] = k + 1
        path_probs[hi:chi] = path_probs[parent[hi:chi]] * noise.probs[branch[hi:chi]]
    return ScenarioTree(N, m, R, offsets, parent, depth, branch, path_probs, root_probs)


@dataclass
class DecisionVector:
    """Controls per inner node plus per-stage risk parameters.

    thetas are in solver coordinates (see risk.psi_value_and_derivs) with
    shape (N, theta_dim); theta_dim 0 gives an empty block.
    """

    controls: np.ndarray
    thetas: np.ndarray

    def flatten(self, with_thetas: bool = True) -> np.ndarray:
        if with_thetas and self.thetas.size:
            return np.concatenate([self.controls.ravel(), self.thetas.ravel()])
        return self.controls.ravel().copy()

    @staticmethod
    def unflatten(flat, tree: ScenarioTree, control_dim: int, theta_dim: int,
                  fixed_thetas: Optional[np.ndarray] = None) -> "DecisionVector":
        nu = tree.inner_count * control_dim
        controls = np.asarray(flat[:nu], dtype=float).reshape(tree.inner_count, control_dim)
        if fixed_thetas is not None:
            return DecisionVector(controls, np.array(fixed_thetas, dtype=float))
        thetas = np.asarray(flat[nu:], dtype=float).reshape(tree.N, theta_dim)
        return DecisionVector(controls, thetas)


@dataclass
class Rollout:
    states: np.ndarray
    stage_cost_ensembles: list
    stage_values: np.ndarray
    objective: float


def _check_x0(tree: ScenarioTree, x0: Ensemble, problem: Problem) -> np.ndarray:
    if x0.size != tree.n_roots:
        raise ValueError(f"x0 has {x0.size} atoms but the tree has {tree.n_roots} roots")
    if not np.allclose(x0.probs, tree.root_probs, atol=1e-12):
        raise ValueError("x0 probabilities disagree with the tree's root probabilities")
    if x0.dim != problem.state_dim:
        raise ValueError("x0 dimension mismatch")
    return np.asarray(x0.atoms, dtype=float)


def _stage_value(spec: _risk.RiskSpec, z: np.ndarray, probs: np.ndarray, theta: np.ndarray) -> float:
    """Stage cost under a FIXED theta; exact evaluator for avar_exact."""
    if spec.kind == "avar_exact":
        return _risk.evaluate(spec, Ensemble.from_scalars(z, probs / probs.sum())).value
    if spec.theta_dim == 0:
        return float(probs @ z)
    pv, _, _ = _risk.psi_value_and_derivs(spec, z, theta)
    return float(probs @ pv)


def rollout(problem: Problem, tree: ScenarioTree, x0: Ensemble, d: DecisionVector,
            spec: _risk.RiskSpec) -> Rollout:
    """Propagate states and assemble the objective at the given decisions.

    Stage values use the thetas stored in d (no inner re-minimization);
    avar_exact specs are evaluated exactly instead.
    """
    x_roots = _check_x0(tree, x0, problem)
    states = kernels.pure.rollout_states(problem, tree.offsets, x_roots, d.controls)
    if not np.all(np.isfinite(states)):
        bad = int(np.flatnonzero(~np.isfinite(states).all(axis=1))[0])
        raise RolloutError(f"non-finite state at node {bad} (depth {int(tree.depth[bad])})")
    ensembles = []
    stage_values = np.empty(tree.N)
    for k in range(tree.N):
        sl = tree.stage_slice(k)
        z = problem.g(states[sl], d.controls[sl])
        if not np.all(np.isfinite(z)):
            bad = int(sl.start + np.flatnonzero(~np.isfinite(z))[0])
            raise RolloutError(f"non-finite stage cost at node {bad} (depth {k})")
        p = tree.path_probs[sl]
        ensembles.append(Ensemble.from_scalars(z, p))
        theta_k = d.thetas[k] if d.thetas.size else np.zeros(0)
        stage_values[k] = _stage_value(spec, z, p, theta_k)
    return Rollout(states, ensembles, stage_values, float(stage_values.sum()))


def objective_and_gradient(problem: Problem, tree: ScenarioTree, x0: Ensemble,
                           d: DecisionVector, spec: _risk.RiskSpec):
    """Objective and its gradient over (controls, thetas), reverse mode.

    Returns (objective, grad_controls, grad_thetas). Dispatches to the
    compiled kernel when it applies, else the pure engine.
    """
    if not spec.supports_gradient:
        raise ValueError("avar_exact cannot be differentiated; solve with avar_softplus")
    x_roots = _check_x0(tree, x0, problem)

    code = _COMPILED_KINDS.get(spec.kind)
    if kernels.USE_COMPILED and problem.scalar_coeffs is not None and code is not None:
        co = problem.scalar_coeffs
        param = spec.alpha if code == 1 else (spec.c if code == 2 else 0.0)
        thetas = np.ascontiguousarray(d.thetas, dtype=float)
        obj, gu, gth = kernels._core.eval_obj_grad(
            co.A, co.B, co.C, co.D, co.E, co.Q, co.R,
            tree.offsets, problem.noise.values().copy(), tree.path_probs,
            x_roots[:, 0].copy(), np.ascontiguousarray(d.controls[:, 0]),
            code, float(param or 0.0), thetas,
        )
        return obj, gu[:, None], gth

    def stage_eval(k, z, probs):
        theta_k = d.thetas[k] if d.thetas.size else np.zeros(0)
        pv, dz, dth = _risk.psi_value_and_derivs(spec, z, theta_k)
        return float(probs @ pv), probs * dz, dth @ probs

    return kernels.pure.eval_objective_and_gradient(
        problem, tree.offsets, tree.path_probs, x_roots, d.controls,
        stage_eval, spec.theta_dim,
    )


def default_decision(problem: Problem, tree: ScenarioTree, x0: Ensemble,
                     spec: _risk.RiskSpec, fixed_thetas: Optional[np.ndarray] = None) -> DecisionVector:
    """Initial iterate: myopic controls, stage thetas from the exact evaluator.

    Each control aims the mean-noise successor state at zero (closed form
    within the scalar coefficient family, plain zero otherwise). This keeps
    the initial rollout bounded even for dynamics whose open-loop states
    blow up double-exponentially, where a zero-control start overflows.
    """
    wbar = float(problem.noise.probs @ problem.noise.values()) if problem.noise.dim == 1 else 0.0
    states = np.empty((tree.node_count, problem.state_dim))
    states[: tree.n_roots] = _check_x0(tree, x0, problem)
    controls = np.zeros((tree.inner_count, problem.control_dim))
    co = problem.scalar_coeffs
    for k in range(tree.N):
        sl = tree.stage_slice(k)
        x = states[sl]
        if co is not None:
            drift = co.A * x[:, 0] + co.C * wbar + co.E
            if co.D == 0.0 and co.B != 0.0:
                u = -drift / co.B
            elif co.D != 0.0 and co.B == 0.0:
                rhs = -drift / co.D
                u = np.where(rhs >= 0.0, x[:, 0] - np.sqrt(np.maximum(rhs, 0.0)), x[:, 0])
            else:
                u = np.zeros(x.shape[0])
            controls[sl] = u[:, None]
        hi, chi = int(tree.offsets[k + 1]), int(tree.offsets[k + 2])
        for b in range(tree.m):
            states[hi + b:chi:tree.m] = problem.f(x, controls[sl], problem.noise.atoms[b])
    theta_dim = spec.theta_dim
    if fixed_thetas is not None:
        return DecisionVector(controls, np.array(fixed_thetas, dtype=float))
    thetas = np.zeros((tree.N, theta_dim))
    if theta_dim:
        for k in range(tree.N):
            sl = tree.stage_slice(k)
            z = problem.g(states[sl], controls[sl])
            ens = Ensemble.from_scalars(z, tree.path_probs[sl])
            thetas[k] = spec.theta_from_external(_risk.evaluate(spec, ens).theta_star)
    return DecisionVector(controls, thetas)


def shift_decision(d: DecisionVector, tree: ScenarioTree, branch: int) -> DecisionVector:
    """Time-shift a solved decision one step down the realized branch.

    The subtree hanging off the root's child `branch` supplies stages
    0..N-2 of the new decision; the final stage repeats each node's
    parent control. Valid for single-root trees only (MPC feedback).
    """
    if tree.n_roots != 1:
        raise ValueError("shift_decision expects a single-root tree")
    m, N = tree.m, tree.N
    controls = np.empty_like(d.controls)
    for k in range(N - 1):
        lo = int(tree.offsets[k])
        n_k = int(tree.offsets[k + 1]) - lo
        old_lo = int(tree.offsets[k + 1]) + branch * n_k
        controls[lo:lo + n_k] = d.controls[old_lo:old_lo + n_k]
    lo = int(tree.offsets[N - 1])
    n_last = int(tree.offsets[N]) - lo
    if N >= 2:
        plo = int(tree.offsets[N - 2])
        rel = np.arange(n_last) // m
        controls[lo:lo + n_last] = controls[plo + rel]
    thetas = d.thetas.copy()
    if thetas.size and N >= 2:
        thetas[:-1] = d.thetas[1:]
        thetas[-1] = d.thetas[-1]
    return DecisionVector(controls, thetas)


def _inner_thetas(spec: _risk.RiskSpec, ensembles, warm: np.ndarray) -> np.ndarray:
    """Exact per-stage risk parameters for the given stage cost ensembles."""
    out = np.empty_like(warm)
    for k, ens in enumerate(ensembles):
        guess = spec.theta_to_external(warm[k])
        out[k] = spec.theta_from_external(
            _risk.evaluate(spec, ens, theta0=guess).theta_star)
    return out


def _nested_obj_grad(problem: Problem, tree: ScenarioTree, x0: Ensemble,
                     d: DecisionVector, spec: _risk.RiskSpec):
    """Objective and control gradient with thetas held at their inner optima.

    The KL stage term is evaluated in its reduced form
    t1*c + t1*logsumexp(z/t1), whose node weights are the softmax tilt:
    they depend on theta only through t1, which the inner solver pins
    either to a cap or to relative ulp. The psi form would instead weight
    nodes by exp((z - m)/t1), amplifying the last-ulp error of the
    location parameter by 1/t1 and corrupting the control gradient
    whenever a cap binds.
    """
    if spec.kind != "kl_divergence":
        obj, gu, _ = objective_and_gradient(problem, tree, x0, d, spec)
        return obj, gu
    x_roots = _check_x0(tree, x0, problem)

    def stage_eval(k, z, probs):
        t1 = float(np.exp(np.clip(d.thetas[k][0], -_risk.S_CAP, _risk.S_CAP)))
        zmax = float(z.max())
        # expm1/log1p keep full precision at the upper cap, where the
        # direct log would eat eight digits and jitter the line search
        em = np.expm1((z - zmax) / t1)
        e_em = float(probs @ em)
        value = t1 * spec.c + zmax + t1 * float(np.log1p(e_em))
        q = probs * (em + 1.0) / (1.0 + e_em)
        return value, q, np.zeros(spec.theta_dim)

    obj, gu, _ = kernels.pure.eval_objective_and_gradient(
        problem, tree.offsets, tree.path_probs, x_roots, d.controls,
        stage_eval, spec.theta_dim)
    return obj, gu


def solve_ocp(problem: Problem, tree: ScenarioTree, x0: Ensemble, spec: _risk.RiskSpec,
              options: Optional[_opt.SolveOptions] = None,
              warm_start: Optional[DecisionVector] = None,
              fixed_thetas: Optional[np.ndarray] = None):
    """Minimize the tree OCP over (controls, per-stage thetas).

    The stage risk parameters are decision variables, but they are
    handled by nested exact minimization: every control evaluation
    re-solves each stage's inner problem, which zeroes the theta block
    of the gradient, so the control gradient is the gradient of the
    reduced objective. Exposing the thetas to the outer quasi-Newton
    iteration instead stalls for the KL family, whose theta curvature
    spans many orders of magnitude across iterates.

    fixed_thetas (solver coordinates, shape (N, theta_dim)) freezes the
    risk parameters and optimizes controls only. Returns
    (DecisionVector, Rollout, diagnostics); non-convergence is flagged in
    diagnostics rather than raised. diagnostics["grad_inf"] measures the
    control block; the theta block is governed by the inner solver's own
    criterion.

    Controls are optimized in probability-scaled coordinates
    v = u * sqrt(path prob): deep-stage controls enter the objective
    with weights that shrink geometrically in depth, and the rescaling
    flattens that part of the curvature spread, which is what makes
    N >= 11 horizons converge in hundreds rather than tens of thousands
    of iterations. Warm-started fixed-theta solves additionally fold the
    integrand slope psi' at the warm point into the scaling: with frozen
    risk parameters the per-node slope spreads over many orders of
    magnitude, and near the optimum the warm point's slopes are a
    faithful picture of that spread. A cold start's slopes are not
    (the expensive nodes at the default decision are not the expensive
    nodes at the optimum), so cold and adaptive solves keep the plain
    probability scaling.
    """
    options = options or _opt.SolveOptions()
    theta_dim = spec.theta_dim
    optimize_thetas = fixed_thetas is None and theta_dim > 0
    if fixed_thetas is not None:
        fixed_thetas = np.asarray(fixed_thetas, dtype=float).reshape(tree.N, theta_dim)

    d0 = warm_start if warm_start is not None else default_decision(
        problem, tree, x0, spec, fixed_thetas)
    if fixed_thetas is not None:
        d0 = DecisionVector(d0.controls, fixed_thetas)

    # most recent per-stage thetas; nested evaluations warm-start from and
    # then refresh this
    thetas_box = [np.array(d0.thetas, dtype=float)]

    n_inner = int(tree.offsets[tree.N])
    diag = np.maximum(tree.path_probs[:n_inner], 1e-12)
    if (fixed_thetas is not None and warm_start is not None and theta_dim
            and spec.supports_gradient):
        try:
            ro0 = rollout(problem, tree, x0, d0, spec)
            w = np.ones(n_inner)
            for k in range(tree.N):
                z = ro0.stage_cost_ensembles[k].values()
                _, dz, _ = _risk.psi_value_and_derivs(spec, z, d0.thetas[k])
                w[tree.stage_slice(k)] = dz
            diag = diag * np.clip(w, 1e-8, 1e8)
        except (RolloutError, _risk.RiskMinimizationError):
            pass
    scale = np.repeat(1.0 / np.sqrt(diag), problem.control_dim)

    def f_and_grad(v):
        d = DecisionVector.unflatten(v * scale, tree, problem.control_dim,
                                     theta_dim, thetas_box[0])
        if optimize_thetas:
            try:
                ro = rollout(problem, tree, x0, d, spec)
                thetas_box[0] = _inner_thetas(spec, ro.stage_cost_ensembles,
                                              thetas_box[0])
            except (RolloutError, _risk.RiskMinimizationError):
                # unreachable trial point; make the line search back off
                return np.inf, np.zeros_like(v)
            d = DecisionVector(d.controls, thetas_box[0])
            obj, gu = _nested_obj_grad(problem, tree, x0, d, spec)
        else:
            obj, gu, _ = objective_and_gradient(problem, tree, x0, d, spec)
        # trial points far uphill can overflow the rescaled gradient; the
        # line search rejects them on the objective alone
        with np.errstate(over="ignore"):
            return obj, gu.ravel() * scale

    flat0 = d0.flatten(with_thetas=False) / scale
    message = ""
    try:
        res = _opt.minimize(f_and_grad, flat0, options)
        converged = res.converged
        message = res.message
    except _opt.OptimizerError as err:
        res = err.result
        converged = False
        message = str(err)

    d_star = DecisionVector.unflatten(res.x * scale, tree, problem.control_dim,
                                      theta_dim, thetas_box[0])
    if optimize_thetas:
        # the box holds thetas of the last *evaluated* point; resync to the
        # accepted one
        try:
            pre = rollout(problem, tree, x0, d_star, spec)
            d_star = DecisionVector(d_star.controls, _inner_thetas(
                spec, pre.stage_cost_ensembles, thetas_box[0]))
        except (RolloutError, _risk.RiskMinimizationError):
            pass
    ro = rollout(problem, tree, x0, d_star, spec)
    if optimize_thetas:
        _, gu_f = _nested_obj_grad(problem, tree, x0, d_star, spec)
        grad_inf = float(np.max(np.abs(gu_f)))
    else:
        # report the unscaled control gradient, not the optimizer's view
        _, gu_f, _ = objective_and_gradient(problem, tree, x0, d_star, spec)
        grad_inf = float(np.max(np.abs(gu_f)))
    diagnostics = {
        "converged": bool(converged),
        "message": message,
        "iterations": int(res.iterations),
        "n_evals": int(res.n_evals),
        "grad_inf": grad_inf,
        "objective": float(ro.objective),
        "backend": kernels.backend_name(),
        "theta_stages": [spec.theta_to_external(t).tolist() for t in d_star.thetas]
        if theta_dim else [],
    }
    return d_star, ro, diagnostics


def value_decomposition_check(problem: Problem, x0: Ensemble, N: int,
                              spec: Optional[_risk.RiskSpec] = None,
                              options: Optional[_opt.SolveOptions] = None) -> dict:
    """Compare V(mixture) against sum of per-atom values.

    For expectation stage costs the two agree (conditioning on the initial
    atom splits the problem); risk-averse specs may show a genuine gap,
    so the residual is reported, not asserted.
    """
    spec = spec or _risk.expectation()
    noise = problem.noise
    t_mix = build_tree(noise, N, root_probs=x0.probs)
    _, ro_mix, diag = solve_ocp(problem, t_mix, x0, spec, options)
    parts = []
    for i in range(x0.size):
        ti = build_tree(noise, N)
        xi = Ensemble(x0.atoms[i][None, :], np.array([1.0]))
        _, ro_i, _ = solve_ocp(problem, ti, xi, spec, options)
        parts.append((float(x0.probs[i]), ro_i.objective))
    combined = sum(p * v for p, v in parts)
    return {
        "value_mixture": ro_mix.objective,
        "value_combined": combined,
        "parts": parts,
        "residual": abs(ro_mix.objective - combined),
        "converged": diag["converged"],
    }
