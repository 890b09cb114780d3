"""Receding-horizon control loops built on the scenario-tree solver.

Three controllers share one feedback map: solve the N-step tree problem
from the current state and apply the root control. They differ in what
"current state" means and in which objective the tree solve carries:

* ``abstract``      propagates the full state distribution; every atom of
                    the current law gets its own feedback solve. Exact
                    because the noise has finite support.
* ``implementable`` simulates sample paths and solves from the realized
                    state of each path at each step.
* ``fixed_theta``   like ``implementable``, but the tree objective keeps
                    the risk parameters frozen at a supplied value, so the
                    controller prices risk with a stationary certificate
                    instead of re-optimizing it online.

Closed-loop noise comes from counter-based streams keyed by
(seed, path, step): the draw for path i at step j never depends on how
many paths or steps the run requests, which makes common-random-number
comparisons across horizons and risk parameters exact.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import risk as _risk
from . import tree as _tree
from .ensemble import Ensemble, dedup
from .sysmodel import Problem

__all__ = [
    "MpcConfig",
    "MpcTrace",
    "ExactPropagation",
    "MpcError",
    "AtomCapError",
    "feedback",
    "run_closed_loop",
    "run_exact_propagation",
    "performance_sweep",
]

_ALGORITHMS = ("abstract", "implementable", "fixed_theta")


class MpcError(RuntimeError):
    """Closed-loop run aborted; the message names the step and path."""


class AtomCapError(MpcError):
    """Exact propagation outgrew the configured support cap."""


@dataclass(frozen=True)
class MpcConfig:
    """Closed-loop experiment description.

    eval_spec is the risk used for performance reporting, the "original
    cost" the controller is judged by; when omitted the controller's own
    spec is used. fixed_theta holds natural-coordinate risk parameters
    and is required exactly when algorithm is "fixed_theta".
    exact_atom_cap bounds the support size run_exact_propagation may
    build before giving up.
    """

    algorithm: str
    horizon: int
    steps: int
    spec: _risk.RiskSpec
    eval_spec: Optional[_risk.RiskSpec] = None
    fixed_theta: Optional[tuple] = None
    mc_paths: int = 200
    seed: int = 0
    warm_start: bool = True
    exact_atom_cap: int = 20000
    options: object = None

    def __post_init__(self):
        if self.algorithm not in _ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if min(self.horizon, self.steps, self.mc_paths) < 1:
            raise ValueError("horizon, steps and mc_paths must be positive")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if self.exact_atom_cap < 1:
            raise ValueError("exact_atom_cap must be positive")
        if self.algorithm == "fixed_theta":
            if self.fixed_theta is None:
                raise ValueError('algorithm "fixed_theta" requires fixed_theta')
            if self.spec.theta_dim < 1:
                raise ValueError("fixed_theta needs a parametric risk measure")
            th = np.asarray(self.fixed_theta, dtype=float).ravel()
            self.spec.theta_from_external(th)  # validates length and domain
            object.__setattr__(self, "fixed_theta", tuple(float(v) for v in th))
        elif self.fixed_theta is not None:
            raise ValueError('fixed_theta is only used by algorithm "fixed_theta"')

    @property
    def reporting_spec(self) -> _risk.RiskSpec:
        return self.eval_spec if self.eval_spec is not None else self.spec


class _FeedbackSolver:
    """Tree solves behind the feedback map, with per-step memoization.

    States that coincide bitwise within one step share a single solve;
    the memo is cleared between steps so it never outlives the states it
    indexes. A warm start that stalls the line search is retried cold
    before the failure is reported.

    Fixed-parameter solves with no warm start run the adaptive problem
    at the same state first and continue from its controls. Frozen risk
    parameters make the landscape stiff enough that a cold start can
    burn tens of thousands of iterations (or fail outright) on cases
    the continuation finishes in a few hundred.
    """

    def __init__(self, problem: Problem, spec: _risk.RiskSpec, horizon: int,
                 options=None, fixed_theta=None):
        self.problem = problem
        self.spec = spec
        self.tree = _tree.build_tree(problem.noise, horizon)
        self.options = options
        if fixed_theta is not None:
            th = spec.theta_from_external(np.asarray(fixed_theta, dtype=float))
            self.fixed_thetas = np.tile(th, (horizon, 1))
        else:
            self.fixed_thetas = None
        self.memo: dict = {}
        self.n_solves = 0
        self.n_memo_hits = 0

    def begin_step(self):
        self.memo.clear()

    def solve(self, x, warm=None, context: str = "feedback") -> _tree.DecisionVector:
        key = np.asarray(x, dtype=float).tobytes()
        hit = self.memo.get(key)
        if hit is not None:
            self.n_memo_hits += 1
            return hit
        if callable(warm):
            warm = warm()  # built lazily so memo hits skip the work
        x0 = Ensemble.point(x)
        try:
            continued = False
            if warm is None and self._wants_continuation():
                warm = self._continuation_warm(x0)
                continued = warm is not None
            self.n_solves += 1
            d, ro, diag = _tree.solve_ocp(self.problem, self.tree, x0, self.spec,
                                          options=self.options, warm_start=warm,
                                          fixed_thetas=self.fixed_thetas)
            if not diag["converged"] and warm is not None:
                retry = None
                if not continued and self._wants_continuation():
                    retry = self._continuation_warm(x0)
                self.n_solves += 1
                d, ro, diag = _tree.solve_ocp(self.problem, self.tree, x0, self.spec,
                                              options=self.options, warm_start=retry,
                                              fixed_thetas=self.fixed_thetas)
        except (_tree.RolloutError, _risk.RiskMinimizationError) as err:
            # states far outside the evaluable range overflow every rollout;
            # surface that as a controller failure, not an internal one
            raise MpcError(f"feedback solve failed ({context}): {err}") from err
        if not diag["converged"]:
            raise MpcError(f"feedback solve did not converge ({context}): "
                           f"{diag['message']}")
        self.memo[key] = d
        return d

    def _wants_continuation(self) -> bool:
        return self.fixed_thetas is not None and self.spec.theta_dim > 0

    def _continuation_warm(self, x0):
        self.n_solves += 1
        d, _, diag = _tree.solve_ocp(self.problem, self.tree, x0, self.spec,
                                     options=self.options)
        if not diag["converged"]:
            return None
        return _tree.DecisionVector(d.controls, self.fixed_thetas)


def feedback(problem: Problem, spec: _risk.RiskSpec, horizon: int, x,
             fixed_theta=None, options=None) -> np.ndarray:
    """One application of the receding-horizon feedback map.

    Solves the horizon-step tree problem from the point state x and
    returns the root control. fixed_theta (natural coordinates) freezes
    the stage risk parameters, which is the fixed_theta controller's law.
    """
    solver = _FeedbackSolver(problem, spec, horizon, options, fixed_theta)
    d = solver.solve(np.atleast_1d(np.asarray(x, dtype=float)))
    return d.controls[0].copy()


@dataclass
class MpcTrace:
    """Simulated closed loop: per-path trajectories plus per-step costs.

    states has shape (M, K+1, state_dim); controls, noises and branches
    cover the K applied steps. stage_costs_eval[j] is the reporting risk
    of the empirical stage cost ensemble at step j; stage_costs_theta[j]
    is the frozen-parameter stage cost, NaN unless the controller ran
    with fixed risk parameters. j_cl sums the per-step costs, j_avg
    divides by the step count, and j_avg_batches holds the same average
    over path batches for standard-error estimates;
    stage_costs_batches (batches, K) carries the per-batch stage costs
    behind it.
    """

    states: np.ndarray
    controls: np.ndarray
    noises: np.ndarray
    branches: np.ndarray
    stage_ensembles: list
    stage_costs_eval: np.ndarray
    stage_costs_theta: np.ndarray
    j_cl: float
    j_avg: float
    j_avg_batches: np.ndarray
    stage_costs_batches: np.ndarray
    n_solves: int
    n_memo_hits: int
    config: MpcConfig


def _noise_index(seed: int, path: int, step: int, cum: np.ndarray) -> int:
    """Branch index for (path, step) from a counter-based stream.

    A Philox generator keyed by the seed with (step, path) as the block
    counter; one uniform consumes one block, so the draw is a pure
    function of the triple.
    """
    bg = np.random.Philox(key=np.uint64(seed),
                          counter=np.array([step, path, 0, 0], dtype=np.uint64))
    u = np.random.Generator(bg).random()
    return min(int(np.searchsorted(cum, u, side="right")), cum.size - 1)


def _check_x0(problem: Problem, x0) -> np.ndarray:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (problem.state_dim,):
        raise ValueError(f"x0 must have shape ({problem.state_dim},)")
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be finite")
    return x0


def run_closed_loop(problem: Problem, cfg: MpcConfig, x0) -> MpcTrace:
    """Simulate the receding-horizon controller along Monte Carlo paths.

    Each path carries its own noise stream and, when cfg.warm_start is
    set, warm-starts every solve from its previous decision shifted one
    step down the realized branch. Per-step stage costs are the
    reporting risk of the empirical cost ensemble across paths (weights
    1/M). Solver failures raise MpcError naming the step and path.
    """
    if cfg.algorithm == "abstract":
        raise MpcError("the abstract controller propagates distributions; "
                       "use run_exact_propagation")
    x0 = _check_x0(problem, x0)
    M, K = cfg.mc_paths, cfg.steps
    solver = _FeedbackSolver(problem, cfg.spec, cfg.horizon, cfg.options,
                             cfg.fixed_theta)
    eval_spec = cfg.reporting_spec
    atoms = problem.noise.atoms
    cum = np.cumsum(problem.noise.probs)
    theta_ext = None
    if cfg.fixed_theta is not None:
        theta_ext = np.asarray(cfg.fixed_theta, dtype=float)

    states = np.empty((M, K + 1, problem.state_dim))
    controls = np.empty((M, K, problem.control_dim))
    noises = np.empty((M, K, problem.noise_dim))
    branches = np.empty((M, K), dtype=np.int64)
    states[:, 0] = x0
    prev = [None] * M  # last decision per path, feeds the warm start

    stage_ensembles = []
    costs_eval = np.empty(K)
    costs_theta = np.full(K, np.nan)
    nb = min(10, M)
    batch_idx = np.array_split(np.arange(M), nb)
    batch_costs = np.empty((nb, K))

    for j in range(K):
        solver.begin_step()
        for i in range(M):
            warm = None
            if cfg.warm_start and prev[i] is not None:
                warm = (lambda i=i, j=j: _tree.shift_decision(
                    prev[i], solver.tree, int(branches[i, j - 1])))
            d = solver.solve(states[i, j], warm=warm,
                             context=f"step {j}, path {i}")
            prev[i] = d
            controls[i, j] = d.controls[0]

        z = np.asarray(problem.g(states[:, j], controls[:, j]),
                       dtype=float).reshape(M)
        ens = Ensemble(z[:, None], np.full(M, 1.0 / M))
        stage_ensembles.append(ens)
        costs_eval[j] = _risk.evaluate(eval_spec, ens).value
        if theta_ext is not None:
            costs_theta[j] = float(np.mean(_risk.psi(cfg.spec, z, theta_ext)))
        for b, idx in enumerate(batch_idx):
            sub = Ensemble(z[idx][:, None], np.full(idx.size, 1.0 / idx.size))
            batch_costs[b, j] = _risk.evaluate(eval_spec, sub).value

        for i in range(M):
            branches[i, j] = _noise_index(cfg.seed, i, j, cum)
        noises[:, j] = atoms[branches[:, j]]
        for b in np.unique(branches[:, j]):
            mask = branches[:, j] == b
            states[mask, j + 1] = problem.f(states[mask, j], controls[mask, j],
                                            atoms[b])
        if not np.all(np.isfinite(states[:, j + 1])):
            raise MpcError(f"closed-loop state diverged at step {j}")

    j_cl = float(costs_eval.sum())
    return MpcTrace(states, controls, noises, branches, stage_ensembles,
                    costs_eval, costs_theta, j_cl, j_cl / K,
                    batch_costs.sum(axis=1) / K, batch_costs,
                    solver.n_solves, solver.n_memo_hits, cfg)


@dataclass
class ExactPropagation:
    """Distribution-level closed loop; exact under finite-support noise.

    state_ensembles[j] is the closed-loop state law entering step j
    (steps + 1 entries, the last one terminal); stage_ensembles[j] the
    exact stage cost law, whose reporting risk is stage_costs_eval[j].
    """

    state_ensembles: list
    stage_ensembles: list
    stage_costs_eval: np.ndarray
    stage_costs_theta: np.ndarray
    j_cl: float
    j_avg: float
    atom_counts: np.ndarray
    n_solves: int
    n_memo_hits: int
    config: MpcConfig


def run_exact_propagation(problem: Problem, cfg: MpcConfig, x0,
                          dedup_tol: float = 1e-9) -> ExactPropagation:
    """Propagate the closed-loop state law exactly through the feedback map.

    Every atom of the current law gets its own feedback solve, each noise
    branch spawns a child with multiplied probability, and children within
    dedup_tol of each other merge. The per-step cost is the reporting risk
    of the exact stage cost law, so for an expectation reporting spec the
    result is the infinite-sample limit of run_closed_loop. Raises
    MpcError once the support outgrows cfg.exact_atom_cap; Monte Carlo
    simulation via run_closed_loop is the fallback then.
    """
    x0 = _check_x0(problem, x0)
    K = cfg.steps
    solver = _FeedbackSolver(problem, cfg.spec, cfg.horizon, cfg.options,
                             cfg.fixed_theta)
    eval_spec = cfg.reporting_spec
    theta_ext = None
    if cfg.fixed_theta is not None:
        theta_ext = np.asarray(cfg.fixed_theta, dtype=float)

    law = Ensemble.point(x0)
    state_ensembles = [law]
    stage_ensembles = []
    costs_eval = np.empty(K)
    costs_theta = np.full(K, np.nan)
    atom_counts = np.empty(K, dtype=np.int64)

    for j in range(K):
        solver.begin_step()
        n = law.size
        atom_counts[j] = n
        u = np.empty((n, problem.control_dim))
        for a in range(n):
            d = solver.solve(law.atoms[a], context=f"step {j}, atom {a}")
            u[a] = d.controls[0]

        z = np.asarray(problem.g(law.atoms, u), dtype=float).reshape(n)
        ens = Ensemble(z[:, None], law.probs)
        stage_ensembles.append(ens)
        costs_eval[j] = _risk.evaluate(eval_spec, ens).value
        if theta_ext is not None:
            costs_theta[j] = float(law.probs @ _risk.psi(cfg.spec, z, theta_ext))

        kids = [np.asarray(problem.f(law.atoms, u, w), dtype=float)
                    .reshape(n, problem.state_dim)
                for w in problem.noise.atoms]
        probs = np.concatenate([law.probs * pw for pw in problem.noise.probs])
        law = dedup(Ensemble(np.vstack(kids), probs), tol=dedup_tol)
        if law.size > cfg.exact_atom_cap:
            raise AtomCapError(
                f"exact propagation support reached {law.size} atoms at step "
                f"{j + 1}, over the cap of {cfg.exact_atom_cap}; use "
                "run_closed_loop (Monte Carlo) for this configuration")
        if not np.all(np.isfinite(law.atoms)):
            raise MpcError(f"closed-loop state diverged at step {j}")
        state_ensembles.append(law)

    j_cl = float(costs_eval.sum())
    return ExactPropagation(state_ensembles, stage_ensembles, costs_eval,
                            costs_theta, j_cl, j_cl / K, atom_counts,
                            solver.n_solves, solver.n_memo_hits, cfg)


def performance_sweep(problem: Problem, base_cfg: MpcConfig, x0, horizons,
                      thetas=None, stationary_cost=None) -> list:
    """Closed-loop cost table over horizons and frozen risk parameters.

    Every cell reruns the simulation with the base seed, so the noise is
    common across cells (the counter-based streams make this exact) and
    cost differences are attributable to the controller alone. Entries
    of thetas are natural-coordinate parameter vectors handed to the
    fixed_theta controller; a None entry keeps the base algorithm. Each
    row carries the batch standard error of j_avg and echoes
    stationary_cost, the long-run stage cost of the stationary pair,
    when the caller supplies it.
    """
    theta_cells = list(thetas) if thetas is not None else [None]
    rows = []
    for N in horizons:
        for th in theta_cells:
            if th is None:
                cfg = replace(base_cfg, horizon=int(N))
            else:
                cfg = replace(base_cfg, algorithm="fixed_theta",
                              horizon=int(N), fixed_theta=tuple(
                                  float(v) for v in np.asarray(th).ravel()))
            trace = run_closed_loop(problem, cfg, x0)
            nb = trace.j_avg_batches.size
            stderr = float("nan")
            if nb > 1:
                stderr = float(np.std(trace.j_avg_batches, ddof=1)
                               / np.sqrt(nb))
            rows.append({
                "algorithm": cfg.algorithm,
                "horizon": int(N),
                "theta": None if th is None else tuple(
                    float(v) for v in np.asarray(th).ravel()),
                "j_avg": float(trace.j_avg),
                "j_cl": float(trace.j_cl),
                "stderr": stderr,
                "stationary_cost": None if stationary_cost is None
                                   else float(stationary_cost),
            })
    return rows
