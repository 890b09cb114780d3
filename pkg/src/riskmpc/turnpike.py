"""Stationary-pair estimation and turnpike diagnostics.

Long-horizon solutions of the tree OCP hug a stationary regime through
the middle of the horizon: the per-stage state and control marginals,
the stage cost, and (for parametric risk measures) the per-stage risk
parameters all flatten out before the trajectory peels off toward the
cheap terminal behavior. The stationary pair and its optimal parameter
are not available in closed form, so this module estimates them from
the mid-horizon stages of one long solve and then measures, for a list
of horizons, how fast the optimal trajectories approach and leave that
estimate.

Distances between stage marginals and the reference are reported as
scalar Wasserstein distances (monotone coupling) plus the difference of
r-th absolute moments. Stage marginals are law objects, so the curves
are invariant under reordering the noise atoms.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import risk as _risk
from . import tree as _tree
from .ensemble import Ensemble, dedup, moment_distance, wasserstein_1d
from .sysmodel import Problem

__all__ = [
    "StationaryEstimate",
    "TurnpikeError",
    "estimate_stationary",
    "turnpike_curves",
    "trajectory_bundle",
    "exceedance_profile",
]

# merge tolerance for mid-horizon marginals; distinct scenario nodes that
# carry numerically identical states collapse to one atom
_DEDUP_TOL = 1e-9


class TurnpikeError(RuntimeError):
    """A diagnostic solve failed to converge."""


@dataclass
class StationaryEstimate:
    """Mid-horizon snapshot standing in for the stationary pair.

    x_dist and u_dist are the dedup'd state and control marginals at the
    reference stage, stage_cost the risk value of the stage cost there,
    and theta_s the per-stage optimal risk parameter in natural
    coordinates (empty for non-parametric specs). horizon and stage
    record where the snapshot was taken so it can be reproduced.
    """

    x_dist: Ensemble
    u_dist: Ensemble
    stage_cost: float
    theta_s: np.ndarray
    horizon: int
    stage: int


def _initial(x0) -> Ensemble:
    return x0 if isinstance(x0, Ensemble) else Ensemble.point(x0)


def _solved_tree(problem: Problem, spec, N: int, e0: Ensemble, options, what: str):
    root_probs = e0.probs if e0.size > 1 else None
    tree = _tree.build_tree(problem.noise, N, root_probs=root_probs)
    d, ro, diag = _tree.solve_ocp(problem, tree, e0, spec, options=options)
    if not diag["converged"]:
        raise TurnpikeError(f"{what} solve (N={N}) did not converge: {diag['message']}")
    return tree, d, ro, diag


def estimate_stationary(problem: Problem, spec, N_long: int, x0,
                        stage: Optional[int] = None, options=None) -> StationaryEstimate:
    """Estimate the stationary pair from the middle of a long horizon.

    Solves the N_long tree problem from x0 (a state vector, or an
    Ensemble of initial atoms) and reads off the marginals, stage cost
    and risk parameter at stage N_long // 2. A different reference stage
    can be forced with ``stage``, e.g. to check that adjacent stages
    give the same answer.
    """
    if N_long < 5:
        raise ValueError("N_long must be at least 5")
    k = N_long // 2 if stage is None else int(stage)
    if not 0 <= k < N_long:
        raise ValueError(f"stage must lie in 0..{N_long - 1}")
    e0 = _initial(x0)
    tree, d, ro, diag = _solved_tree(problem, spec, N_long, e0, options,
                                     "stationary estimate")
    sl = tree.stage_slice(k)
    x_dist = dedup(Ensemble(ro.states[sl], tree.path_probs[sl]), tol=_DEDUP_TOL)
    u_dist = dedup(Ensemble(d.controls[sl], tree.path_probs[sl]), tol=_DEDUP_TOL)
    if spec.theta_dim:
        theta_s = np.asarray(diag["theta_stages"][k], dtype=float)
    else:
        theta_s = np.zeros(0)
    return StationaryEstimate(x_dist, u_dist, float(ro.stage_values[k]),
                              theta_s, N_long, k)


def turnpike_curves(problem: Problem, spec, N_list, x0, ref: StationaryEstimate,
                    r: float = 2.0, options=None, jobs: int = 1) -> list:
    """Per-stage distances to the stationary estimate for each horizon.

    For each N in N_list the tree problem is solved from x0 and every
    stage state marginal (including the terminal one) is compared to
    ref.x_dist. Rows are dicts with keys N, k, d_wasserstein, d_moment,
    theta (natural coordinates, NaN at the terminal stage), stage_cost
    (NaN at the terminal stage) and the support envelope state_min /
    state_max, ordered by N_list and then by stage.

    Horizons are independent solves; jobs > 1 runs them on a thread
    pool. Output order does not depend on jobs.
    """
    if problem.state_dim != 1:
        raise ValueError("turnpike distances are defined for scalar state marginals")
    e0 = _initial(x0)
    theta_dim = spec.theta_dim
    nan_theta = tuple([float("nan")] * theta_dim)

    def one(N: int) -> list:
        tree, d, ro, diag = _solved_tree(problem, spec, int(N), e0, options,
                                         "turnpike")
        rows = []
        for k in range(N + 1):
            sl = tree.stage_slice(k)
            marg = Ensemble(ro.states[sl], tree.path_probs[sl])
            if k < N:
                theta = (tuple(float(v) for v in diag["theta_stages"][k])
                         if theta_dim else ())
                cost = float(ro.stage_values[k])
            else:
                theta, cost = nan_theta, float("nan")
            rows.append({
                "N": int(N),
                "k": k,
                "d_wasserstein": wasserstein_1d(marg, ref.x_dist, r),
                "d_moment": moment_distance(marg, ref.x_dist, r),
                "theta": theta,
                "stage_cost": cost,
                "state_min": float(marg.atoms.min()),
                "state_max": float(marg.atoms.max()),
            })
        return rows

    ns = [int(N) for N in N_list]
    if jobs > 1 and len(ns) > 1:
        with ThreadPoolExecutor(max_workers=min(jobs, len(ns))) as pool:
            chunks = list(pool.map(one, ns))
    else:
        chunks = [one(N) for N in ns]
    return [row for chunk in chunks for row in chunk]


def trajectory_bundle(problem: Problem, spec, N: int, x0, options=None) -> list:
    """Every root-to-leaf path of the horizon-N optimum, for fan plots.

    Rows are dicts {path, prob, k, state, control}, ordered by path and
    then stage; control is NaN at the terminal stage since no decision
    is attached to leaves. Scalar problems only, like the distance
    curves.
    """
    if problem.state_dim != 1 or problem.control_dim != 1:
        raise ValueError("trajectory bundles are defined for scalar problems")
    e0 = _initial(x0)
    tree, d, ro, diag = _solved_tree(problem, spec, int(N), e0, options,
                                     "turnpike")
    rows = []
    first_leaf = int(tree.offsets[N])
    for pi, leaf in enumerate(range(first_leaf, int(tree.offsets[N + 1]))):
        chain = []
        node = leaf
        while node >= 0:
            chain.append(node)
            node = int(tree.parent[node])
        chain.reverse()
        prob = float(tree.path_probs[leaf])
        for k, node in enumerate(chain):
            rows.append({
                "path": pi,
                "prob": prob,
                "k": k,
                "state": float(ro.states[node, 0]),
                "control": float(d.controls[node, 0]) if k < N else float("nan"),
            })
    return rows


def exceedance_profile(distances, thresholds) -> list:
    """Count how many stages exceed each threshold.

    Returns, aligned with thresholds, #{k : d_k > eps} -- the empirical
    profile of the exceptional set allowed by the turnpike property.
    """
    d = np.asarray(list(distances), dtype=float)
    return [int(np.count_nonzero(d > float(eps))) for eps in thresholds]
