"""Pure-numpy scenario-tree engine, vectorized over each depth level.

Works for any Problem (arbitrary dimensions, callable dynamics) and any
smooth stage evaluator. Tree layout contract: nodes of depth k occupy
[offsets[k], offsets[k+1]); the child of the node with relative index j
on noise branch b sits at relative index j*m + b one level down.

This is both the fallback backend and the reference implementation the
compiled kernel is tested against.
"""

from __future__ import annotations

import numpy as np

__all__ = ["rollout_states", "eval_objective_and_gradient"]


def rollout_states(problem, offsets, x_roots, controls) -> np.ndarray:
    """Propagate states through the tree; returns (node_count, state_dim)."""
    N = offsets.size - 2
    m = problem.noise.size
    atoms = problem.noise.atoms
    node_count = int(offsets[-1])
    states = np.empty((node_count, problem.state_dim))
    states[: offsets[1]] = x_roots
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(N):
            lo, hi = int(offsets[k]), int(offsets[k + 1])
            chi = int(offsets[k + 2])
            x = states[lo:hi]
            u = controls[lo:hi]
            for b in range(m):
                states[hi + b:chi:m] = problem.f(x, u, atoms[b])
    return states


def eval_objective_and_gradient(problem, offsets, path_probs, x_roots, controls, stage_eval, theta_dim):
    """Objective and reverse-mode gradient of the tree OCP.

    stage_eval(k, z, probs) -> (value, c, dtheta) where z are the stage
    costs over depth-k nodes, c[i] = probs[i] * dPsi/dz at node i, and
    dtheta is the length-theta_dim stage parameter gradient. Returns
    (objective, grad_controls (inner_count, du), grad_thetas (N, theta_dim)).
    """
    N = offsets.size - 2
    m = problem.noise.size
    atoms = problem.noise.atoms
    states = rollout_states(problem, offsets, x_roots, controls)

    obj = 0.0
    cvec = np.empty(int(offsets[N]))
    grad_thetas = np.zeros((N, theta_dim))
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(N):
            lo, hi = int(offsets[k]), int(offsets[k + 1])
            z = problem.g(states[lo:hi], controls[lo:hi])
            val, c, dth = stage_eval(k, z, path_probs[lo:hi])
            obj += val
            cvec[lo:hi] = c
            grad_thetas[k] = dth

        grad_u = np.empty((int(offsets[N]), problem.control_dim))
        lam = np.zeros((int(offsets[N + 1]) - int(offsets[N]), problem.state_dim))
        for k in range(N - 1, -1, -1):
            lo, hi = int(offsets[k]), int(offsets[k + 1])
            x = states[lo:hi]
            u = controls[lo:hi]
            c = cvec[lo:hi]
            gu = c[:, None] * problem.dg_du(x, u)
            lam_here = c[:, None] * problem.dg_dx(x, u)
            for b in range(m):
                lam_b = lam[b::m]
                gu += np.einsum("nij,ni->nj", problem.df_du(x, u, atoms[b]), lam_b)
                lam_here += np.einsum("nij,ni->nj", problem.df_dx(x, u, atoms[b]), lam_b)
            grad_u[lo:hi] = gu
            lam = lam_here
    return float(obj), grad_u, grad_thetas
