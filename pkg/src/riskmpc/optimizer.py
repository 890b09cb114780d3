"""Smooth unconstrained minimization: limited-memory quasi-Newton and
golden-section line minimization.

Shared by the scenario-tree solver and the inner minimizations of the
parametric risk evaluators. Everything here is deterministic: fixed
summation order, no randomized restarts, so repeated runs produce
bitwise-identical iterate sequences on one platform.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = ["SolveOptions", "MinimizeResult", "OptimizerError", "minimize", "minimize_scalar_convex"]


@dataclass(frozen=True)
class SolveOptions:
    tol_grad_inf: float = 1e-7
    max_iter: int = 2000
    memory: int = 10
    armijo_c1: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 60

    def __post_init__(self):
        if not (self.tol_grad_inf > 0 and self.max_iter > 0 and self.memory > 0):
            raise ValueError("tolerances, iteration cap and memory must be positive")
        if not (0.0 < self.armijo_c1 < 0.5):
            raise ValueError("armijo_c1 must lie in (0, 0.5)")
        if not (0.0 < self.backtrack_factor < 1.0 and self.max_backtracks > 0):
            raise ValueError("invalid line-search parameters")


@dataclass
class MinimizeResult:
    x: np.ndarray
    f: float
    grad_inf: float
    iterations: int
    n_evals: int
    converged: bool
    message: str = ""


class OptimizerError(RuntimeError):
    """Raised on non-finite evaluations or total line-search failure.

    Carries the best iterate found so far in ``result``.
    """

    def __init__(self, message: str, result: MinimizeResult):
        super().__init__(message)
        self.result = result


def _two_loop(g: np.ndarray, hist: Sequence[tuple], gamma: float) -> np.ndarray:
    """Standard L-BFGS two-loop recursion for the search direction -H g."""
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(hist):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    q *= gamma
    for (s, y, rho), a in zip(hist, reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


_STALL_CAP = 1e-4  # relative gradient bound for blessing a rounding-floor exit


def minimize(f_and_grad: Callable, x0, opts: SolveOptions | None = None) -> MinimizeResult:
    """Limited-memory quasi-Newton descent with Armijo backtracking.

    ``f_and_grad(x) -> (f, g)``; a non-finite trial value during the line
    search is treated as a rejected step. Terminates when the gradient
    infinity norm drops to ``opts.tol_grad_inf``; accepted iterates have
    nonincreasing f.

    Near the minimizer of an ill-conditioned objective the attainable
    decrease falls below the rounding of f itself. Steps taken there are
    noise: the update pairs they produce corrupt the curvature history
    and the line search degenerates to dozens of rejected trials per
    iteration. Such steps are therefore excluded from the history, and
    after repeated rounding-level iterations the history is dropped once
    and then the run is declared stationary at floating-point
    resolution, which counts as convergence when the gradient is small
    relative to the objective scale.

    Objectives that are only piecewise smooth (a nested risk value whose
    inner minimizer saturates degenerates to a maximum over scenarios)
    pin the line search at kinks, where the one-piece gradient need not
    vanish at the minimizer, so no gradient test can bless the exit.
    Stalls there are resolved by deterministic two-sided probes along
    the steepest coordinates: if some probe still wins more than a
    sliver of |f| the run restarts from it, and otherwise the point is
    accepted as stationary.
    """
    opts = opts or SolveOptions()
    x = np.array(x0, dtype=float).ravel()
    f, g = f_and_grad(x)
    f = float(f)
    g = np.asarray(g, dtype=float).ravel()
    n_evals = 1
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise OptimizerError(
            "objective or gradient non-finite at the initial point",
            MinimizeResult(x, f, np.inf, 0, n_evals, False),
        )

    hist: list[tuple] = []
    gamma = 1.0 / max(1.0, float(np.max(np.abs(g))))
    c1 = opts.armijo_c1
    eps_f = 4.0 * np.finfo(float).eps
    stalls = 0

    def stall_result(it):
        grad_inf = float(np.max(np.abs(g))) if g.size else 0.0
        ok = grad_inf <= _STALL_CAP * max(1.0, abs(f))
        msg = ("objective stationary at floating-point resolution" if ok
               else f"stalled with grad_inf={grad_inf:.3e}")
        return MinimizeResult(x, f, grad_inf, it, n_evals, ok, msg)

    probes_left = 5

    def kink_exit(it):
        # see the docstring: bless the stall, restart from an improving
        # probe, or give up (None) when the probe budget is spent
        nonlocal x, f, g, gamma, stalls, n_evals, probes_left
        if probes_left <= 0:
            return None
        probes_left -= 1
        idx = np.argsort(-np.abs(g), kind="stable")[:min(8, x.size)]
        best_gain, best = 0.0, None
        for i in idx:
            for sgn in (1.0, -1.0):
                xp = x.copy()
                xp[i] += sgn * 1e-4 * (1.0 + abs(xp[i]))
                fp, gp = f_and_grad(xp)
                fp = float(fp)
                n_evals += 1
                gp = np.asarray(gp, dtype=float).ravel()
                if (np.isfinite(fp) and f - fp > best_gain
                        and np.all(np.isfinite(gp))):
                    best_gain, best = f - fp, (xp, fp, gp)
        if best is None or best_gain <= 1e-9 * max(1.0, abs(f)):
            grad_inf = float(np.max(np.abs(g))) if g.size else 0.0
            return MinimizeResult(
                x, f, grad_inf, it, n_evals, True,
                "stationary at a nonsmooth point (coordinate probes found no descent)")
        x, f, g = best
        hist.clear()
        gamma = 1.0 / max(1.0, float(np.max(np.abs(g))))
        stalls = 0
        return True

    for it in range(opts.max_iter):
        grad_inf = float(np.max(np.abs(g))) if g.size else 0.0
        if grad_inf <= opts.tol_grad_inf:
            return MinimizeResult(x, f, grad_inf, it, n_evals, True)

        d = _two_loop(g, hist, gamma)
        gd = float(g @ d)
        if not np.isfinite(gd) or gd >= 0.0:
            d = -g
            gd = -float(g @ g)

        def backtrack(d, gd):
            nonlocal n_evals
            t = 1.0
            for _ in range(opts.max_backtracks):
                xt = x + t * d
                ft, gt = f_and_grad(xt)
                ft = float(ft)
                n_evals += 1
                if np.isfinite(ft) and ft <= f + c1 * t * gd:
                    gt = np.asarray(gt, dtype=float).ravel()
                    if np.all(np.isfinite(gt)):
                        return xt, ft, gt
                t *= opts.backtrack_factor
            return None

        step = backtrack(d, gd)
        if step is None and gd != -float(g @ g):
            # quasi-Newton direction failed; retry with plain gradient descent
            d = -g
            step = backtrack(d, -float(g @ g))
        if step is None:
            res = stall_result(it)
            if res.converged:
                return res
            out = kink_exit(it)
            if isinstance(out, MinimizeResult):
                return out
            if out:
                continue
            raise OptimizerError(
                f"line search failed at iteration {it} (grad_inf={grad_inf:.3e})",
                MinimizeResult(x, f, grad_inf, it, n_evals, False),
            )

        xt, ft, gt = step
        real_decrease = (f - float(ft)) > eps_f * max(1.0, abs(f))
        s = xt - x
        y = gt - g
        sy = float(s @ y)
        if real_decrease and sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            hist.append((s, y, 1.0 / sy))
            if len(hist) > opts.memory:
                hist.pop(0)
            gamma = sy / float(y @ y)
        x, f, g = xt, ft, gt
        if real_decrease:
            stalls = 0
        else:
            stalls += 1
            if stalls == 2:
                hist.clear()
                gamma = 1.0 / max(1.0, float(np.max(np.abs(g))))
            elif stalls >= 4:
                res = stall_result(it + 1)
                if res.converged:
                    return res
                out = kink_exit(it + 1)
                if isinstance(out, MinimizeResult):
                    return out
                if out:
                    continue
                raise OptimizerError(res.message,
                                     MinimizeResult(x, f, res.grad_inf, it + 1,
                                                    n_evals, False))

    grad_inf = float(np.max(np.abs(g))) if g.size else 0.0
    return MinimizeResult(x, f, grad_inf, opts.max_iter, n_evals, False, "max_iter exhausted")


_INVPHI = (np.sqrt(5.0) - 1.0) / 2.0


def minimize_scalar_convex(g: Callable[[float], float], bracket: tuple, tol: float = 1e-12):
    """Golden-section search on a unimodal function over ``bracket``.

    Shrinks the interval to width ``tol``; unimodality is the caller's
    contract. Returns (argmin, value).
    """
    lo, hi = float(bracket[0]), float(bracket[1])
    if hi < lo:
        lo, hi = hi, lo
    a, b = lo, hi
    x1 = b - _INVPHI * (b - a)
    x2 = a + _INVPHI * (b - a)
    f1, f2 = g(x1), g(x2)
    while b - a > tol:
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _INVPHI * (b - a)
            f1 = g(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _INVPHI * (b - a)
            f2 = g(x2)
    t = 0.5 * (a + b)
    return t, float(g(t))
