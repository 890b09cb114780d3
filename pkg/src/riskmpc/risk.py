"""Risk measures on finite scalar ensembles.

Four families are provided: plain expectation, exact averaged value-at-risk
(sort-based, no smoothing), a softplus smoothing of AV@R suitable for
gradient-based solvers, and the KL-divergence risk with a two-dimensional
parameter. A fifth hook accepts custom one-parameter forms
Psi(z, theta) = theta + psi(z - theta).

The parametric families evaluate as rho(Z) = inf_theta E[Psi(Z, theta)];
the minimizing theta is reported with the value because downstream layers
reuse it (fixed-theta stage costs, turnpike diagnostics, warm starts).

Coordinates: public interfaces use natural parameters (for KL that is
(theta1, theta2) with theta1 > 0). Solver-facing routines reparameterize
theta1 = exp(s) with s clipped to [-S_CAP, S_CAP]; the clip sits inside
the evaluation, so a capped coordinate contributes zero gradient and the
unconstrained optimizer settles cleanly on boundary infima.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import optimizer as _opt
from .ensemble import Ensemble

__all__ = [
    "S_CAP",
    "RiskSpec",
    "RiskValue",
    "RiskMinimizationError",
    "expectation",
    "avar_exact",
    "avar_softplus",
    "kl_divergence",
    "custom_psi",
    "psi",
    "psi_value_and_derivs",
    "evaluate",
    "inner_minimize",
    "kl_reduced",
]

# cap on s = log(theta1); theta1 ranges over [e^-20, e^20]
S_CAP = 20.0
# scalar-theta searches stay inside [-1e6, 1e6]
_BRACKET_CAP = 1e6

_THETA_DIMS = {
    "expectation": 0,
    "avar_exact": 0,
    "avar_softplus": 1,
    "kl_divergence": 2,
    "custom_psi": 1,
}


@dataclass(frozen=True)
class RiskSpec:
    """Which risk measure to apply, with its parameters.

    kind is one of expectation | avar_exact | avar_softplus | kl_divergence
    | custom_psi. alpha is the AV@R confidence level in (0, 1]; c the KL
    constraint radius (c >= 0). Custom forms supply psi_fn and its
    derivative psi_prime_fn, both vectorized over numpy arrays.
    """

    kind: str
    alpha: Optional[float] = None
    c: Optional[float] = None
    psi_fn: Optional[Callable] = None
    psi_prime_fn: Optional[Callable] = None

    def __post_init__(self):
        if self.kind not in _THETA_DIMS:
            raise ValueError(f"unknown risk kind {self.kind!r}")
        if self.kind in ("avar_exact", "avar_softplus"):
            if self.alpha is None or not (0.0 < self.alpha <= 1.0):
                raise ValueError("alpha must lie in (0, 1]")
        if self.kind == "kl_divergence":
            if self.c is None or not (self.c >= 0.0):
                raise ValueError("c must be a nonnegative real")
        if self.kind == "custom_psi":
            if self.psi_fn is None or self.psi_prime_fn is None:
                raise ValueError("custom_psi requires psi_fn and psi_prime_fn")

    @property
    def theta_dim(self) -> int:
        return _THETA_DIMS[self.kind]

    @property
    def supports_gradient(self) -> bool:
        """Whether Psi is differentiable (exact AV@R is not)."""
        return self.kind != "avar_exact"

    def theta_to_external(self, theta) -> np.ndarray:
        """Solver coordinates -> natural parameters."""
        theta = np.asarray(theta, dtype=float).ravel()
        if self.kind == "kl_divergence":
            s = float(np.clip(theta[0], -S_CAP, S_CAP))
            return np.array([np.exp(s), theta[1]])
        return theta.copy()

    def theta_from_external(self, theta) -> np.ndarray:
        """Natural parameters -> solver coordinates."""
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.size != self.theta_dim:
            raise ValueError(f"theta must have {self.theta_dim} components")
        if self.kind == "kl_divergence":
            if not theta[0] > 0.0:
                raise ValueError("theta1 must be positive")
            s = float(np.clip(np.log(theta[0]), -S_CAP, S_CAP))
            return np.array([s, theta[1]])
        return theta.copy()


def expectation() -> RiskSpec:
    return RiskSpec("expectation")


def avar_exact(alpha: float) -> RiskSpec:
    return RiskSpec("avar_exact", alpha=alpha)


def avar_softplus(alpha: float) -> RiskSpec:
    return RiskSpec("avar_softplus", alpha=alpha)


def kl_divergence(c: float) -> RiskSpec:
    return RiskSpec("kl_divergence", c=c)


def custom_psi(psi_fn: Callable, psi_prime_fn: Callable) -> RiskSpec:
    return RiskSpec("custom_psi", psi_fn=psi_fn, psi_prime_fn=psi_prime_fn)


@dataclass
class RiskValue:
    """Result of one risk evaluation.

    theta_star is in natural coordinates; for avar_exact it carries the
    quantile (smallest minimizer of the parametric form) as a diagnostic.
    """

    value: float
    theta_star: np.ndarray
    inner_iterations: int = 0


class RiskMinimizationError(RuntimeError):
    """Inner minimization failed; ``best`` holds the best iterate found."""

    def __init__(self, message: str, best: RiskValue):
        super().__init__(message)
        self.best = best


def _expit(w: np.ndarray) -> np.ndarray:
    # stable logistic: never exponentiates a positive argument
    out = np.empty_like(w)
    pos = w >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-w[pos]))
    ew = np.exp(w[~pos])
    out[~pos] = ew / (1.0 + ew)
    return out


def _scalar_support(z: Ensemble):
    if not isinstance(z, Ensemble):
        raise TypeError("risk evaluation expects an Ensemble")
    return z.values(), z.probs


def psi(spec: RiskSpec, z, theta) -> np.ndarray:
    """The integrand Psi(z, theta) in natural coordinates, vectorized in z.

    Overflow-safe: the softplus branch is evaluated via logaddexp, which
    switches to w + log1p(e^-w) for large w.
    """
    zz = np.asarray(z, dtype=float)
    th = np.asarray(theta, dtype=float).ravel()
    if th.size != spec.theta_dim:
        raise ValueError(f"theta must have {spec.theta_dim} components")
    if spec.kind == "expectation":
        out = zz + 0.0
    elif spec.kind == "avar_softplus":
        out = th[0] + np.logaddexp(0.0, zz - th[0]) / spec.alpha
    elif spec.kind == "kl_divergence":
        t1, t2 = th
        if not t1 > 0.0:
            raise ValueError("theta1 must be positive")
        # expm1 keeps t1*(e^w - 1) exact when t1 is huge and w tiny
        with np.errstate(over="ignore"):
            out = t1 * spec.c + t2 + t1 * np.expm1((zz - t2) / t1)
    elif spec.kind == "custom_psi":
        out = th[0] + np.asarray(spec.psi_fn(zz - th[0]), dtype=float)
    else:
        raise ValueError("avar_exact has no parametric integrand; "
                         "wrap max{0,.}/alpha in custom_psi instead")
    return float(out) if out.ndim == 0 else out


def psi_value_and_derivs(spec: RiskSpec, z: np.ndarray, theta: np.ndarray):
    """Psi and its first derivatives at each z, in solver coordinates.

    Returns (psi, dpsi_dz, dpsi_dtheta) with dpsi_dtheta shaped
    (theta_dim, len(z)). For KL the coordinates are (s, m) with
    theta1 = exp(clip(s)); where the clip binds, d/ds is exactly zero.
    """
    zz = np.asarray(z, dtype=float).ravel()
    th = np.asarray(theta, dtype=float).ravel()
    n = zz.size
    if spec.kind == "expectation":
        return zz + 0.0, np.ones(n), np.zeros((0, n))
    if spec.kind == "avar_softplus":
        w = zz - th[0]
        sig = _expit(w)
        val = th[0] + np.logaddexp(0.0, w) / spec.alpha
        dz = sig / spec.alpha
        return val, dz, (1.0 - dz)[None, :]
    if spec.kind == "kl_divergence":
        s, m = th
        sc = float(np.clip(s, -S_CAP, S_CAP))
        t1 = np.exp(sc)
        w = (zz - m) / t1
        with np.errstate(over="ignore", invalid="ignore"):
            em = np.expm1(w)
            val = t1 * spec.c + m + t1 * em
            dz = em + 1.0
            dm = -em
            if -S_CAP < s < S_CAP:
                ds = t1 * (spec.c + em - w * (em + 1.0))
            else:
                ds = np.zeros(n)
        return val, dz, np.stack([ds, dm])
    if spec.kind == "custom_psi":
        w = zz - th[0]
        pv = np.asarray(spec.psi_fn(w), dtype=float)
        pp = np.asarray(spec.psi_prime_fn(w), dtype=float)
        return th[0] + pv, pp, (1.0 - pp)[None, :]
    raise ValueError(f"{spec.kind} is not differentiable; use the exact evaluator")


def _avar_sorted(z: np.ndarray, probs: np.ndarray, alpha: float):
    """Exact AV@R by sorting: mean of the worst alpha-tail.

    Returns (value, quantile) where the quantile is the smallest
    minimizer of theta + E[max(0, Z - theta)]/alpha.
    """
    order = np.argsort(-z, kind="stable")
    zs = z[order]
    ps = probs[order]
    cum = np.cumsum(ps)
    k = int(np.searchsorted(cum, alpha, side="left"))
    k = min(k, zs.size - 1)
    mass_before = cum[k - 1] if k > 0 else 0.0
    acc = float(ps[:k] @ zs[:k]) + (alpha - mass_before) * zs[k]
    value = acc / alpha

    # smallest t with P(Z > t) <= alpha; the survival function only
    # drops at atom values, so the infimum is attained at one of them
    asc = np.sort(np.unique(z))
    for v in asc:
        if float(probs[z > v].sum()) <= alpha + 1e-15:
            return value, float(v)
    return value, float(asc[-1])


def evaluate(spec: RiskSpec, z: Ensemble, theta0=None) -> RiskValue:
    """rho(Z) for a scalar ensemble.

    Expectation and exact AV@R are closed-form; the parametric kinds
    delegate to inner_minimize. Raises RiskMinimizationError (carrying
    the best iterate) if the inner problem fails to converge.
    """
    vals, probs = _scalar_support(z)
    if spec.kind == "expectation":
        return RiskValue(float(probs @ vals), np.zeros(0), 0)
    if spec.kind == "avar_exact":
        value, quantile = _avar_sorted(vals, probs, spec.alpha)
        return RiskValue(value, np.array([quantile]), 0)
    return inner_minimize(spec, z, theta0)


def inner_minimize(spec: RiskSpec, z: Ensemble, theta0=None, tol_theta: float = 1e-10) -> RiskValue:
    """Minimize theta -> E[Psi(Z, theta)] for a parametric spec.

    One-parameter kinds use bisection on the derivative of the convex
    objective (bracket grown geometrically from [min z - 1, max z + 1]);
    KL runs the quasi-Newton optimizer on (s, m). theta0, when given, is
    in natural coordinates.
    """
    vals, probs = _scalar_support(z)
    if spec.kind == "expectation":
        return RiskValue(float(probs @ vals), np.zeros(0), 0)
    if spec.theta_dim == 1:
        return _minimize_theta_1d(spec, vals, probs, tol_theta)
    if spec.kind == "kl_divergence":
        return _minimize_kl(spec, vals, probs, theta0)
    raise ValueError(f"{spec.kind} has no parametric inner problem")


def _minimize_theta_1d(spec: RiskSpec, z: np.ndarray, probs: np.ndarray, tol: float) -> RiskValue:
    # d/dtheta E[Psi] = 1 - E[psi'(z - theta)]; nondecreasing in theta
    if spec.kind == "avar_softplus":
        def hp(th):
            return 1.0 - float(probs @ _expit(z - th)) / spec.alpha
    else:
        def hp(th):
            return 1.0 - float(probs @ np.asarray(spec.psi_prime_fn(z - th), dtype=float))

    def value_at(th):
        return float(probs @ psi(spec, z, np.array([th])))

    lo = float(z.min()) - 1.0
    hi = float(z.max()) + 1.0
    step = 1.0
    while hp(lo) > 0.0:
        if lo < -_BRACKET_CAP:
            raise RiskMinimizationError(
                "bracket expansion hit the lower cap",
                RiskValue(value_at(lo), np.array([lo]), 0),
            )
        lo -= step
        step *= 2.0
    step = 1.0
    while hp(hi) < 0.0:
        if hi > _BRACKET_CAP:
            raise RiskMinimizationError(
                "bracket expansion hit the upper cap",
                RiskValue(value_at(hi), np.array([hi]), 0),
            )
        hi += step
        step *= 2.0

    # bisect toward the smallest minimizer: hp(hi) >= 0 is invariant
    it = 0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if hp(mid) < 0.0:
            lo = mid
        else:
            hi = mid
        it += 1
    th = 0.5 * (lo + hi)
    return RiskValue(value_at(th), np.array([th]), it)


def _kl_f_grad_hess(c: float, z: np.ndarray, probs: np.ndarray, th: np.ndarray):
    """E[Psi], gradient and Hessian in (s, m) with the s-clip folded in.

    At a binding cap the s derivative is projected: kept while it points
    back into the interior (so an overshot iterate can leave the cap),
    zeroed once it pulls outward, where the clipped objective really is
    flat. The descent sees a stationary s only when the cap is the
    constrained minimizer.
    """
    s, m = float(th[0]), float(th[1])
    sc = float(np.clip(s, -S_CAP, S_CAP))
    t1 = float(np.exp(sc))
    w = (z - m) / t1
    with np.errstate(over="ignore", invalid="ignore"):
        em = np.expm1(w)
        ew = em + 1.0
        e_em = float(probs @ em)
        ewd = float(probs @ (w * ew))
        ew2 = float(probs @ (w * w * ew))
        ds = t1 * (c + e_em - ewd)
    f = t1 * c + m + t1 * e_em
    gm = -e_em
    h_mm = (e_em + 1.0) / t1
    if (s <= -S_CAP and ds > 0.0) or (s >= S_CAP and ds < 0.0):
        gs, h_ss, h_sm = 0.0, 0.0, 0.0
    else:
        gs = ds
        h_ss = ds + t1 * ew2
        h_sm = ewd
    return f, np.array([gs, gm]), np.array([[h_ss, h_sm], [h_sm, h_mm]])


def _minimize_kl(spec: RiskSpec, z: np.ndarray, probs: np.ndarray, theta0=None,
                 tol: float = 1e-10, max_iter: int = 200) -> RiskValue:
    """Damped Newton on (s, m).

    The Hessian stiffens like 1/theta1 in the m direction as the infimum
    approaches the lower cap (large c), far beyond what a quasi-Newton
    metric tracks; the exact 2x2 Hessian makes the geometry a non-issue.
    A step whose predicted decrease falls below representability is
    accepted as converged.
    """
    c = spec.c
    # cold start rebuilt from the data; always finite because m0 = max z
    # puts every exponent at or below zero
    with np.errstate(over="ignore"):
        mu = float(probs @ z)
        spread = float(np.sqrt(probs @ (z - mu) ** 2))
    s0 = float(np.clip(np.log(max(spread, 1e-6)), -S_CAP, S_CAP))
    th = np.array([s0, float(z.max())])
    f, g, H = _kl_f_grad_hess(c, z, probs, th)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise RiskMinimizationError(
            "KL objective non-finite at the initial point",
            RiskValue(f, spec.theta_to_external(th), 0))
    if theta0 is not None:
        # a warm start is only a hint. A stale one (theta2 stranded at the
        # cost scale of an abandoned outer iterate) sits in a flat region
        # where every exponent underflows and Newton cannot move, so keep
        # it only when it actually beats the cold start.
        cand = spec.theta_from_external(theta0)
        fw, gw, Hw = _kl_f_grad_hess(c, z, probs, cand)
        if np.isfinite(fw) and np.all(np.isfinite(gw)) and fw < f:
            th, f, g, H = cand, fw, gw, Hw

    for it in range(max_iter):
        if float(np.max(np.abs(g))) <= tol:
            return RiskValue(f, spec.theta_to_external(th), it)

        # Sylvester test; repair only a genuinely non-PD Hessian. An
        # extreme condition number is harmless for the exact 2x2 solve,
        # and shifting a healthy matrix would swamp the shallow direction
        # and stall the descent along the boundary ray.
        a, b, d = H[0, 0], H[0, 1], H[1, 1]
        with np.errstate(over="ignore", invalid="ignore"):
            det = a * d - b * b
            if not (np.isfinite(det) and a > 0.0 and det > 0.0):
                eigmin = 0.5 * (a + d) - np.hypot(0.5 * (a - d), b)
                shift = 1e-14 * (abs(a) + abs(d)) + 1e-300
                if np.isfinite(eigmin) and eigmin < 0.0:
                    shift -= eigmin
                a, d = a + shift, d + shift
                det = a * d - b * b
            if np.isfinite(det) and det > 0.0:
                step = np.array([-(d * g[0] - b * g[1]) / det,
                                 -(a * g[1] - b * g[0]) / det])
                gd = float(g @ step)
            else:
                # dead zone: every exponent underflown, curvature all zero
                gd = np.inf
            if not np.isfinite(gd) or gd >= 0.0:
                step = -g
                gd = -float(g @ g)
                if not np.isfinite(gd):
                    gn = float(np.max(np.abs(g)))
                    step = g / -gn
                    gd = float(g @ step)
        # cap the step: a repaired near-singular Hessian (all exponents
        # underflown) can propose astronomically long moves whose finite
        # window 60 halvings never reach
        limit = 2.0 * S_CAP + float(z.max() - z.min()) + abs(float(th[1])) + 1.0
        norm = float(np.max(np.abs(step)))
        if norm > limit:
            step *= limit / norm
            gd *= limit / norm
        if abs(gd) <= 1e-15 * max(1.0, abs(f)):
            # Newton decrement ~ remaining improvement: below float
            # resolution of f. The gradient itself may stay pinned at
            # curvature * ulp in the stiff direction, so it cannot be
            # driven lower than this.
            return RiskValue(f, spec.theta_to_external(th), it)

        accepted = None
        t = 1.0
        for _ in range(60):
            trial = th + t * step
            if np.array_equal(trial, th):
                # step underflow: no representable point improves
                return RiskValue(f, spec.theta_to_external(th), it)
            ft, gt, Ht = _kl_f_grad_hess(c, z, probs, trial)
            if np.isfinite(ft) and np.all(np.isfinite(gt)) and ft <= f + 1e-4 * t * gd:
                accepted = (trial, ft, gt, Ht)
                break
            t *= 0.5
        if accepted is None:
            if abs(gd) <= 1e-13 * max(1.0, abs(f)):
                return RiskValue(f, spec.theta_to_external(th), it)
            raise RiskMinimizationError(
                f"KL line search stalled (grad_inf={float(np.max(np.abs(g))):.3e})",
                RiskValue(f, spec.theta_to_external(th), it))
        th, f, g, H = accepted
        # beyond the cap the objective is flat in s; park on the boundary
        th[0] = float(np.clip(th[0], -S_CAP, S_CAP))

    if float(np.max(np.abs(g))) <= 1e2 * tol:
        return RiskValue(f, spec.theta_to_external(th), max_iter)
    raise RiskMinimizationError(
        "KL inner minimization did not converge",
        RiskValue(f, spec.theta_to_external(th), max_iter))


def kl_reduced(c: float, z: Ensemble, tol: float = 1e-12) -> float:
    """KL risk through its one-parameter form.

    Eliminating the location parameter analytically leaves
    inf_{t>0} t*(c + log E[e^{Z/t}]); minimized by golden section on
    log t over [-S_CAP, S_CAP]. Serves as an independent cross-check of
    the two-parameter evaluator, including at the c = 0 boundary where
    the infimum sits at the cap.
    """
    if not c >= 0.0:
        raise ValueError("c must be a nonnegative real")
    vals, probs = _scalar_support(z)
    zmax = float(vals.max())

    def h(logt):
        t = float(np.exp(logt))
        # t*logsumexp(z/t) shifted by zmax so exponents stay <= 0; the
        # expm1/log1p pairing avoids cancellation at large t, where the
        # sum sits within rounding of 1
        return t * c + zmax + t * float(np.log1p(probs @ np.expm1((vals - zmax) / t)))

    _, val = _opt.minimize_scalar_convex(h, (-S_CAP, S_CAP), tol)
    return val
