"""Control-problem definitions: dynamics, stage cost, noise law.

A Problem carries vectorized callables together with their analytic
Jacobians. Vectorization contract: states/controls arrive as (n, dx) /
(n, du) arrays of n probe points, the noise as a single (dw,) atom;
f returns (n, dx), g returns (n,), Jacobians return (n, dx, dx),
(n, dx, du), (n, dx), (n, du) respectively.

Scalar problems whose dynamics and cost fit the coefficient family

    f = A x + B u + C w + D (u - x)^2 + E,    g = Q x^2 + R u^2

also carry the coefficients directly (``scalar_coeffs``) so the
compiled scenario-tree kernel can run them without callable overhead.
Both built-in examples are members of this family.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .ensemble import Ensemble

__all__ = ["ScalarCoeffs", "Problem", "JacobianReport", "make_example1", "make_example2", "probe_jacobians"]


@dataclass(frozen=True)
class ScalarCoeffs:
    A: float
    B: float
    C: float
    D: float
    E: float
    Q: float
    R: float


@dataclass(frozen=True)
class Problem:
    name: str
    state_dim: int
    control_dim: int
    noise_dim: int
    f: Callable
    g: Callable
    df_dx: Callable
    df_du: Callable
    dg_dx: Callable
    dg_du: Callable
    noise: Ensemble
    scalar_coeffs: Optional[ScalarCoeffs] = None

    def __post_init__(self):
        if min(self.state_dim, self.control_dim, self.noise_dim) < 1:
            raise ValueError("dimensions must be positive")
        if self.noise.dim != self.noise_dim:
            raise ValueError("noise ensemble dimension mismatch")

    @property
    def is_scalar(self) -> bool:
        return self.state_dim == self.control_dim == self.noise_dim == 1


def _coeff_problem(name: str, co: ScalarCoeffs, noise: Ensemble) -> Problem:
    A, B, C, D, E, Q, R = co.A, co.B, co.C, co.D, co.E, co.Q, co.R

    def f(x, u, w):
        xs, us = x[:, 0], u[:, 0]
        out = A * xs + B * us + C * float(w[0]) + D * (us - xs) ** 2 + E
        return out[:, None]

    def g(x, u):
        return Q * x[:, 0] ** 2 + R * u[:, 0] ** 2

    def df_dx(x, u, w):
        xs, us = x[:, 0], u[:, 0]
        return (A - 2.0 * D * (us - xs))[:, None, None]

    def df_du(x, u, w):
        xs, us = x[:, 0], u[:, 0]
        return (B + 2.0 * D * (us - xs))[:, None, None]

    def dg_dx(x, u):
        return 2.0 * Q * x[:, 0:1]

    def dg_du(x, u):
        return 2.0 * R * u[:, 0:1]

    return Problem(name, 1, 1, 1, f, g, df_dx, df_du, dg_dx, dg_du, noise, co)


def make_example1() -> Problem:
    """Linear system with quadratic cost under symmetric two-point noise.

    x' = 1.5 x + u + w,  g = x^2 + 5 u^2,  w = +-0.6 with equal probability.
    """
    noise = Ensemble.from_scalars([0.6, -0.6], [0.5, 0.5])
    return _coeff_problem("example1", ScalarCoeffs(1.5, 1.0, 1.0, 0.0, 0.0, 1.0, 5.0), noise)


def make_example2(gamma: float = 15.0) -> Problem:
    """Nonlinear system x' = (u - x)^2 + w with cost x^2 + gamma u^2.

    Noise takes value 1 with probability 0.7 and 0.25 with probability 0.3,
    so the state is pushed away from the origin every step.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    noise = Ensemble.from_scalars([1.0, 0.25], [0.7, 0.3])
    return _coeff_problem("example2", ScalarCoeffs(0.0, 0.0, 1.0, 1.0, 0.0, 1.0, float(gamma)), noise)


@dataclass
class JacobianReport:
    max_rel_error: float
    worst: str
    ok: bool


def probe_jacobians(p: Problem, n_probes: int = 25, seed: int = 0, tol: float = 1e-5) -> JacobianReport:
    """Check analytic Jacobians against central differences at random probes.

    Differencing step 1e-6 * max(1, |coordinate|); errors are relative to
    max(1, magnitude). Failure (ok=False) when any entry exceeds tol.
    """
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_label = ""

    def track(err, label):
        nonlocal worst, worst_label
        if err > worst:
            worst, worst_label = float(err), label

    for _ in range(n_probes):
        x = rng.normal(0.0, 2.0, size=(1, p.state_dim))
        u = rng.normal(0.0, 2.0, size=(1, p.control_dim))
        w = p.noise.atoms[rng.integers(p.noise.size)]

        an_fx = p.df_dx(x, u, w)[0]
        an_fu = p.df_du(x, u, w)[0]
        an_gx = p.dg_dx(x, u)[0]
        an_gu = p.dg_du(x, u)[0]

        for j in range(p.state_dim):
            h = 1e-6 * max(1.0, abs(x[0, j]))
            xp, xm = x.copy(), x.copy()
            xp[0, j] += h
            xm[0, j] -= h
            fd_f = (p.f(xp, u, w)[0] - p.f(xm, u, w)[0]) / (2 * h)
            fd_g = (p.g(xp, u)[0] - p.g(xm, u)[0]) / (2 * h)
            err_f = np.abs(fd_f - an_fx[:, j]) / np.maximum(1.0, np.abs(an_fx[:, j]))
            track(err_f.max(), f"df_dx[:,{j}]")
            track(abs(fd_g - an_gx[j]) / max(1.0, abs(an_gx[j])), f"dg_dx[{j}]")
        for j in range(p.control_dim):
            h = 1e-6 * max(1.0, abs(u[0, j]))
            up, um = u.copy(), u.copy()
            up[0, j] += h
            um[0, j] -= h
            fd_f = (p.f(x, up, w)[0] - p.f(x, um, w)[0]) / (2 * h)
            fd_g = (p.g(x, up)[0] - p.g(x, um)[0]) / (2 * h)
            err_f = np.abs(fd_f - an_fu[:, j]) / np.maximum(1.0, np.abs(an_fu[:, j]))
            track(err_f.max(), f"df_du[:,{j}]")
            track(abs(fd_g - an_gu[j]) / max(1.0, abs(an_gu[j])), f"dg_du[{j}]")

    return JacobianReport(worst, worst_label, worst <= tol)
