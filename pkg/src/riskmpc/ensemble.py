"""Finite-support random variables and distances between them.

An :class:`Ensemble` is a list of atoms (vectors in R^n) with
probabilities, the exact representation of every random quantity in this
package: noise laws, initial states, per-stage state/control marginals and
stage-cost distributions. All distances operate on these atom lists
exactly, without sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Ensemble",
    "PairedEnsemble",
    "mean",
    "moment_distance",
    "wasserstein_1d",
    "ky_fan",
    "dedup",
]

_PROB_TOL = 1e-12


def _as_atoms(atoms) -> np.ndarray:
    arr = np.asarray(atoms, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError("atoms must be a nonempty list of equally sized vectors")
    return arr


def _check_probs(probs, n: int) -> np.ndarray:
    p = np.asarray(probs, dtype=float)
    if p.shape != (n,):
        raise ValueError(f"got {p.shape[0] if p.ndim == 1 else p.shape} probabilities for {n} atoms")
    if np.any(p < 0.0):
        raise ValueError("probabilities must be nonnegative")
    if abs(p.sum() - 1.0) > _PROB_TOL:
        raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
    return p


@dataclass(frozen=True)
class Ensemble:
    """Finite-support random variable: atoms with probabilities.

    ``atoms`` has shape (k, n); scalar input is promoted to n=1. Atoms are
    stored read-only so ensembles can be shared freely across workers.
    """

    atoms: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        atoms = _as_atoms(self.atoms)
        probs = _check_probs(self.probs, atoms.shape[0])
        atoms.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "probs", probs)

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def is_scalar(self) -> bool:
        return self.dim == 1

    def values(self) -> np.ndarray:
        """Atoms as a flat array; only valid for scalar ensembles."""
        if not self.is_scalar:
            raise ValueError("values() requires a scalar ensemble")
        return self.atoms[:, 0]

    @staticmethod
    def point(x) -> "Ensemble":
        return Ensemble(np.atleast_1d(np.asarray(x, dtype=float))[None, :], np.array([1.0]))

    @staticmethod
    def from_scalars(values, probs) -> "Ensemble":
        return Ensemble(np.asarray(values, dtype=float), probs)


@dataclass(frozen=True)
class PairedEnsemble:
    """A coupling of two random variables on a common sample space.

    Needed by the Ky-Fan metric, which depends on the joint law of (X, Y),
    not just the marginals.
    """

    atoms_x: np.ndarray
    atoms_y: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        ax = _as_atoms(self.atoms_x)
        ay = _as_atoms(self.atoms_y)
        if ax.shape != ay.shape:
            raise ValueError(f"coupled atom arrays must align, got {ax.shape} vs {ay.shape}")
        probs = _check_probs(self.probs, ax.shape[0])
        for a in (ax, ay, probs):
            a.setflags(write=False)
        object.__setattr__(self, "atoms_x", ax)
        object.__setattr__(self, "atoms_y", ay)
        object.__setattr__(self, "probs", probs)


def mean(e: Ensemble) -> np.ndarray:
    """Probability-weighted mean vector."""
    return e.probs @ e.atoms


def moment_distance(x: Ensemble, y: Ensemble, r: float = 2.0) -> float:
    """| E[||X||^r]^(1/r) - E[||Y||^r]^(1/r) |, the r-th moment gap."""
    if r <= 0:
        raise ValueError(f"moment order must be positive, got {r}")
    if x.dim != y.dim:
        raise ValueError("ensembles must share dimension")
    mx = float(x.probs @ np.linalg.norm(x.atoms, axis=1) ** r) ** (1.0 / r)
    my = float(y.probs @ np.linalg.norm(y.atoms, axis=1) ** r) ** (1.0 / r)
    return abs(mx - my)


def wasserstein_1d(x: Ensemble, y: Ensemble, r: float = 2.0) -> float:
    """Order-r Wasserstein distance between scalar ensembles.

    Uses the monotone (quantile) coupling, which is optimal in one
    dimension: both CDFs are merged into common probability segments and
    the segment-weighted |q_x - q_y|^r accumulated.
    """
    if r <= 0:
        raise ValueError(f"Wasserstein order must be positive, got {r}")
    if not (x.is_scalar and y.is_scalar):
        raise ValueError("wasserstein_1d requires scalar ensembles")

    def sorted_support(e: Ensemble):
        v = e.values()
        order = np.argsort(v, kind="stable")
        return v[order], np.cumsum(e.probs[order])

    vx, cx = sorted_support(x)
    vy, cy = sorted_support(y)
    grid = np.unique(np.concatenate([cx, cy]))
    lo = np.concatenate([[0.0], grid[:-1]])
    weights = grid - lo
    mids = 0.5 * (grid + lo)
    ix = np.minimum(np.searchsorted(cx, mids, side="left"), vx.size - 1)
    iy = np.minimum(np.searchsorted(cy, mids, side="left"), vy.size - 1)
    acc = float(np.sum(weights * np.abs(vx[ix] - vy[iy]) ** r))
    return float(acc ** (1.0 / r))


def ky_fan(p: PairedEnsemble) -> float:
    """Ky-Fan metric inf{eps > 0 : P(||X - Y|| > eps) <= eps} of a coupling.

    Computed exactly: the survival function of d = ||X - Y|| is a step
    function, so the infimum is attained either at a value of d or at a
    tail probability, both of which are scanned.
    """
    d = np.linalg.norm(p.atoms_x - p.atoms_y, axis=1)
    order = np.argsort(d, kind="stable")
    d = d[order]
    probs = p.probs[order]
    tail = np.clip(1.0 - np.cumsum(probs), 0.0, None)  # tail[i] = P(dist > d[i])
    # The infimum is attained (the survival function is right-continuous)
    # and lies either at an atom of d, at a tail-probability level, or at 1.
    candidates = np.unique(np.concatenate([d, tail, [1.0]]))
    for eps in candidates:
        if eps < 0.0:
            continue
        if float(probs[d > eps].sum()) <= eps:
            return float(eps)
    return 1.0  # unreachable: eps = 1 always satisfies P(d > 1) <= 1


def dedup(e: Ensemble, tol: float = 0.0) -> Ensemble:
    """Merge atoms within tol (infinity norm), summing probabilities.

    Merged atoms are replaced by their probability-weighted centroid, so
    the ensemble mean is preserved up to the merge tolerance.
    """
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    reps: list[np.ndarray] = []
    masses: list[float] = []
    sums: list[np.ndarray] = []
    for a, pr in zip(e.atoms, e.probs):
        for j, r in enumerate(reps):
            if np.max(np.abs(a - r)) <= tol:
                masses[j] += pr
                sums[j] = sums[j] + pr * a
                break
        else:
            reps.append(a)
            masses.append(pr)
            sums.append(pr * a)
    atoms = np.empty((len(reps), e.dim))
    for j in range(len(reps)):
        atoms[j] = sums[j] / masses[j] if masses[j] > 0 else reps[j]
    total = float(np.sum(masses))
    return Ensemble(atoms, np.asarray(masses) / total)
