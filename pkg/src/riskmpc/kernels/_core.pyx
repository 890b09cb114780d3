# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled scenario-tree kernel for the scalar coefficient family.

Covers dynamics A x + B u + C w + D (u - x)^2 + E with stage cost
Q x^2 + R u^2 and stage risk codes 0 = expectation,
1 = softplus AV@R (param = alpha), 2 = KL (param = c, theta = (s, m)
with theta1 = exp(s) clipped to +-20, matching risk.S_CAP).

Must stay numerically interchangeable with kernels.pure; the parity
tests in the suite compare the two on both built-in examples.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, expm1, log1p

cnp.import_array()

cdef double S_CAP = 20.0


cdef inline double _softplus(double w) noexcept nogil:
    if w > 0.0:
        return w + log1p(exp(-w))
    return log1p(exp(w))


cdef inline double _sigmoid(double w) noexcept nogil:
    cdef double e
    if w >= 0.0:
        return 1.0 / (1.0 + exp(-w))
    e = exp(w)
    return e / (1.0 + e)


def rollout(double A, double B, double C, double D, double E,
            cnp.int64_t[::1] offsets, double[::1] noise_atoms,
            double[::1] x_roots, double[::1] controls):
    """Forward state propagation; returns the (node_count,) state array."""
    cdef Py_ssize_t N = offsets.shape[0] - 2
    cdef Py_ssize_t m = noise_atoms.shape[0]
    states_np = np.empty(offsets[offsets.shape[0] - 1])
    cdef double[::1] sv = states_np
    cdef Py_ssize_t k, j, b, lo, hi, child
    cdef double x, u, base
    for j in range(offsets[1]):
        sv[j] = x_roots[j]
    for k in range(N):
        lo = offsets[k]
        hi = offsets[k + 1]
        for j in range(lo, hi):
            x = sv[j]
            u = controls[j]
            base = A * x + B * u + D * (u - x) * (u - x) + E
            child = hi + (j - lo) * m
            for b in range(m):
                sv[child + b] = base + C * noise_atoms[b]
    return states_np


def eval_obj_grad(double A, double B, double C, double D, double E,
                  double Q, double Rc,
                  cnp.int64_t[::1] offsets, double[::1] noise_atoms,
                  double[::1] path_probs, double[::1] x_roots,
                  double[::1] controls, int code, double param,
                  double[:, ::1] thetas):
    """Objective and reverse-mode gradient over (controls, thetas).

    Returns (objective, grad_controls (inner,), grad_thetas (N, theta_dim)).
    """
    cdef Py_ssize_t N = offsets.shape[0] - 2
    cdef Py_ssize_t m = noise_atoms.shape[0]
    cdef Py_ssize_t inner = offsets[N]
    cdef Py_ssize_t width = offsets[N + 1] - offsets[N]

    states_np = rollout(A, B, C, D, E, offsets, noise_atoms, x_roots, controls)
    cdef double[::1] sv = states_np

    cvec_np = np.empty(inner)
    gth_np = np.zeros((N, thetas.shape[1]))
    cdef double[::1] cvec = cvec_np
    cdef double[:, ::1] gth = gth_np

    cdef double obj = 0.0
    cdef Py_ssize_t k, j, b, jr, lo, hi
    cdef double z, p, th, w, sig, s, mloc, sc, t1, em
    cdef bint unclamped
    for k in range(N):
        lo = offsets[k]
        hi = offsets[k + 1]
        if code == 0:
            for j in range(lo, hi):
                z = Q * sv[j] * sv[j] + Rc * controls[j] * controls[j]
                p = path_probs[j]
                obj += p * z
                cvec[j] = p
        elif code == 1:
            th = thetas[k, 0]
            for j in range(lo, hi):
                z = Q * sv[j] * sv[j] + Rc * controls[j] * controls[j]
                p = path_probs[j]
                w = z - th
                obj += p * (th + _softplus(w) / param)
                sig = _sigmoid(w) / param
                cvec[j] = p * sig
                gth[k, 0] += p * (1.0 - sig)
        else:
            s = thetas[k, 0]
            mloc = thetas[k, 1]
            sc = s
            if sc > S_CAP:
                sc = S_CAP
            if sc < -S_CAP:
                sc = -S_CAP
            t1 = exp(sc)
            unclamped = -S_CAP < s < S_CAP
            for j in range(lo, hi):
                z = Q * sv[j] * sv[j] + Rc * controls[j] * controls[j]
                p = path_probs[j]
                w = (z - mloc) / t1
                # expm1 keeps t1*(e^w - 1) exact for huge t1, tiny w
                em = expm1(w)
                obj += p * (t1 * param + mloc + t1 * em)
                cvec[j] = p * (em + 1.0)
                gth[k, 1] -= p * em
                if unclamped:
                    gth[k, 0] += p * t1 * (param + em - w * (em + 1.0))

    gu_np = np.empty(inner)
    cdef double[::1] gu = gu_np
    lam_np = np.zeros(width)
    next_np = np.empty(width)
    cdef double[::1] lam = lam_np
    cdef double[::1] nxt = next_np
    cdef double[::1] tmp
    cdef double x, u, cj, lamsum, diff
    for k in range(N - 1, -1, -1):
        lo = offsets[k]
        hi = offsets[k + 1]
        for j in range(lo, hi):
            jr = j - lo
            x = sv[j]
            u = controls[j]
            cj = cvec[j]
            lamsum = 0.0
            for b in range(m):
                lamsum += lam[jr * m + b]
            diff = 2.0 * D * (u - x)
            gu[j] = cj * 2.0 * Rc * u + lamsum * (B + diff)
            nxt[jr] = cj * 2.0 * Q * x + lamsum * (A - diff)
        tmp = lam
        lam = nxt
        nxt = tmp
    return obj, gu_np, gth_np
