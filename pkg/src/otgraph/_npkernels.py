"""Numpy implementations of the hot array kernels.

This is the fallback backend; ``_fastkern`` (Cython) implements the same
functions with tight C loops. Both must agree semantically -- the test suite
cross-checks them whenever the compiled module is importable.

All inputs are C-contiguous float64 arrays; nothing here broadcasts.
"""

import numpy as np


def matmul(a, b):
    return np.dot(a, b)


def matmul_nt(a, b):
    """a @ b.T"""
    return np.dot(a, b.T)


def matmul_tn(a, b):
    """a.T @ b"""
    return np.dot(a.T, b)


def softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def logsumexp_rows(x):
    m = x.max(axis=1)
    return m + np.log(np.exp(x - m[:, None]).sum(axis=1))


def logsumexp_cols(x):
    m = x.max(axis=0)
    return m + np.log(np.exp(x - m[None, :]).sum(axis=0))


def sinkhorn_potentials(S, loga, logb, max_iters, tol, last_row):
    """Alternating log-domain scaling on S = -C/eps.

    Returns dimensionless potentials (u, v) such that P = exp(S + u[:,None]
    + v[None,:]), plus the per-iteration history of the worst marginal
    violation. One iteration updates the non-final side first, so the side
    named by ``last_row`` holds exactly after every iteration.
    """
    n, m = S.shape
    u = np.zeros(n)
    v = np.zeros(m)
    history = np.empty(max_iters)
    a = np.exp(loga)
    b = np.exp(logb)
    done = 0
    for k in range(max_iters):
        if last_row:
            v = logb - logsumexp_cols(S + u[:, None])
            u = loga - logsumexp_rows(S + v[None, :])
        else:
            u = loga - logsumexp_rows(S + v[None, :])
            v = logb - logsumexp_cols(S + u[:, None])
        P = np.exp(S + u[:, None] + v[None, :])
        err = max(
            np.abs(P.sum(axis=1) - a).max(),
            np.abs(P.sum(axis=0) - b).max(),
        )
        history[k] = err
        done = k + 1
        if tol > 0.0 and err < tol:
            break
    return u, v, history[:done]
