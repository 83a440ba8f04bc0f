"""Kernel costs, entropic transport plans, an exact LP oracle, and alignment.

The solver comes in two forms with identical update rules: a fast off-tape
loop (via the compiled backend when present) for plans that are constants of
the learning problem, and a tape-unrolled form for differentiating through
the iterations. Both run in the log domain, so small regularizers never
underflow.
"""

import threading
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from . import backend as _K
from .autodiff import Tensor
from .errors import ConfigError, InputError, ShapeError

_counter_lock = threading.Lock()
_calls = 0


def _bump_calls():
    global _calls
    with _counter_lock:
        _calls += 1


def sinkhorn_calls():
    """Number of entropic solves since the last reset (tape and off-tape)."""
    return _calls


def reset_sinkhorn_calls():
    global _calls
    with _counter_lock:
        _calls = 0


@dataclass(frozen=True)
class KernelConfig:
    sigma: float = 1.0
    feature_dim: int = 256
    rff_seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be >= 1, got {self.feature_dim}")


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 0.1
    max_iters: int = 3
    convergence_tol: float = 0.0
    last_normalization: str = "row"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.convergence_tol < 0:
            raise ConfigError(f"convergence_tol must be >= 0, got {self.convergence_tol}")
        if self.last_normalization not in ("row", "column"):
            raise ConfigError(
                f"last_normalization must be 'row' or 'column', got {self.last_normalization!r}")


@dataclass(frozen=True)
class TransportPlan:
    values: Tensor
    src_marginal: Tensor
    tgt_marginal: Tensor
    iterations: int
    marginal_error: float
    error_history: tuple


def _arr(x):
    if isinstance(x, Tensor):
        return x.data
    return np.ascontiguousarray(x, dtype=np.float64)


def uniform_marginal(n):
    return Tensor(np.full(n, 1.0 / n))


def gaussian_gram(X, Y, cfg):
    """K_ij = exp(-||x_i - y_j||^2 / (2 sigma^2)).

    Distances come from explicit differences rather than the Gram expansion,
    so K(x, x) is exactly 1 and equal rows give exactly equal entries.
    """
    Xa, Ya = _arr(X), _arr(Y)
    if Xa.ndim != 2 or Ya.ndim != 2 or Xa.shape[1] != Ya.shape[1]:
        raise ShapeError(f"gaussian_gram: incompatible shapes {Xa.shape} vs {Ya.shape}")
    diff = Xa[:, None, :] - Ya[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    return Tensor(np.exp(-sq / (2.0 * cfg.sigma ** 2)))


def rkhs_embed(X, cfg):
    """Random Fourier features approximating the Gaussian kernel.

    phi(x) = sqrt(2/D) cos(x W + b) with W ~ N(0, I/sigma^2), b ~ U[0, 2pi);
    the draw depends only on rff_seed, the input dimension, and feature_dim.
    """
    Xa = _arr(X)
    if Xa.ndim != 2:
        raise ShapeError(f"rkhs_embed: need n x d input, got shape {Xa.shape}")
    d = Xa.shape[1]
    rng = np.random.Generator(np.random.PCG64(cfg.rff_seed))
    W = rng.standard_normal((d, cfg.feature_dim)) / cfg.sigma
    b = rng.uniform(0.0, 2.0 * np.pi, cfg.feature_dim)
    return Tensor(np.sqrt(2.0 / cfg.feature_dim) * np.cos(Xa @ W + b))


def cost_matrix(X, Y, cfg):
    """C = 1 - gaussian_gram(X, Y); low cost means high kernel alignment."""
    return Tensor(1.0 - gaussian_gram(X, Y, cfg).data)


def _check_marginals(C, a, b):
    if C.ndim != 2:
        raise ShapeError(f"cost must be a matrix, got shape {C.shape}")
    n, m = C.shape
    if a.shape != (n,) or b.shape != (m,):
        raise ShapeError(
            f"marginals {a.shape}/{b.shape} do not match cost shape {C.shape}")
    if np.any(a <= 0) or np.any(b <= 0):
        raise InputError("marginals must be strictly positive")
    if abs(a.sum() - 1.0) > 1e-8 or abs(b.sum() - 1.0) > 1e-8:
        raise InputError("marginals must each sum to 1")


# annealing: in convergence mode with a tight regularizer, walk epsilon down
# a geometric ladder, carrying the scaled potentials between rungs
_ANNEAL_START = 0.1
_ANNEAL_RATIO = 0.3
_ANNEAL_RUNG_TOL = 1e-3
_ANNEAL_RUNG_ITERS = 60


def sinkhorn(C, a, b, cfg):
    """Entropic plan by alternating log-domain scalings of exp(-C/eps).

    One iteration normalizes the side opposite ``last_normalization`` first,
    so the configured side's marginal is exact after every iteration. With
    convergence_tol > 0 the loop stops early once both marginals are within
    tolerance, and a small epsilon is reached by annealing from larger ones.
    """
    Ca, aa, ba = _arr(C), _arr(a), _arr(b)
    _check_marginals(Ca, aa, ba)
    _bump_calls()
    loga, logb = np.log(aa), np.log(ba)
    last_row = cfg.last_normalization == "row"

    eps_ladder = [cfg.epsilon]
    if cfg.convergence_tol > 0 and cfg.epsilon < _ANNEAL_START * _ANNEAL_RATIO:
        eps_ladder = []
        e = _ANNEAL_START
        while e > cfg.epsilon / _ANNEAL_RATIO:
            eps_ladder.append(e)
            e *= _ANNEAL_RATIO
        eps_ladder.append(cfg.epsilon)

    u = np.zeros(Ca.shape[0])
    v = np.zeros(Ca.shape[1])
    cur_eps = eps_ladder[0]
    budget = cfg.max_iters
    history = []
    for i, eps in enumerate(eps_ladder):
        final = i == len(eps_ladder) - 1
        # the target epsilon always gets at least one iteration so the
        # configured side's marginal is exact in the returned plan
        iters = max(1, budget) if final else min(_ANNEAL_RUNG_ITERS, max(budget - 1, 0))
        if iters == 0:
            continue
        if eps != cur_eps:
            # dual potentials f = eps*u carry across the epsilon change
            u *= cur_eps / eps
            v *= cur_eps / eps
            cur_eps = eps
        tol = cfg.convergence_tol if final else max(cfg.convergence_tol, _ANNEAL_RUNG_TOL)
        # warm start: absorbing u, v into S keeps the running plan continuous
        S = (-Ca / eps) + u[:, None] + v[None, :]
        du, dv, hist = _K.sinkhorn_potentials(S, loga, logb, iters, tol, last_row)
        u = u + np.asarray(du)
        v = v + np.asarray(dv)
        budget -= len(hist)
        history.extend(float(h) for h in hist)

    P = np.exp((-Ca / cur_eps) + u[:, None] + v[None, :])
    err = max(
        np.abs(P.sum(axis=1) - aa).max(),
        np.abs(P.sum(axis=0) - ba).max(),
    )
    return TransportPlan(
        values=Tensor(P),
        src_marginal=Tensor(aa),
        tgt_marginal=Tensor(ba),
        iterations=len(history),
        marginal_error=float(err),
        error_history=tuple(history),
    )


def sinkhorn_on_tape(tape, C_node, a, b, cfg):
    """The same scaling iterations unrolled as tape primitives.

    Always runs exactly max_iters iterations (a differentiable graph cannot
    branch on its own values), so keep max_iters small here.
    """
    aa, ba = _arr(a), _arr(b)
    _check_marginals(C_node.value.data, aa, ba)
    _bump_calls()
    last_row = cfg.last_normalization == "row"
    S = tape.smul(C_node, -1.0 / cfg.epsilon)
    loga = tape.constant(np.log(aa))
    logb = tape.constant(np.log(ba))
    u = tape.constant(np.zeros(aa.shape[0]))
    v = tape.constant(np.zeros(ba.shape[0]))
    for _ in range(cfg.max_iters):
        if last_row:
            v = tape.sub(logb, tape.logsumexp_cols(tape.add_colvec(S, u)))
            u = tape.sub(loga, tape.logsumexp_rows(tape.add_rowvec(S, v)))
        else:
            u = tape.sub(loga, tape.logsumexp_rows(tape.add_rowvec(S, v)))
            v = tape.sub(logb, tape.logsumexp_cols(tape.add_colvec(S, u)))
    return tape.exp(tape.add_rowvec(tape.add_colvec(S, u), v))


def transport_cost(C, P):
    """Total cost <C, P>."""
    Ca = _arr(C)
    Pa = P.values.data if isinstance(P, TransportPlan) else _arr(P)
    if Ca.shape != Pa.shape:
        raise ShapeError(f"cost/plan shape mismatch {Ca.shape} vs {Pa.shape}")
    return float(np.sum(Ca * Pa))


def plan_entropy(P):
    """H(P) = -sum P_ij (log P_ij - 1), with 0 log 0 = 0."""
    Pa = P.values.data if isinstance(P, TransportPlan) else _arr(P)
    mask = Pa > 0
    return float(-(Pa[mask] * (np.log(Pa[mask]) - 1.0)).sum())


def exact_ot(C, a, b):
    """Unregularized optimal transport via the LP formulation (test scale).

    Returns (plan, optimal_cost). Each of the n*m plan entries is an LP
    variable; row and column sum constraints pin the marginals.
    """
    Ca, aa, ba = _arr(C), _arr(a), _arr(b)
    if Ca.ndim != 2:
        raise ShapeError(f"cost must be a matrix, got shape {Ca.shape}")
    n, m = Ca.shape
    if n > 16 or m > 16:
        raise InputError(f"exact solver is test-scale only (<= 16), got {n}x{m}")
    if aa.shape != (n,) or ba.shape != (m,):
        raise ShapeError(
            f"marginals {aa.shape}/{ba.shape} do not match cost shape {Ca.shape}")
    if abs(aa.sum() - ba.sum()) > 1e-9:
        raise InputError(
            f"marginal sums differ: {aa.sum():.12f} vs {ba.sum():.12f}")

    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        A_eq[n + j, j::m] = 1.0
    rhs = np.concatenate([aa, ba])
    res = linprog(Ca.ravel(), A_eq=A_eq, b_eq=rhs, bounds=(0, None), method="highs")
    if not res.success:
        raise InputError(f"transport LP failed: {res.message}")
    plan = np.clip(res.x.reshape(n, m), 0.0, None)
    return Tensor(plan), float(res.fun)


def align_nodes(P, phi_src, scale):
    """Transported source content per target slot: scale * P^T phi_src."""
    Pa = P.values.data if isinstance(P, TransportPlan) else _arr(P)
    F = _arr(phi_src)
    if Pa.ndim != 2 or F.ndim != 2 or Pa.shape[0] != F.shape[0]:
        raise ShapeError(f"align_nodes: plan {Pa.shape} vs features {F.shape}")
    return Tensor(float(scale) * _K.matmul_tn(Pa, F))
