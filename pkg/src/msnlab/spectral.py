"""Spectral-norm estimation and the spectrally normalized weight map.

Weights of any rank >= 2 are viewed as a matrix with one row per output
unit (``out x everything-else``).  The largest singular value of that
matrix is tracked by power iteration whose vectors persist between calls,
and a one-sided Jacobi SVD serves as the exact reference for tests and
diagnostics.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DegenerateMatrixError, ShapeError, StateError
from .tensor import Tensor, _node, as_tensor

SIGMA_FLOOR = 1e-12
WARMUP_ITERS = 20
SVD_MAX_DIM = 512


@dataclass
class PowerIterState:
    """Left (``u``) and right (``v``) unit vectors of the flattened weight."""

    u: np.ndarray
    v: np.ndarray

    def copy(self):
        return PowerIterState(self.u.copy(), self.v.copy())


def init_power_state(rows, cols, rng):
    u = rng.standard_normal(rows)
    v = rng.standard_normal(cols)
    return PowerIterState(u / np.linalg.norm(u), v / np.linalg.norm(v))


def flatten_weight(w):
    """Return ``w`` as a ``(rows, cols)`` matrix, rows = first extent."""
    data = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    if data.ndim < 2:
        raise ArgumentError(f"cannot flatten a rank-{data.ndim} weight; need rank >= 2")
    return data.reshape(data.shape[0], -1)


def unflatten_weight(w_bar, shape):
    return np.asarray(w_bar).reshape(shape)


def _check_state(w_bar, state):
    m, n = w_bar.shape
    if state.u.shape != (m,) or state.v.shape != (n,):
        raise StateError(
            f"power-iteration state has u{state.u.shape}, v{state.v.shape} "
            f"but the weight matrix is {m}x{n}")


def _unit(x):
    nrm = np.linalg.norm(x)
    if nrm == 0.0:
        return x, nrm
    return x / nrm, nrm


def power_iteration(w_bar, state, iters=1):
    """Advance ``state`` by ``iters`` power iterations on ``w_bar``.

    Each iteration is ``v <- W^T u / |W^T u|`` then ``u <- W v / |W v|``.
    Returns ``(sigma, new_state)`` with ``sigma = u^T W v``.  The input
    state is left untouched.
    """
    w_bar = np.asarray(w_bar, dtype=np.float64)
    if iters < 1:
        raise ArgumentError(f"power_iteration needs iters >= 1, got {iters}")
    if w_bar.ndim != 2:
        raise ShapeError(f"power_iteration expects a matrix, got shape {w_bar.shape}")
    _check_state(w_bar, state)
    if not np.any(w_bar):
        raise DegenerateMatrixError("spectral norm of an all-zero matrix is 0; cannot normalize")

    u = state.u
    for _ in range(iters):
        v, nv = _unit(w_bar.T @ u)
        if nv == 0.0:
            # u fell into the left null space; restart from the heaviest column
            j = int(np.argmax(np.linalg.norm(w_bar, axis=0)))
            u = w_bar[:, j] / np.linalg.norm(w_bar[:, j])
            v, nv = _unit(w_bar.T @ u)
        u, _ = _unit(w_bar @ v)
    sigma = float(u @ w_bar @ v)
    return sigma, PowerIterState(u, v)


def converge_power_iteration(w_bar, state, tol=1e-12, max_iters=100000):
    """Iterate until the singular-triplet residual drops below ``tol * sigma``."""
    w_bar = np.asarray(w_bar, dtype=np.float64)
    sigma, state = power_iteration(w_bar, state, 1)
    for _ in range(max_iters):
        resid = (np.linalg.norm(w_bar @ state.v - sigma * state.u)
                 + np.linalg.norm(w_bar.T @ state.u - sigma * state.v))
        if resid <= tol * max(sigma, SIGMA_FLOOR):
            break
        sigma, state = power_iteration(w_bar, state, 1)
    return sigma, state


def _round_robin(n):
    """Rounds of disjoint index pairs covering every pair of ``range(n)`` once."""
    players = list(range(n + (n % 2)))
    k = len(players)
    rounds = []
    for _ in range(k - 1):
        pairs = [(players[i], players[k - 1 - i]) for i in range(k // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p < n and q < n]
        if pairs:
            rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_svd(a, tol=1e-15, max_sweeps=100):
    """One-sided (Hestenes) Jacobi SVD: ``a = U @ diag(s) @ Vt``.

    Columns are orthogonalized with plane rotations, which diagonalizes
    ``a^T a`` implicitly.  Disjoint column pairs are rotated together in
    round-robin order so each round is a single vectorized update.
    Singular values come back non-negative and sorted descending; U is
    ``m x k`` and Vt is ``k x n`` with ``k = min(m, n)``.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"jacobi_svd expects a matrix, got shape {a.shape}")
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T.copy()
    m, n = a.shape
    work = a
    v = np.eye(n)
    rounds = _round_robin(n)

    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            ap, aq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for mat in (work, v):
                xp, xq = mat[:, p].copy(), mat[:, q]
                mat[:, p] = c * xp - s * xq
                mat[:, q] = s * xp + c * xq
        if not rotated:
            break

    sv = np.linalg.norm(work, axis=0)
    order = np.argsort(-sv, kind="stable")
    sv, work, v = sv[order], work[:, order], v[:, order]
    u = np.zeros_like(work)
    nz = sv > 0
    u[:, nz] = work[:, nz] / sv[nz]
    if transposed:
        return v, sv, u.T
    return u, sv, v.T


def svd_oracle(w_bar):
    """Singular values of ``w_bar``, descending (Jacobi; test/diagnostic use only)."""
    w_bar = np.asarray(w_bar, dtype=np.float64)
    if w_bar.ndim != 2:
        raise ShapeError(f"svd_oracle expects a matrix, got shape {w_bar.shape}")
    if min(w_bar.shape) > SVD_MAX_DIM:
        raise ArgumentError(f"svd_oracle limited to min(m, n) <= {SVD_MAX_DIM}, got {w_bar.shape}")
    return jacobi_svd(w_bar)[1]


def sn_weight(w, state, train_iters=1):
    """Divide ``w`` by the spectral norm of its flattened view.

    ``train_iters`` power iterations are run first (0 keeps ``state`` frozen
    and reads sigma off the stored vectors).  Returns
    ``(w_hat, sigma, new_state)`` with ``w_hat`` shaped like ``w``.
    """
    data = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    w_bar = flatten_weight(data)
    if train_iters > 0:
        sigma, state = power_iteration(w_bar, state, train_iters)
    else:
        _check_state(w_bar, state)
        if not np.any(w_bar):
            raise DegenerateMatrixError("spectral norm of an all-zero matrix is 0; cannot normalize")
        sigma = float(state.u @ w_bar @ state.v)
    sigma = max(sigma, SIGMA_FLOOR)
    return data / sigma, sigma, state


def sn_weight_backward(w, w_hat, sigma, state, upstream_grad):
    """Gradient of ``L(W / sigma(W))`` with respect to ``W``.

    With ``G = dL/dW_hat`` and the singular vectors ``u, v`` held constant,
    ``dL/dW = (G - <G, W_hat> u v^T) / sigma``.
    """
    w = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64)
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != w.shape:
        raise ShapeError(f"upstream gradient {g.shape} does not match weight {w.shape}")
    g_bar = g.reshape(w.shape[0], -1)
    w_hat_bar = np.asarray(w_hat, dtype=np.float64).reshape(g_bar.shape)
    _check_state(g_bar, state)
    coupling = float(np.sum(g_bar * w_hat_bar))
    grad = (g_bar - coupling * np.outer(state.u, state.v)) / sigma
    return grad.reshape(w.shape)


def spectral_normalize(w, state, train_iters=1):
    """Differentiable ``w / sigma(w)``; returns ``(w_hat_tensor, sigma, new_state)``."""
    w = as_tensor(w)
    w_hat, sigma, new_state = sn_weight(w, state, train_iters)
    out = _node(w_hat, (w,),
                lambda g: (sn_weight_backward(w.data, w_hat, sigma, new_state, g),))
    return out, sigma, new_state
