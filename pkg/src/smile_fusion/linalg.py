"""SVD via one-sided Jacobi, truncation, least squares and basis checks."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Literal

import numpy as np

from .errors import ConvergenceError, DomainError, RankDeficiencyError, ShapeError
from .tensor import as_matrix, as_vector, frobenius_inner, frozen, outer

MAX_SWEEPS = 60
ANGLE_TOL = 1e-12
EPS = 2.0**-52
RANK_SAFETY = 16
COND_LIMIT = 1e12


@dataclass(frozen=True)
class SvdFactors:
    """``A = U diag(sigma) V^T``.

    ``U`` is m x m (full) or m x p (reduced, p = min(m, n)); ``V`` likewise
    n x n or n x p. ``sigma`` always has length p, including zeros past
    ``rank``.
    """

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray
    rank: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.U.shape[0], self.V.shape[0]

    def reconstruct(self, k: int | None = None) -> np.ndarray:
        p = len(self.sigma) if k is None else k
        return (self.U[:, :p] * self.sigma[:p]) @ self.V[:, :p].T


def rank_threshold(shape: tuple[int, int], sigma_max: float) -> float:
    return max(shape) * sigma_max * EPS * RANK_SAFETY


@lru_cache(maxsize=None)
def _round_robin(p: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Disjoint column pairings covering every pair once per sweep."""
    players = list(range(p + (p % 2)))
    n = len(players)
    rounds = []
    for _ in range(n - 1):
        pairs = [(players[i], players[n - 1 - i]) for i in range(n // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a < p and b < p]
        if pairs:
            left = np.array([a for a, _ in pairs], dtype=np.intp)
            right = np.array([b for _, b in pairs], dtype=np.intp)
            rounds.append((left, right))
        players = [players[0], players[-1], *players[1:-1]]
    return tuple(rounds)


def _jacobi(g: np.ndarray):
    """Orthogonalize the columns of ``g`` in place; returns (g, V)."""
    p = g.shape[1]
    v = np.eye(p)
    rounds = _round_robin(p)
    orth_tol = max(g.shape) * EPS
    residual = np.inf
    for _ in range(MAX_SWEEPS):
        max_angle = 0.0
        residual = 0.0
        for left, right in rounds:
            gi, gj = g[:, left], g[:, right]
            a = np.einsum("ij,ij->j", gi, gi)
            b = np.einsum("ij,ij->j", gj, gj)
            c = np.einsum("ij,ij->j", gi, gj)
            scale = np.sqrt(a * b)
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = np.where(scale > 0, np.abs(c) / scale, 0.0)
            residual = max(residual, float(rel.max(initial=0.0)))
            active = rel > orth_tol
            if not active.any():
                continue
            left, right = left[active], right[active]
            a, b, c = a[active], b[active], c[active]
            gi, gj = gi[:, active], gj[:, active]
            zeta = (b - a) / (2.0 * c)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            cs = 1.0 / np.sqrt(1.0 + t * t)
            sn = cs * t
            max_angle = max(max_angle, float(np.abs(np.arctan(t)).max()))
            g[:, left] = cs * gi - sn * gj
            g[:, right] = sn * gi + cs * gj
            vi, vj = v[:, left], v[:, right]
            v[:, left] = cs * vi - sn * vj
            v[:, right] = sn * vi + cs * vj
        if max_angle < ANGLE_TOL:
            return g, v
    raise ConvergenceError(
        f"one-sided Jacobi did not converge in {MAX_SWEEPS} sweeps "
        f"(off-diagonal residual {residual:.3e})",
        residual,
    )


def _complete_basis(q: np.ndarray, m: int) -> np.ndarray:
    """Orthonormal columns spanning the complement of span(q) in R^m."""
    if q.shape[1] == 0:
        return np.eye(m)
    full, _ = np.linalg.qr(q, mode="complete")
    return full[:, q.shape[1]:]


def _sign_fix(u: np.ndarray, v: np.ndarray, p: int) -> None:
    """Largest-magnitude entry of each u_j positive; matching flip on v_j.

    Unpaired kernel columns of ``v`` (j >= p, full mode with m < n) are
    normalized on their own entries.
    """
    for j in range(u.shape[1]):
        col = u[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            u[:, j] = -col
            if j < p:
                v[:, j] = -v[:, j]
    for j in range(p, v.shape[1]):
        col = v[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            v[:, j] = -col


def _factor_tall(a: np.ndarray, full: bool):
    """SVD pieces for m >= n: returns (U, sigma, V) with U m x (n or m)."""
    m, n = a.shape
    g, v = _jacobi(a.copy())
    sigma = np.sqrt(np.einsum("ij,ij->j", g, g))
    order = np.argsort(-sigma, kind="stable")
    sigma, g, v = sigma[order], g[:, order], v[:, order]
    nonzero = sigma > np.finfo(np.float64).tiny
    u = np.zeros((m, n))
    u[:, nonzero] = g[:, nonzero] / sigma[nonzero]
    sigma[~nonzero] = 0.0
    n_missing = int((~nonzero).sum())
    n_extra = m - n if full else 0
    if n_missing or n_extra:
        comp = _complete_basis(u[:, nonzero], m)
        u[:, ~nonzero] = comp[:, :n_missing]
        if n_extra:
            u = np.hstack([u, comp[:, n_missing:n_missing + n_extra]])
    return u, sigma, v


def svd(a, mode: Literal["full", "reduced"] = "reduced") -> SvdFactors:
    """Singular value decomposition by one-sided (Hestenes) Jacobi rotations.

    Columns are paired in round-robin order so each rotation step acts on
    disjoint pairs at once. Factors are made deterministic by the sign rule in
    :func:`_sign_fix`; equal singular values keep the algorithm's order.
    """
    if mode not in ("full", "reduced"):
        raise ValueError(f"mode must be 'full' or 'reduced', got {mode!r}")
    a = as_matrix(a)
    if not np.all(np.isfinite(a)):
        raise DomainError("svd input contains non-finite entries")
    m, n = a.shape
    full = mode == "full"
    if m >= n:
        u, sigma, v = _factor_tall(a, full)
    else:
        v, sigma, u = _factor_tall(a.T, full)
    p = min(m, n)
    _sign_fix(u, v, p)
    tol = rank_threshold((m, n), float(sigma[0]) if p else 0.0)
    rank = int(np.count_nonzero(sigma > tol))
    return SvdFactors(frozen(u), frozen(sigma), frozen(v), rank)


def normalize_factors(u, sigma, v, shape) -> SvdFactors:
    """Put externally assembled thin factors into canonical order and sign."""
    u = np.array(u, dtype=np.float64)
    v = np.array(v, dtype=np.float64)
    sigma = np.array(sigma, dtype=np.float64)
    order = np.argsort(-sigma, kind="stable")
    u, sigma, v = u[:, order], sigma[order], v[:, order]
    _sign_fix(u, v, len(sigma))
    tol = rank_threshold(shape, float(sigma[0]) if len(sigma) else 0.0)
    rank = int(np.count_nonzero(sigma > tol))
    return SvdFactors(frozen(u), frozen(sigma), frozen(v), rank)


def truncate(f: SvdFactors, k: int):
    """Rank-k truncation ``(U_k, sigma_k, V_k)``, with k clamped to ``f.rank``.

    By Eckart-Young this is the best rank-k approximation in Frobenius norm;
    the error is ``sqrt(sum(sigma[k:]**2))``.
    """
    if k < 1:
        raise ValueError(f"truncation rank must be >= 1, got {k}")
    k = min(k, f.rank)
    return (
        frozen(f.U[:, :k].copy()),
        frozen(f.sigma[:k].copy()),
        frozen(f.V[:, :k].copy()),
    )


def truncation_error(f: SvdFactors, k: int) -> float:
    k = min(k, f.rank)
    return float(np.sqrt(np.sum(f.sigma[k:] ** 2)))


def least_squares(a, y) -> np.ndarray:
    """Minimizer of ``||A lam - y||`` through the normal equations."""
    a = as_matrix(a)
    y = as_vector(y)
    if a.shape[0] != y.shape[0]:
        raise ShapeError(f"least_squares: A is {a.shape}, y has length {y.shape[0]}")
    if a.shape[0] < a.shape[1]:
        raise ShapeError(f"least_squares needs rows >= cols, got {a.shape}")
    s = svd(a).sigma
    cond = np.inf if s[-1] == 0 else (s[0] / s[-1]) ** 2
    if not cond <= COND_LIMIT:
        raise RankDeficiencyError(f"A^T A is singular (condition estimate {cond:.3e})")
    gram = a.T @ a
    return frozen(np.linalg.solve(gram, a.T @ y))


@dataclass(frozen=True)
class GramReport:
    gram: np.ndarray
    max_deviation: float


def check_orthonormal_basis(us, vs) -> GramReport:
    """Gram matrix of ``{u_i v_j^T}`` under the Frobenius inner product.

    Basis element (i, j) sits at index ``i * len(vs) + j``.
    """
    us = [as_vector(u) for u in us]
    vs = [as_vector(v) for v in vs]
    basis = [outer(u, v) for u in us for v in vs]
    size = len(basis)
    gram = np.empty((size, size))
    for a in range(size):
        for b in range(a, size):
            gram[a, b] = gram[b, a] = frobenius_inner(basis[a], basis[b])
    dev = float(np.max(np.abs(gram - np.eye(size)))) if size else 0.0
    return GramReport(frozen(gram), dev)
