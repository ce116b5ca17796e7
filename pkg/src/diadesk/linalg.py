"""Singular value decomposition by one-sided (Hestenes) Jacobi rotations."""
from __future__ import annotations

import numpy as np

from .errors import NonFiniteError, NumericError
from .tensor import Tensor

MAX_SWEEPS = 80


def _jacobi_tall(a: np.ndarray, tol: float, max_sweeps: int):
    # a is m x n with m >= n; orthogonalize its columns in place
    m, n = a.shape
    v = np.eye(n)
    off = np.inf
    # columns below this squared norm are numerically zero; rotating them only stirs rounding noise
    floor = (np.finfo(np.float64).eps * np.linalg.norm(a)) ** 2
    for sweep in range(max_sweeps):
        off = 0.0
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap = a[:, p]
                aq = a[:, q]
                alpha = ap @ ap
                beta = aq @ aq
                gamma = ap @ aq
                if alpha <= floor or beta <= floor:
                    continue
                scaled = abs(gamma) / (np.sqrt(alpha) * np.sqrt(beta))
                off = max(off, scaled)
                if scaled <= tol:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.hypot(1.0, zeta))
                if t == 0.0:
                    continue
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                a[:, [p, q]] = np.column_stack((c * ap - s * aq, s * ap + c * aq))
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, [p, q]] = np.column_stack((c * vp - s * vq, s * vp + c * vq))
                rotated = True
        if not rotated:
            return a, v, sweep + 1
    raise NumericError(
        f"Jacobi SVD did not converge in {max_sweeps} sweeps",
        sweeps=max_sweeps,
        max_off_diagonal=float(off),
        shape=(m, n),
    )


def _complete_basis(basis: np.ndarray, count: int) -> np.ndarray:
    # Gram-Schmidt over the standard basis, twice for stability
    m = basis.shape[0]
    cols = [basis[:, i] for i in range(basis.shape[1])]
    extra = []
    for i in range(m):
        if len(extra) == count:
            break
        e = np.zeros(m)
        e[i] = 1.0
        for _ in range(2):
            for c in cols + extra:
                e = e - (c @ e) * c
        nrm = np.linalg.norm(e)
        if nrm > 1e-8:
            extra.append(e / nrm)
    return np.column_stack(extra)


def svd(w, tol: float | None = None, max_sweeps: int = MAX_SWEEPS, truncate: bool = True):
    """Thin SVD ``W = U diag(sigma) V``.

    Returns ``U`` (m x r, orthonormal columns), ``sigma`` (r, descending) and
    ``V`` (r x n, orthonormal rows), with r = min(m, n). Column pairs count
    as orthogonal once their cosine is below ``tol`` (default max(m, n) * eps). When ``truncate`` is
    set, singular values below ``max(m, n) * eps * sigma_max`` are dropped
    together with their vectors, so zero matrices give r = 0.
    """
    arr = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"svd expects a matrix, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteError("svd input contains NaN or Inf")
    m, n = arr.shape
    if tol is None:
        tol = max(m, n) * np.finfo(np.float64).eps
    flip = m < n
    a = (arr.T if flip else arr).astype(np.float64, copy=True)
    a, v, _ = _jacobi_tall(a, tol, max_sweeps)

    sigma = np.sqrt((a * a).sum(axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    a = a[:, order]
    v = v[:, order]

    cutoff = max(a.shape) * np.finfo(np.float64).eps * (sigma[0] if len(sigma) else 0.0)
    nonzero = int(np.sum(sigma > cutoff)) if len(sigma) and sigma[0] > 0 else 0
    # below the cutoff a column is rounding noise: its singular value is zero
    sigma[nonzero:] = 0.0
    keep = nonzero if truncate else len(sigma)
    sigma = sigma[:keep]
    v = v[:, :keep]
    u = np.zeros((a.shape[0], keep))
    u[:, :nonzero] = a[:, :nonzero] / sigma[:nonzero]
    if nonzero < keep:
        u[:, nonzero:] = _complete_basis(u[:, :nonzero], keep - nonzero)
    # a = U' diag(s) with a = X V, so X = U' diag(s) V^T
    if flip:
        # X = W^T: W = V diag(s) U'^T
        return v, sigma, u.T
    return u, sigma, v.T
