"""Factorization checks for adapter weights.

For a linear adapter with ``W = W_down W_up = U diag(sigma) V`` every output
``W^T p`` equals ``V^T g(p)`` with ``g(p) = diag(sigma) U^T p``. With the ReLU
bottleneck the same holds after factorizing ``W_up`` alone, with
``g(p) = diag(sigma_up) U_up^T ReLU(W_down^T p)``. Either way the output lies
in the row space of ``V``, whatever the input.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import UsageError
from .linalg import svd
from .tensor import Tensor

TOLERANCE = 1e-8
PROBE_COUNT = 128
PROBE_SEED = 20240101


@dataclass
class FactorizationReport:
    kind: str  # "linear" or "nonlinear"
    task: int | None
    block: int | None
    singular_values: list[float]
    reconstruction_residual: float
    identity_residual: float
    subspace_residual: float
    effective_rank: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return max(self.reconstruction_residual, self.identity_residual, self.subspace_residual) <= self.tolerance

    def to_dict(self) -> dict:
        out = asdict(self)
        out["passed"] = self.passed
        return out


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def make_probes(dim: int, count: int = PROBE_COUNT, seed: int = PROBE_SEED) -> np.ndarray:
    """Unit-norm Gaussian directions, one per row."""
    g = np.random.default_rng(seed).normal(size=(count, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def subspace_residual(o, v) -> float:
    """Norm of the part of ``o`` outside the row space of ``v`` (rows orthonormal)."""
    o, v = _arr(o), _arr(v)
    if v.shape[0] == 0:
        return float(np.linalg.norm(o))
    return float(np.linalg.norm(o - v.T @ (v @ o)))


def _effective_rank(sigma: np.ndarray, tol: float) -> int:
    if sigma.size == 0:
        return 0
    return int(np.sum(sigma > tol * max(sigma[0], 1.0)))


def _check(kind, w, outputs_fn, g_fn, probes, tol, task, block):
    probes = _arr(probes)
    if probes.ndim == 1:
        probes = probes[None]
    if probes.shape[0] == 0:
        raise UsageError("probe set is empty")
    u, sigma, v = svd(w)
    recon = float(np.abs(u * sigma @ v - w).max()) if w.size else 0.0
    ident = 0.0
    sub = 0.0
    for p in probes:
        o = outputs_fn(p)
        rebuilt = v.T @ g_fn(p, u, sigma)
        ident = max(ident, float(np.linalg.norm(o - rebuilt)))
        sub = max(sub, subspace_residual(o, v))
    return FactorizationReport(
        kind=kind,
        task=task,
        block=block,
        singular_values=[float(s) for s in sigma],
        reconstruction_residual=recon,
        identity_residual=ident,
        subspace_residual=sub,
        effective_rank=_effective_rank(sigma, tol),
        tolerance=tol,
    )


def verify_linear_identity(w_down, w_up, probes, tol: float = TOLERANCE, task=None, block=None) -> FactorizationReport:
    wd, wu = _arr(w_down), _arr(w_up)
    w = wd @ wu
    return _check(
        "linear",
        w,
        lambda p: w.T @ p,
        lambda p, u, sigma: sigma * (u.T @ p),
        probes,
        tol,
        task,
        block,
    )


def verify_nonlinear_identity(w_down, w_up, probes, tol: float = TOLERANCE, task=None, block=None) -> FactorizationReport:
    wd, wu = _arr(w_down), _arr(w_up)

    def bottleneck(p):
        return np.maximum(wd.T @ p, 0.0)

    return _check(
        "nonlinear",
        wu,
        lambda p: wu.T @ bottleneck(p),
        lambda p, u, sigma: sigma * (u.T @ bottleneck(p)),
        probes,
        tol,
        task,
        block,
    )


def analyze_bank(bank, probes=None, tol: float = TOLERANCE) -> list[FactorizationReport]:
    """One linear and one nonlinear report per (task, block) in an adapter bank."""
    probes = make_probes(bank.dim) if probes is None else probes
    reports = []
    for block_entries in bank.entries:
        for adapter, _ in block_entries:
            for fn in (verify_linear_identity, verify_nonlinear_identity):
                reports.append(fn(adapter.w_down, adapter.w_up, probes, tol, adapter.task, adapter.block))
    return reports
