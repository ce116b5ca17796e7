"""Patch-level distillation and patch-level feature reconstruction.

Distillation penalizes the drift of L2-normalized patch tokens between the
current model and the previous-task snapshot, weighted per token by its
angular dissimilarity to the class token. Reconstruction rebuilds an old
class feature by mixing its stored prototype with current-batch patch tokens
that look more like the prototype than like their own class token.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DegenerateInputError, UsageError
from .tensor import NORMALIZE_EPS, Tensor

DELTA_DENOM_EPS = 1e-6
PDL_VARIANTS = ("pdl", "with_cls", "full_token_l1")


def _np(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def cosine(a, b) -> Tensor:
    """Cosine similarity along the last axis (broadcasting)."""
    return (T.l2_normalize(a, axis=-1) * T.l2_normalize(b, axis=-1)).sum(axis=-1)


def angular_similarity(a, b) -> Tensor:
    """``(pi - arccos(-cos(a, b))) / pi``: 0 for parallel, 0.5 orthogonal, 1 anti-parallel."""
    c = T.clip(cosine(a, b), -1.0, 1.0)
    return (np.pi - T.arccos(-c)) * (1.0 / np.pi)


def hypersphere_drift(p_new, p_old) -> Tensor:
    """Distance between the L2-normalized tokens, in [0, 2]."""
    return T.norm(T.l2_normalize(p_new, axis=-1) - T.l2_normalize(p_old, axis=-1), axis=-1)


def _split(tokens):
    tokens = T.as_tensor(tokens)
    if tokens.ndim == 2:
        tokens = T.reshape(tokens, (1,) + tokens.shape)
    return tokens


def pdl_loss(new_tokens, old_tokens) -> Tensor:
    """Angular-weighted drift averaged over patch tokens (class token excluded) and the batch.

    ``new_tokens`` / ``old_tokens`` are ``(L+1, d)`` or ``(B, L+1, d)``. The
    old tokens are treated as constants, and so is the per-token weight.
    """
    new = _split(new_tokens)
    old = T.Tensor(_np(_split(old_tokens)), _check=False)
    if new.shape != old.shape:
        raise UsageError(f"token batches differ in shape: {new.shape} vs {old.shape}")
    if new.shape[1] < 2:
        raise UsageError("need at least one patch token")
    with T.no_grad():
        weights = angular_similarity(new[:, :1, :].detach(), new[:, 1:, :].detach())
    drift = hypersphere_drift(new[:, 1:, :], old[:, 1:, :])
    return (drift * weights.data).mean()


def pdl_variants(new_tokens, old_tokens, variant: str) -> Tensor:
    """Ablation forms of the distillation term.

    ``with_cls`` also penalizes the class token's drift; its angular weight
    against itself would be 0, so it enters with weight 1. ``full_token_l1``
    is the mean absolute difference over all raw token entries.
    """
    new = _split(new_tokens)
    old = T.Tensor(_np(_split(old_tokens)), _check=False)
    if new.shape != old.shape:
        raise UsageError(f"token batches differ in shape: {new.shape} vs {old.shape}")
    if variant == "pdl":
        return pdl_loss(new, old)
    if variant == "with_cls":
        with T.no_grad():
            w = angular_similarity(new[:, :1, :].detach(), new[:, 1:, :].detach()).data
        weights = np.concatenate([np.ones((w.shape[0], 1)), w], axis=1)
        return (hypersphere_drift(new, old) * weights).mean()
    if variant == "full_token_l1":
        diff = new - old
        # |x| = relu(x) + relu(-x), keeps the subgradient at 0 equal to 0
        return (T.relu(diff) + T.relu(-diff)).mean()
    raise UsageError(f"unknown distillation variant {variant!r}; expected one of {PDL_VARIANTS}")


# ---- feature reconstruction -----------------------------------------------------------
def _cos_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na <= NORMALIZE_EPS) or np.any(nb <= NORMALIZE_EPS):
        raise DegenerateInputError("cosine of a zero vector")
    return (a * b).sum(axis=-1) / (na * nb)


def _delta(cos_mu: np.ndarray, cos_cls: np.ndarray, eps: float):
    denom = cos_mu + cos_cls
    excluded = (np.abs(denom) < eps) | (denom < 0)
    safe = np.where(excluded, 1.0, denom)
    delta = np.where(excluded, 0.0, (cos_mu - cos_cls) / safe)
    return np.maximum(delta, 0.0), excluded


def relative_similarity_delta(mu, p_cls, p_patch, eps: float = DELTA_DENOM_EPS):
    """Clamped relative similarity difference ``max(0, (c_mu - c_cls) / (c_mu + c_cls))``.

    Tokens whose denominator is below ``eps`` in magnitude or negative count
    as not retrieved (0). Broadcasts over leading axes.
    """
    mu, p_cls, p_patch = _np(mu), _np(p_cls), _np(p_patch)
    d_hat, _ = _delta(_cos_np(mu, p_patch), _cos_np(p_cls, p_patch), eps)
    return float(d_hat) if d_hat.ndim == 0 else d_hat


@dataclass
class Reconstruction:
    features: np.ndarray  # (N, d)
    retrieved: np.ndarray  # (N,) tokens with positive delta per prototype
    excluded: int  # tokens dropped by the denominator guard, summed over prototypes
    empty_pool: bool
    weights: np.ndarray | None = None  # (N, B*L) softmax weights, zero off the retrieved set

    def diagnostics(self) -> dict:
        return {
            "retrieved_mean": float(self.retrieved.mean()) if self.retrieved.size else 0.0,
            "no_retrieval": int(np.sum(self.retrieved == 0)),
            "excluded_tokens": int(self.excluded),
            "empty_pool": bool(self.empty_pool),
        }


def pfr_reconstruct_many(prototypes, cls_tokens, patch_tokens, beta: float, eps: float = DELTA_DENOM_EPS) -> Reconstruction:
    """Reconstruct one pseudo-feature per prototype row.

    prototypes ``(N, d)``; cls_tokens ``(B, d)``; patch_tokens ``(B, L, d)``.
    """
    if not 0.0 <= beta <= 1.0:
        raise UsageError(f"beta must lie in [0, 1], got {beta}")
    mus = np.atleast_2d(_np(prototypes))
    cls = np.atleast_2d(_np(cls_tokens))
    patches = _np(patch_tokens)
    if patches.ndim == 2:
        patches = patches[None]
    n = mus.shape[0]
    if patches.size == 0:
        return Reconstruction(mus.copy(), np.zeros(n, dtype=int), 0, True, np.zeros((n, 0)))
    d = mus.shape[1]
    pool = patches.reshape(-1, d)  # (B*L, d)
    pool_unit = pool / _norms(pool)[:, None]
    cos_cls = (_cos_rows(cls)[:, None, :] * pool_unit.reshape(patches.shape)).sum(-1).reshape(-1)
    cos_mu = (mus / _norms(mus)[:, None]) @ pool_unit.T  # (N, B*L)
    d_hat, excluded = _delta(cos_mu, cos_cls[None, :], eps)
    retrieved = d_hat > 0
    counts = retrieved.sum(axis=1)
    # softmax over the retrieved tokens only
    logits = np.where(retrieved, d_hat, -np.inf)
    top = np.where(counts > 0, logits.max(axis=1), 0.0)
    w = np.where(retrieved, np.exp(logits - top[:, None]), 0.0)
    w_sum = w.sum(axis=1, keepdims=True)
    omega = np.divide(w, w_sum, out=np.zeros_like(w), where=w_sum > 0)
    mixed = omega @ pool
    feats = np.where(counts[:, None] > 0, beta * mus + (1.0 - beta) * mixed, mus)
    return Reconstruction(feats, counts, int(excluded.sum()), False, omega)


def _norms(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1)
    if np.any(n <= NORMALIZE_EPS):
        raise DegenerateInputError("cosine of a zero vector")
    return n


def _cos_rows(x: np.ndarray) -> np.ndarray:
    return x / _norms(x)[:, None]


def pfr_reconstruct(mu, cls_tokens, patch_tokens, beta: float = 0.7) -> tuple[np.ndarray, dict]:
    """Single-prototype reconstruction; returns the feature and its diagnostics."""
    rec = pfr_reconstruct_many(np.atleast_2d(_np(mu)), cls_tokens, patch_tokens, beta)
    return rec.features[0], rec.diagnostics()


def gaussian_baseline_sample(mean, var_diag, rng, size: int | None = None) -> np.ndarray:
    """Pseudo-feature(s) drawn from a diagonal Gaussian; ``rng`` may be a seed."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    mean = _np(mean)
    std = np.sqrt(np.maximum(_np(var_diag), 0.0))
    shape = mean.shape if size is None else (size,) + mean.shape
    return mean + std * rng.standard_normal(shape)
