"""Corrected classification loss, prototype-label contrastive loss, and their sum.

Every loss returns its value together with analytic gradients so the
trainer never differentiates numerically. Gradients are those of the
batch-averaged scalar that the trainer minimizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_FLOOR = 1e-12
MF_BOUND = 2.0


def _matrix(M) -> np.ndarray:
    return np.asarray(getattr(M, "entries", M), dtype=np.float64)


def adversary_aware_ce(f: np.ndarray, qbar: np.ndarray, M):
    """Per-instance ``-sum_i qbar_i log(max((M f)_i, 1e-12))``.

    ``f`` holds softmax outputs, one row per instance. Returns
    ``(losses, grad_logits)`` where ``grad_logits[b]`` is the gradient of
    ``losses[b]`` with respect to the logits that produced ``f[b]``.
    """
    f = np.atleast_2d(np.asarray(f, dtype=np.float64))
    qbar = np.atleast_2d(np.asarray(qbar, dtype=np.float64))
    m = _matrix(M)
    s = f @ m.T
    if np.any(s > MF_BOUND + 1e-9):
        raise ValueError(f"(M f) exceeds {MF_BOUND}; M is not a valid correction matrix")
    floored = s < LOG_FLOOR
    s_safe = np.where(floored, LOG_FLOOR, s)
    losses = -(qbar * np.log(s_safe)).sum(axis=1)
    # d/ds of -q log s, zero where the floor is active
    gs = np.where(floored, 0.0, -qbar / s_safe)
    gf = gs @ m
    grad_logits = f * (gf - (gf * f).sum(axis=1, keepdims=True))
    return losses, grad_logits


def _logsumexp(a: np.ndarray, mask: np.ndarray) -> np.ndarray:
    masked = np.where(mask, a, -np.inf)
    top = masked.max(axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    return (top + np.log(np.exp(masked - top).sum(axis=1, keepdims=True)))[:, 0]


@dataclass
class ContrastiveResult:
    value: float
    per_query: np.ndarray
    skipped: np.ndarray
    grad_queries: np.ndarray
    grad_pool: np.ndarray


def contrastive_loss(u: np.ndarray, pool: np.ndarray, positives: np.ndarray,
                     denominators: np.ndarray, tau: float = 0.07) -> ContrastiveResult:
    """Mean over queries of ``-(1/|N+|) sum_{z+} log softmax_{pool}(u.z/tau)[z+]``.

    ``positives`` and ``denominators`` are boolean ``(B, P)`` masks over the
    pool rows; the denominator mask must exclude each query's own row.
    Queries without positives contribute zero and are flagged in
    ``skipped``; the value averages over the remaining queries. Gradients
    are returned separately for the queries and for every pool row.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    u = np.atleast_2d(u)
    positives = np.asarray(positives, dtype=bool)
    denominators = np.asarray(denominators, dtype=bool)
    if np.any(positives & ~denominators):
        raise ValueError("positives must be a subset of the denominator pool")
    logits = (u @ pool.T) / tau
    lse = _logsumexp(logits, denominators)
    n_pos = positives.sum(axis=1)
    skipped = n_pos == 0
    active = ~skipped
    safe_n = np.where(skipped, 1, n_pos)
    pos_logit_mean = np.where(positives, logits, 0.0).sum(axis=1) / safe_n
    per_query = np.where(active, lse - pos_logit_mean, 0.0)
    count = int(active.sum())
    value = float(per_query.sum() / count) if count else 0.0

    if count:
        soft = np.where(denominators, np.exp(np.where(denominators, logits, -np.inf) - lse[:, None]), 0.0)
        g = (soft - positives / safe_n[:, None]) * active[:, None] / count
    else:
        g = np.zeros_like(logits)
    grad_queries = (g @ pool) / tau
    grad_pool = (g.T @ u) / tau
    return ContrastiveResult(value, per_query, skipped, grad_queries, grad_pool)


@dataclass
class LossBreakdown:
    classification: float
    contrastive: float
    combined: float
    lam: float
    cls_per_instance: np.ndarray
    con_per_query: np.ndarray
    skipped_queries: int


def combined_loss(f, qbar, M, u=None, pool=None, positives=None, denominators=None,
                  lam: float = 0.5, tau: float = 0.07):
    """``lam * contrastive + classification`` with gradients.

    The first ``B`` pool rows are taken to be the queries themselves, so
    their pool gradients flow back into the query embeddings; the rest of
    the pool (key views and queue) is treated as constant. With ``lam = 0``
    the contrastive term is neither evaluated nor differentiated.

    Returns ``(LossBreakdown, grad_logits, grad_embedding)``.
    """
    f = np.atleast_2d(f)
    b = f.shape[0]
    cls, g_cls = adversary_aware_ce(f, qbar, M)
    classification = float(cls.mean())
    grad_logits = g_cls / b
    if lam == 0.0 or u is None:
        grad_u = None if u is None else np.zeros_like(u)
        bd = LossBreakdown(classification, 0.0, classification, lam, cls, np.zeros(b), 0)
        return bd, grad_logits, grad_u
    con = contrastive_loss(u, pool, positives, denominators, tau)
    grad_u = lam * (con.grad_queries + con.grad_pool[:b])
    combined = lam * con.value + classification
    bd = LossBreakdown(classification, con.value, combined, lam, cls, con.per_query, int(con.skipped.sum()))
    return bd, grad_logits, grad_u
