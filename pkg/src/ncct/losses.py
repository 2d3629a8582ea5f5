"""Supervised cross-entropy, top-k negative mask and masked consistency.

Each loss has a companion ``*_logit_grad`` giving the exact gradient with
respect to the logits that produced the differentiated probabilities; the
model chains these through the heads and backbone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PROB_FLOOR = 1e-12
LOG_FLOOR = math.log(PROB_FLOOR)


@dataclass(frozen=True)
class NegativeMask:
    mask: np.ndarray  # (batch, C) of {0, 1}
    k: int


@dataclass
class LossReport:
    L_s: float
    L_c: float
    L_overall: float
    num_confident: int
    num_non_confident: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def counts(self) -> tuple[int, int]:
        return self.num_confident, self.num_non_confident


def _clamped_log(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """log(max(p, floor)) and the mask of entries that were not clamped."""
    live = ~(p < PROB_FLOOR)  # NaN stays live so it propagates
    return np.log(np.maximum(p, PROB_FLOOR)), live


def supervised_ce(probs: np.ndarray, labels) -> float:
    """Mean of -log p^{y_i} over the given rows; 0 for no rows."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        return 0.0
    p = probs[np.arange(len(labels)), labels]
    logp, _ = _clamped_log(p)
    return float(-logp.mean())


def supervised_ce_logit_grad(probs: np.ndarray, labels) -> np.ndarray:
    """d supervised_ce / d logits for the same rows."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    grad = np.zeros_like(probs)
    if n == 0:
        return grad
    rows = np.arange(n)
    live = ~(probs[rows, labels] < PROB_FLOOR)
    grad[:] = probs
    grad[rows, labels] -= 1.0
    grad[~live] = 0.0
    return grad / n


def topk_mask(probs: np.ndarray, k: int) -> NegativeMask:
    """1 on each row's k largest entries, ties resolved toward lower class index."""
    c = probs.shape[1]
    if not (1 <= k <= c):
        raise ValueError(f"k must satisfy 1 <= k <= C={c}, got {k}")
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    mask = np.zeros(probs.shape, dtype=np.int8)
    np.put_along_axis(mask, order, 1, axis=1)
    return NegativeMask(mask, k)


def leastk_mask(probs: np.ndarray, k: int) -> NegativeMask:
    """1 on each row's k smallest entries, ties resolved toward lower class index."""
    c = probs.shape[1]
    if not (1 <= k <= c):
        raise ValueError(f"k must satisfy 1 <= k <= C={c}, got {k}")
    order = np.argsort(probs, axis=1, kind="stable")[:, :k]
    mask = np.zeros(probs.shape, dtype=np.int8)
    np.put_along_axis(mask, order, 1, axis=1)
    return NegativeMask(mask, k)


def _mask_rows(mask) -> np.ndarray:
    return mask.mask if isinstance(mask, NegativeMask) else np.asarray(mask)


def masked_consistency(p_target, p_live, mask, indices) -> float:
    """-(1/max(1,|I|)) sum_{i in I} sum_c M[i,c] p_target[i,c] log p_live[i,c].

    ``p_target`` is a constant; the mask is applied without renormalising.
    """
    indices = np.asarray(indices, dtype=np.intp)
    if len(indices) == 0:
        return 0.0
    m = _mask_rows(mask)[indices]
    logq, _ = _clamped_log(p_live[indices])
    total = -(m * p_target[indices] * logq).sum()
    return float(total / max(1, len(indices)))


def masked_consistency_logit_grad(p_target, p_live, mask, indices) -> np.ndarray:
    """Gradient of masked_consistency w.r.t. the logits behind ``p_live``.

    Returned for all rows; rows outside ``indices`` are zero.
    """
    indices = np.asarray(indices, dtype=np.intp)
    grad = np.zeros_like(p_live)
    if len(indices) == 0:
        return grad
    m = _mask_rows(mask)[indices]
    q = p_live[indices]
    _, live = _clamped_log(q)
    weight = m * p_target[indices] * live
    grad[indices] = (weight.sum(axis=1, keepdims=True) * q - weight) / len(indices)
    return grad


def combine(L_s: float, L_c: float, num_confident: int = 0, num_non_confident: int = 0,
            diagnostics: dict | None = None) -> LossReport:
    if not (math.isfinite(L_s) and math.isfinite(L_c)):
        raise FloatingPointError(f"non-finite loss term: L_s={L_s}, L_c={L_c}")
    return LossReport(
        L_s=L_s,
        L_c=L_c,
        L_overall=L_s + L_c,
        num_confident=num_confident,
        num_non_confident=num_non_confident,
        diagnostics=dict(diagnostics or {}),
    )


def count_clamped(p: np.ndarray) -> int:
    return int(np.count_nonzero(p < PROB_FLOOR))
