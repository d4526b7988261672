"""Objective terms: cross-entropy, supervised contrastive, rare-patch, front-door.

All terms are per-sample differentiable tensors; batch means are taken by the
caller in a fixed sample order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DomainError, NumericalError, ShapeError
from .matching import batch_assignments
from .tensor import Tensor

CE_CLAMP = 1e-12
TERMS = ("l_ce", "l_con", "l_r", "l_s_ce", "l_s_kl")


def _check_denominator(denominator: str) -> None:
    if denominator not in ("negatives", "all"):
        raise ContractError(f"unknown denominator mode {denominator!r}")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean ``-log softmax(logits)[label]`` over a batch ``(B, K)``."""
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs {labels.shape[0]} labels")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    picked = T.sum_axis(T.mul(T.log_softmax_rows(logits), Tensor(onehot)), axis=1)
    return -T.mean_pool_axis(picked)


def supcon_loss(query: Tensor, positives: Sequence, negatives: Sequence, tau: float,
                denominator: str = "negatives") -> Tensor:
    """``-(1/|P|) sum_+ log[exp(q.k+/tau) / sum_- exp(q.k-/tau)]``.

    With ``denominator="all"`` the sum in the denominator also runs over the
    positives (the usual SupCon convention).
    """
    if len(positives) == 0 or len(negatives) == 0:
        raise ContractError("supcon_loss: positives and negatives must be non-empty")
    q = T.reshape(query, (1, -1))
    pos = np.asarray(positives, dtype=np.float64)[None]
    neg = np.asarray(negatives, dtype=np.float64)[None]
    return T.reshape(supcon_loss_batch(q, pos, neg, tau, denominator), ())


def supcon_loss_batch(queries: Tensor, positives: np.ndarray, negatives: np.ndarray,
                      tau: float, denominator: str = "negatives") -> Tensor:
    """Per-sample :func:`supcon_loss` for ``(B, d)`` queries and ``(B, P, d)``/``(B, K, d)`` keys."""
    _check_denominator(denominator)
    if tau <= 0:
        raise DomainError(f"supcon_loss: tau must be positive, got {tau}")
    b, d = queries.shape
    if positives.ndim != 3 or negatives.ndim != 3 or positives.shape[0] != b or negatives.shape[0] != b \
            or positives.shape[2] != d or negatives.shape[2] != d:
        raise ShapeError(f"supcon_loss: queries {queries.shape} vs keys {positives.shape}, {negatives.shape}")
    if positives.shape[1] == 0 or negatives.shape[1] == 0:
        raise ContractError("supcon_loss: positives and negatives must be non-empty")
    q = T.reshape(queries, (b, 1, d))
    s_pos = T.scalar_mul(T.sum_axis(T.mul(q, Tensor(positives)), axis=2), 1.0 / tau)
    s_neg = T.scalar_mul(T.sum_axis(T.mul(q, Tensor(negatives)), axis=2), 1.0 / tau)
    pool = s_neg if denominator == "negatives" else T.concat_axis([s_pos, s_neg], axis=1)
    log_den = T.log(T.sum_axis(T.exp(pool), axis=1, keepdims=True))
    return -T.mean_pool_axis(s_pos - log_den, axis=1)


def _matched_keys(query: np.ndarray, blocks: np.ndarray) -> np.ndarray:
    """``blocks`` re-ordered so that row r of block j is the slice matched to query row r."""
    maps = batch_assignments(query, blocks)
    return np.take_along_axis(blocks, maps[:, :, None], axis=1)


def rare_loss(query_block: Tensor, positive_blocks: Sequence, negative_blocks: Sequence,
              tau: float, denominator: str = "negatives") -> Tensor:
    """Patch-level contrastive loss with optimally matched slices.

    All rows are unit-normalised first; every key block is then matched to the
    query block independently (Euclidean cost); for slice ``r`` the critic is ``exp(cos(q_r, k_match(r)) / tau)``.
    The loss is ``-(1/K+) sum_j (1/R) sum_r log[d_jr / sum_k d_kr]``. The
    matching is held fixed; gradients flow through the cosines only.
    """
    if len(positive_blocks) == 0 or len(negative_blocks) == 0:
        raise ContractError("rare_loss: positives and negatives must be non-empty")
    if query_block.ndim != 2:
        raise ShapeError(f"rare_loss: query block must be (R, d), got {query_block.shape}")
    pos = np.asarray(positive_blocks, dtype=np.float64)[None]
    neg = np.asarray(negative_blocks, dtype=np.float64)[None]
    qb = T.reshape(query_block, (1, *query_block.shape))
    return T.reshape(rare_loss_batch(qb, pos, neg, tau, denominator), ())


def rare_loss_batch(query_blocks: Tensor, positive_blocks: np.ndarray, negative_blocks: np.ndarray,
                    tau: float, denominator: str = "negatives") -> Tensor:
    """Per-sample :func:`rare_loss` for ``(B, R, d)`` queries and ``(B, P|K, R, d)`` key blocks."""
    _check_denominator(denominator)
    if tau <= 0:
        raise DomainError(f"rare_loss: tau must be positive, got {tau}")
    rd = query_blocks.shape[1:]
    b = query_blocks.shape[0]
    for name, keys in (("positives", positive_blocks), ("negatives", negative_blocks)):
        if keys.ndim != 4 or keys.shape[0] != b or keys.shape[2:] != rd:
            raise ShapeError(f"rare_loss: query blocks {query_blocks.shape} vs {name} {keys.shape}")
        if keys.shape[1] == 0:
            raise ContractError(f"rare_loss: {name} must be non-empty")
    keys = []
    for blocks in (positive_blocks, negative_blocks):
        norms = np.linalg.norm(blocks, axis=-1, keepdims=True)
        if (norms < T.NORM_EPS).any():
            raise DomainError("rare_loss: zero-norm key patch")
        keys.append(blocks / norms)
    q_unit = T.l2_normalize_rows(query_blocks)
    # matching on unit rows keeps the loss invariant to rescaling any patch
    pos_m = np.stack([_matched_keys(q_unit.data[i], keys[0][i]) for i in range(b)])
    neg_m = np.stack([_matched_keys(q_unit.data[i], keys[1][i]) for i in range(b)])
    qn = T.reshape(q_unit, (b, 1, *rd))
    s_pos = T.scalar_mul(T.sum_axis(T.mul(qn, Tensor(pos_m)), axis=3), 1.0 / tau)
    s_neg = T.scalar_mul(T.sum_axis(T.mul(qn, Tensor(neg_m)), axis=3), 1.0 / tau)
    pool = s_neg if denominator == "negatives" else T.concat_axis([s_pos, s_neg], axis=1)
    log_den = T.log(T.sum_axis(T.exp(pool), axis=1, keepdims=True))
    per_slice = T.mean_pool_axis(s_pos - log_den, axis=2)
    return -T.mean_pool_axis(per_slice, axis=1)


def frontdoor_ce(probabilities: Tensor, label) -> Tensor:
    """``-log(max(p[label], 1e-12))``; batch mean for ``(B, K)`` inputs."""
    probs = probabilities if probabilities.ndim == 2 else T.reshape(probabilities, (1, -1))
    labels = np.asarray(label, dtype=np.intp).reshape(-1)
    k = probs.shape[1]
    if labels.shape[0] != probs.shape[0]:
        raise ShapeError(f"frontdoor_ce: {probs.shape[0]} rows vs {labels.shape[0]} labels")
    if (labels < 0).any() or (labels >= k).any():
        raise ContractError(f"frontdoor_ce: label out of range [0, {k})")
    if np.abs(probs.data.sum(axis=1) - 1.0).max() > 1e-8:
        raise ContractError("frontdoor_ce: probabilities do not sum to 1")
    onehot = np.zeros(probs.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    picked = T.sum_axis(T.mul(probs, Tensor(onehot)), axis=1)
    return -T.mean_pool_axis(T.log(T.clamp_min(picked, CE_CLAMP)))


def kl_to_standard_normal(mu: Tensor, sigma: Tensor) -> Tensor:
    """``0.5 * sum(mu^2 + sigma^2 - log sigma^2 - 1)``; batch mean for 2-d inputs."""
    if mu.shape != sigma.shape:
        raise ShapeError(f"kl_to_standard_normal: mu {mu.shape} vs sigma {sigma.shape}")
    if (sigma.data <= 0).any():
        raise DomainError("kl_to_standard_normal: sigma must be strictly positive")
    var = T.square(sigma)
    inner = T.square(mu) + var - T.log(var) - 1.0
    per = T.scalar_mul(T.sum_axis(inner, axis=-1), 0.5)
    return per if per.ndim == 0 else T.mean_pool_axis(per)


@dataclass
class LossBreakdown:
    """Scalar parts of the objective and their weighted total.

    ``skipped`` names the parts that were absent (not warm, ablated or
    undefined for this batch) and therefore contributed zero.
    """

    l_ce: float = 0.0
    l_con: float = 0.0
    l_r: float = 0.0
    l_s_ce: float = 0.0
    l_s_kl: float = 0.0
    total: float = 0.0
    skipped: frozenset = field(default_factory=frozenset)
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def recompute(self, alpha: float, beta: float) -> float:
        """Total from the parts, in the same summation order as :func:`total_loss`."""
        acc = self.l_ce
        if "l_con" not in self.skipped:
            acc = acc + self.l_con
        if "l_r" not in self.skipped:
            acc = acc + alpha * self.l_r
        s_parts = [t for t in ("l_s_ce", "l_s_kl") if t not in self.skipped]
        if s_parts:
            s = getattr(self, s_parts[0])
            for t in s_parts[1:]:
                s = s + getattr(self, t)
            acc = acc + beta * s
        return acc


def _value(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def total_loss(parts: Mapping[str, Tensor | float | None], alpha: float, beta: float) -> LossBreakdown:
    """Combine parts as ``l_ce + l_con + alpha l_r + beta (l_s_ce + l_s_kl)``.

    Missing (``None`` or absent) parts contribute zero and are listed in
    ``skipped``. The differentiable total is attached as ``.tensor`` when any
    part is a tensor.

    Raises:
        NumericalError: if any present part is not finite.
    """
    unknown = set(parts) - set(TERMS)
    if unknown:
        raise ContractError(f"total_loss: unknown parts {sorted(unknown)}")
    present = {k: v for k, v in parts.items() if v is not None}
    for name, v in present.items():
        if not math.isfinite(_value(v)):
            raise NumericalError(f"loss term {name} is not finite ({_value(v)})")
    if "l_ce" not in present:
        raise ContractError("total_loss: l_ce is required")
    skipped = frozenset(t for t in TERMS if t not in present)

    def scale(x, c):
        return T.scalar_mul(x, c) if isinstance(x, Tensor) else c * x

    acc = present["l_ce"]
    if "l_con" in present:
        acc = acc + present["l_con"]
    if "l_r" in present:
        acc = acc + scale(present["l_r"], alpha)
    s_terms = [present[t] for t in ("l_s_ce", "l_s_kl") if t in present]
    if s_terms:
        s = s_terms[0]
        for t in s_terms[1:]:
            s = s + t
        acc = acc + scale(s, beta)

    vals = {t: _value(present[t]) if t in present else 0.0 for t in TERMS}
    return LossBreakdown(total=_value(acc), skipped=skipped,
                         tensor=acc if isinstance(acc, Tensor) else None, **vals)
