"""Contrastive objectives: plain InfoNCE and its expert-aware weighted form.

For a batch of B query/target pairs the negatives of query i are the other
B-1 targets (M = B-1). The weighted variant measures how closely a
negative's routing signature matches the query's (normalized L1), maps
that distance through an exponential decay to a weight in (w_min, w_max],
rescales the weights so each query's weights sum to exactly M, and folds
them into the softmax denominator as exp(log w + s/tau) inside one
stabilized log-sum-exp.

Weights are constants on the tape: the weighting redistributes gradient
across negatives without routing any gradient into the gate through the
distance computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .moe_lora import RoutingSignature
from .numcore import Tensor, diag_part, logsumexp_rows, matmul


@dataclass(frozen=True)
class EansParams:
    w_min: float = 0.1
    w_max: float = 10.0
    sigma: float = 0.002

    def __post_init__(self):
        if self.w_min < 0:
            raise ValueError("w_min must be >= 0")
        if self.w_max <= self.w_min:
            raise ValueError("w_max must exceed w_min")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


@dataclass
class ContrastiveBatch:
    query_embeddings: Tensor  # (B, d), unit rows
    target_embeddings: Tensor  # (B, d), unit rows
    temperature: float = 0.05
    query_signatures: list[RoutingSignature] | None = None
    target_signatures: list[RoutingSignature] | None = None

    def __post_init__(self):
        q, t = self.query_embeddings, self.target_embeddings
        if q.ndim != 2 or t.ndim != 2 or q.shape != t.shape:
            raise ValueError(f"embeddings must be matching (B, d) matrices, got {q.shape} and {t.shape}")
        if q.shape[0] < 2:
            raise ValueError("batch needs B >= 2 (at least one in-batch negative)")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        for name, e in (("query", q), ("target", t)):
            norms = np.sqrt((e.data * e.data).sum(axis=1))
            if np.abs(norms - 1.0).max() > 1e-6:
                raise ValueError(f"{name} embeddings must be L2-normalized")
        for name, sigs in (("query", self.query_signatures), ("target", self.target_signatures)):
            if sigs is not None and len(sigs) != q.shape[0]:
                raise ValueError(f"{name}_signatures length must equal batch size")

    @property
    def batch_size(self) -> int:
        return self.query_embeddings.shape[0]

    @property
    def num_negatives(self) -> int:
        return self.batch_size - 1


def _logits(batch: ContrastiveBatch) -> Tensor:
    sims = matmul(batch.query_embeddings, batch.target_embeddings.transpose_last2())
    return sims * (1.0 / batch.temperature)


def infonce(batch: ContrastiveBatch) -> Tensor:
    """Mean softmax contrastive loss with in-batch negatives.

    Per query: -log(exp(s+/tau) / (exp(s+/tau) + sum_i exp(s_i-/tau))),
    computed as logsumexp(row) - positive logit.
    """
    logits = _logits(batch)
    return (logsumexp_rows(logits) - diag_part(logits)).mean()


def routing_distance(r_q: RoutingSignature, r_i: RoutingSignature) -> float:
    """Normalized L1 distance between signatures, in [0, 2/N].

    Sum of |r_q - r_i| over the included (layer, site) slots divided by
    L_included * G * N; zero iff the included slots coincide.
    """
    if r_q.shape != r_i.shape:
        raise ValueError(f"signature shapes differ: {r_q.shape} vs {r_i.shape}")
    if not np.array_equal(r_q.layer_mask, r_i.layer_mask):
        raise ValueError("signature layer masks differ")
    diff = np.abs(r_q.included_flat() - r_i.included_flat()).sum()
    return float(diff / r_q.included_denominator())


def decay_weight(d: float, params: EansParams) -> float:
    """Exponential decay of distance into a weight in (w_min, w_max].

    w = w_min + (w_max - w_min) * exp(-d / sigma): hard negatives (small d)
    approach w_max, distant ones decay toward w_min. Evaluated via expm1 so
    d = 0 returns w_max exactly.
    """
    if d < 0:
        raise ValueError("distance must be non-negative")
    return params.w_max + (params.w_min - params.w_max) * (-math.expm1(-d / params.sigma))


def normalize_weights(w: np.ndarray) -> np.ndarray:
    """Rescale positive weights so they sum to exactly M (their count).

    Invariant to uniform scaling of the input, so only the weight *profile*
    matters; the aggregate negative mass in the loss denominator stays M.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size < 1:
        raise ValueError("weights must be a non-empty vector")
    if (w <= 0).any():
        raise ValueError("weights must be strictly positive")
    total = w.sum()
    if total <= 0 or not np.isfinite(total):
        raise ValueError("weight sum must be positive and finite")
    return w * (w.size / total)


def signature_distance_matrix(
    query_sigs: list[RoutingSignature], target_sigs: list[RoutingSignature]
) -> np.ndarray:
    """[B, B] matrix of routing distances d(r_qi, r_tj)."""
    ref = query_sigs[0]
    for s in list(query_sigs) + list(target_sigs):
        if s.shape != ref.shape or not np.array_equal(s.layer_mask, ref.layer_mask):
            raise ValueError("all signatures must share shape and layer mask")
    q = np.stack([s.included_flat() for s in query_sigs])
    t = np.stack([s.included_flat() for s in target_sigs])
    return kernels.pairwise_l1(q, t) / ref.included_denominator()


def eans_weight_matrix(distances: np.ndarray, params: EansParams) -> np.ndarray:
    """Per-query normalized negative weights from a [B, B] distance matrix.

    Row i holds the weights of query i's negatives (the off-diagonal
    targets), each row renormalized to sum to M = B - 1. Diagonal is 1.
    """
    b = distances.shape[0]
    raw = params.w_max + (params.w_min - params.w_max) * (-np.expm1(-distances / params.sigma))
    off = ~np.eye(b, dtype=bool)
    out = np.ones_like(raw)
    for i in range(b):
        out[i, off[i]] = normalize_weights(raw[i, off[i]])
    return out


def eans(batch: ContrastiveBatch, params: EansParams) -> Tensor:
    """Expert-aware weighted InfoNCE.

    Each negative logit s-/tau is shifted by log(w~) before the
    log-sum-exp, which multiplies its denominator term by the normalized
    weight. Weights derive from detached routing signatures and carry no
    gradient.
    """
    if batch.query_signatures is None or batch.target_signatures is None:
        raise ValueError("eans requires query and target routing signatures")
    distances = signature_distance_matrix(batch.query_signatures, batch.target_signatures)
    weights = eans_weight_matrix(distances, params)
    bias = np.log(weights)
    np.fill_diagonal(bias, 0.0)
    logits = _logits(batch) + Tensor(bias)
    return (logsumexp_rows(logits) - diag_part(logits)).mean()


def staged_loss(
    batch: ContrastiveBatch, params: EansParams, step: int, t_warmup: int
) -> Tensor:
    """Piecewise objective: InfoNCE while step < t_warmup, weighted loss after."""
    if step < 0 or t_warmup < 0:
        raise ValueError("step and t_warmup must be non-negative")
    if step < t_warmup:
        return infonce(batch)
    return eans(batch, params)
