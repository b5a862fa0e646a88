"""Differentiable Acc.@q surrogate and the exact top-q accuracy it approximates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .abstraction_mask import Level
from .core import EmptyBatchError, InvalidInputError

# |x / tau| beyond this saturates to exactly 0 or 1 with zero slope
SIGMOID_CLAMP = 60.0

LEVEL_Q = {Level.COARSE: 10, Level.MID: 5, Level.FINE: 1}


@dataclass(frozen=True)
class AccqConfig:
    q: int = 1
    tau1: float = 1.0
    tau2: float = 0.01

    def __post_init__(self):
        if self.q < 1:
            raise InvalidInputError(f"q must be >= 1, got {self.q}")
        if self.tau1 <= 0 or self.tau2 <= 0:
            raise InvalidInputError("temperatures must be positive")


def q_for_levels(levels, level_q=None):
    """Map ground-truth levels to per-query rank thresholds."""
    level_q = LEVEL_Q if level_q is None else level_q
    return np.array([level_q[Level(int(lv))] for lv in levels], dtype=np.float64)


def smooth_sigmoid(x, tau):
    """``1 / (1 + exp(-x / tau))`` with the exponent clamped to +-60."""
    if tau <= 0:
        raise InvalidInputError(f"tau must be positive, got {tau}")
    z = np.clip(np.asarray(x, dtype=np.float64) / tau, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    out = 1.0 / (1.0 + np.exp(-z))
    return float(out) if np.ndim(out) == 0 else out


def smooth_sigmoid_grad(x, tau):
    """Derivative ``S (1 - S) / tau``, exactly zero outside the clamp."""
    z = np.asarray(x, dtype=np.float64) / tau
    s = 1.0 / (1.0 + np.exp(-np.clip(z, -SIGMOID_CLAMP, SIGMOID_CLAMP)))
    out = np.where(np.abs(z) > SIGMOID_CLAMP, 0.0, s * (1.0 - s) / tau)
    return float(out) if np.ndim(out) == 0 else out


def soft_rank(rel_dist, tau2):
    """Soft count of candidates closer than the target, plus 0.5 for self."""
    rel_dist = np.asarray(rel_dist, dtype=np.float64)
    if rel_dist.size == 0:
        raise EmptyBatchError("soft_rank needs at least one entry")
    return float(np.sum(smooth_sigmoid(rel_dist, tau2)))


def accq_loss(dist, q_per_query, tau1=1.0, tau2=0.01):
    """Negative mean smoothed top-q indicator over a batch.

    ``dist[i, j]`` is the distance from query i to gallery item j; true pairs
    sit on the diagonal. Returns ``(loss, grad)`` where ``grad`` is dL/d dist.
    """
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise InvalidInputError(f"distance matrix must be square, got {dist.shape}")
    b = dist.shape[0]
    if b == 0:
        raise EmptyBatchError("empty batch")
    if not np.all(np.isfinite(dist)):
        raise InvalidInputError("distance matrix contains non-finite values")
    q = np.broadcast_to(np.asarray(q_per_query, dtype=np.float64), (b,))

    rel = np.diag(dist)[:, None] - dist
    rank = np.sum(smooth_sigmoid(rel, tau2), axis=1)
    acc = smooth_sigmoid(q - rank, tau1)
    loss = -float(np.sum(acc)) / b

    # chain: loss <- acc_i <- rank_i <- rel_ij <- (dist_ii, dist_ij)
    g_rank = np.atleast_1d(smooth_sigmoid_grad(q - rank, tau1)) / b
    g_rel = g_rank[:, None] * smooth_sigmoid_grad(rel, tau2)
    grad = -g_rel
    # rel_ii is identically zero, so its own term cancels on the diagonal
    grad[np.diag_indices(b)] += g_rel.sum(axis=1)
    return loss, grad


def hard_rank(distances, true_index):
    """1 + number of gallery items strictly closer than the true item."""
    distances = np.asarray(distances, dtype=np.float64)
    if not 0 <= true_index < distances.shape[-1]:
        raise InvalidInputError(
            f"true index {true_index} out of range for gallery of {distances.shape[-1]}")
    return 1 + int(np.sum(distances < distances[true_index]))


def hard_ranks(dist_matrix, true_indices):
    dist_matrix = np.asarray(dist_matrix, dtype=np.float64)
    true_indices = np.asarray(true_indices)
    n = dist_matrix.shape[1]
    if np.any(true_indices < 0) or np.any(true_indices >= n):
        raise InvalidInputError(f"true index out of range for gallery of {n}")
    target = dist_matrix[np.arange(len(true_indices)), true_indices]
    return 1 + np.sum(dist_matrix < target[:, None], axis=1)


def exact_accuracy_at_q(distances_per_query, true_indices, q):
    """Fraction of queries whose true item ranks within the top ``q``."""
    ranks = [hard_rank(d, t) for d, t in zip(distances_per_query, true_indices)]
    if not ranks:
        raise EmptyBatchError("no queries")
    return float(np.mean(np.asarray(ranks) <= q))


def batch_accuracy_at_q(dist, q_per_query):
    """Exact Acc@q over a square batch with the true pairs on the diagonal."""
    dist = np.asarray(dist, dtype=np.float64)
    ranks = hard_ranks(dist, np.arange(dist.shape[0]))
    q = np.broadcast_to(np.asarray(q_per_query), ranks.shape)
    return float(np.mean(ranks <= q))
