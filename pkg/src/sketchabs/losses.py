"""Triplet, abstraction-identification and reconstruction losses.

Each loss returns its value together with the gradients needed by the
trainer, so the training loop never relies on an autodiff engine.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .abstraction_mask import softmax
from .core import K_TOTAL, InvalidInputError

CE_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    recons: float = 0.5
    accq: float = 1.0
    abs: float = 0.5

    def __post_init__(self):
        if min(self.recons, self.accq, self.abs) < 0:
            raise InvalidInputError("loss weights must be non-negative")


@dataclass(frozen=True)
class TripletConfig:
    mu: float = 0.3

    def __post_init__(self):
        if self.mu <= 0:
            raise InvalidInputError(f"triplet margin must be positive, got {self.mu}")


def _masked_gap(a, b, mask9):
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if mask9 is None:
        w = np.ones_like(diff)
    else:
        w = np.broadcast_to(np.asarray(mask9, dtype=np.float64)[:, None], diff.shape)
    dist = float(np.sqrt(np.sum(w * diff * diff)))
    # d dist / d a; zero at coincidence
    grad = w * diff / dist if dist > 0 else np.zeros_like(diff)
    return dist, grad


def triplet_loss(f_s, f_p, f_n, mu=0.3, mask9=None):
    """Hinge ``max(0, mu + d(s, p) - d(s, n))``.

    Works on vectors or on matrices (with an optional row mask). Returns
    ``(value, (grad_s, grad_p, grad_n))``; gradients vanish when inactive.
    """
    shapes = {np.shape(f_s), np.shape(f_p), np.shape(f_n)}
    if len(shapes) != 1:
        raise InvalidInputError(f"triplet inputs must share a shape, got {shapes}")
    d_sp, g_sp = _masked_gap(f_s, f_p, mask9)
    d_sn, g_sn = _masked_gap(f_s, f_n, mask9)
    value = mu + d_sp - d_sn
    if value <= 0:
        zero = np.zeros_like(g_sp)
        return 0.0, (zero, zero.copy(), zero.copy())
    return float(value), (g_sp - g_sn, -g_sp, g_sn)


def batch_triplet_loss(dist, negatives, mu=0.3):
    """Mean hinge over queries using ``dist[i, negatives[i]]`` as the negative.

    Returns ``(loss, grad)`` with ``grad`` shaped like ``dist``.
    """
    dist = np.asarray(dist, dtype=np.float64)
    b = dist.shape[0]
    rows = np.arange(b)
    negatives = np.asarray(negatives)
    if np.any(negatives == rows):
        raise InvalidInputError("a query's negative must differ from its positive")
    margin = mu + dist[rows, rows] - dist[rows, negatives]
    active = margin > 0
    grad = np.zeros_like(dist)
    grad[rows, rows] += active / b
    grad[rows, negatives] -= active / b
    return float(np.sum(np.where(active, margin, 0.0)) / b), grad


def abstraction_ce_loss(a_hat, a_gt):
    """``-(1/3) log a_hat[true]`` with probabilities clamped at 1e-12.

    Returns ``(value, grad_a_hat)``.
    """
    a_hat = np.asarray(a_hat, dtype=np.float64)
    a_gt = np.asarray(a_gt, dtype=np.float64)
    if a_hat.shape != (3,) or a_gt.shape != (3,):
        raise InvalidInputError("abstraction distributions must have 3 entries")
    clamped = np.maximum(a_hat, CE_EPS)
    value = -float(np.dot(a_gt, np.log(clamped))) / 3.0
    grad = np.where(a_hat > CE_EPS, -a_gt / (3.0 * clamped), 0.0)
    return value, grad


def abstraction_ce_from_logits(logits, levels):
    """Batch mean of the abstraction loss on softmax(logits).

    Returns ``(loss, probs, grad_logits)``.
    """
    probs = softmax(logits)
    b = probs.shape[0]
    levels = np.asarray(levels, dtype=int)
    p_true = np.maximum(probs[np.arange(b), levels], CE_EPS)
    loss = -float(np.sum(np.log(p_true))) / (3.0 * b)
    onehot = np.zeros_like(probs)
    onehot[np.arange(b), levels] = 1.0
    return loss, probs, (probs - onehot) / (3.0 * b)


def allowed_row_counts(group_sizes=(3, 3, 3)):
    return {int(c) for c in np.cumsum(group_sizes) if c > 0}


def pad_latent(masked, n, rng=None, group_sizes=(3, 3, 3), noise=None):
    """Keep the first ``n`` rows and fill rows ``n..13`` with N(0, 1) draws.

    ``noise`` (shape ``(14 - n, d)``) replaces the RNG draw when given.
    """
    masked = np.asarray(masked, dtype=np.float64)
    if masked.ndim != 2 or masked.shape[0] < n:
        raise InvalidInputError(f"cannot take {n} rows from matrix of shape {masked.shape}")
    if n not in allowed_row_counts(group_sizes):
        raise InvalidInputError(
            f"row count {n} not in {sorted(allowed_row_counts(group_sizes))}")
    d = masked.shape[1]
    if noise is None:
        if rng is None:
            raise InvalidInputError("pad_latent needs rng or noise")
        noise = rng.standard_normal((K_TOTAL - n, d))
    return np.concatenate([masked[:n], noise], axis=0)


class LinearGenerator:
    """Frozen random linear map from a 14 x d latent to an output vector.

    Entries are N(0, 1/(14 d)) from ``seed``. The weight array is read-only
    so one instance can be shared across threads.
    """

    def __init__(self, d, d_img, seed=0, k_total=K_TOTAL):
        self.d = d
        self.d_img = d_img
        self.k_total = k_total
        rng = np.random.default_rng(seed)
        fan_in = k_total * d
        weight = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(d_img, fan_in))
        weight.setflags(write=False)
        self.weight = weight

    def __call__(self, latent):
        latent = np.asarray(latent, dtype=np.float64)
        flat = latent.reshape(latent.shape[:-2] + (-1,))
        if flat.shape[-1] != self.weight.shape[1]:
            raise InvalidInputError(
                f"generator expects {self.k_total}x{self.d} latent, got {latent.shape[-2:]}")
        return flat @ self.weight.T

    def backward(self, grad_out):
        grad = np.asarray(grad_out) @ self.weight
        return grad.reshape(grad.shape[:-1] + (self.k_total, self.d))


def _recon_term(target, output):
    resid = target - output
    norm = float(np.linalg.norm(resid))
    # d ||target - output|| / d output
    g_out = -resid / norm if norm > 0 else np.zeros_like(resid)
    return norm, g_out


def reconstruction_loss(latent_s, latent_p, photo_target, gen, n=None):
    """``||p - G(latent_s)|| + ||p - G(latent_p)||``.

    Returns ``(value, grad_s, grad_p)``. With ``n`` given, gradient rows from
    ``n`` onwards (the Gaussian padding) are zeroed.
    """
    photo_target = np.asarray(photo_target, dtype=np.float64)
    out_s, out_p = gen(latent_s), gen(latent_p)
    if out_s.shape != photo_target.shape:
        raise InvalidInputError(
            f"generator output {out_s.shape} does not match target {photo_target.shape}")
    r_s, g_s = _recon_term(photo_target, out_s)
    r_p, g_p = _recon_term(photo_target, out_p)
    grad_s, grad_p = gen.backward(g_s), gen.backward(g_p)
    if n is not None:
        grad_s[n:] = 0.0
        grad_p[n:] = 0.0
    return r_s + r_p, grad_s, grad_p


def batch_reconstruction_loss(latents_s, latents_p, targets, gen, row_counts):
    """Batch mean of :func:`reconstruction_loss`; gradients only on kept rows."""
    targets = np.asarray(targets, dtype=np.float64)
    out_s, out_p = gen(latents_s), gen(latents_p)
    if out_s.shape != targets.shape:
        raise InvalidInputError(
            f"generator output {out_s.shape} does not match targets {targets.shape}")
    b = targets.shape[0]
    res_s, res_p = targets - out_s, targets - out_p
    n_s = np.linalg.norm(res_s, axis=1)
    n_p = np.linalg.norm(res_p, axis=1)
    g_s = -res_s / np.where(n_s > 0, n_s, 1.0)[:, None] / b
    g_p = -res_p / np.where(n_p > 0, n_p, 1.0)[:, None] / b
    grad_s, grad_p = gen.backward(g_s), gen.backward(g_p)
    keep = np.arange(gen.k_total)[None, :] < np.asarray(row_counts)[:, None]
    grad_s *= keep[:, :, None]
    grad_p *= keep[:, :, None]
    return float(np.sum(n_s + n_p)) / b, grad_s, grad_p


def total_loss(recons, accq, abs_, weights=LossWeights()):
    return weights.recons * recons + weights.accq * accq + weights.abs * abs_

