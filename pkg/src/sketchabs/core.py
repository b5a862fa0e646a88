"""Matrix embeddings, row normalisation and the masked matrix distance.

A feature matrix is a ``(k, d)`` float array whose rows run from coarse to
fine. Batches are ``(B, k, d)``. Masks are length-``k`` vectors with entries
in ``[0, 1]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

K_STRUCT = 9
K_TOTAL = 14


class InvalidInputError(ValueError):
    """Raised for non-finite values or malformed shapes."""


class EmptyBatchError(InvalidInputError):
    pass


@dataclass(frozen=True)
class EmbeddingConfig:
    d: int = 16
    k_struct: int = K_STRUCT
    k_total: int = K_TOTAL
    group_sizes: tuple[int, int, int] = (3, 3, 3)

    def __post_init__(self):
        if self.d < 1:
            raise InvalidInputError(f"d must be positive, got {self.d}")
        if len(self.group_sizes) != 3 or any(g < 0 for g in self.group_sizes):
            raise InvalidInputError(f"bad group_sizes {self.group_sizes}")
        if sum(self.group_sizes) != self.k_struct:
            raise InvalidInputError(
                f"group_sizes {self.group_sizes} must sum to k_struct={self.k_struct}")
        if self.k_struct > self.k_total:
            raise InvalidInputError("k_struct must not exceed k_total")


def _check_finite(x, name="input"):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return x


def _unit_rows(m):
    # pre-scale by the largest entry so tiny rows do not underflow
    peak = np.max(np.abs(m), axis=-1, keepdims=True)
    nonzero = peak > 0.0
    scaled = m / np.where(nonzero, peak, 1.0)
    norms = np.linalg.norm(scaled, axis=-1, keepdims=True)
    v = np.where(nonzero, scaled / np.where(nonzero, norms, 1.0), 0.0)
    return v, norms * peak, nonzero


def row_l2_normalize(m):
    """Scale every non-zero row of ``m`` (last axis) to unit Euclidean norm.

    Zero rows are returned unchanged. Works on a single matrix or a batch.
    """
    return _unit_rows(_check_finite(m, "feature matrix"))[0]


def row_l2_normalize_backward(m, grad_out):
    """Vector-Jacobian product of :func:`row_l2_normalize`."""
    v, norms, nonzero = _unit_rows(np.asarray(m, dtype=np.float64))
    safe = np.where(nonzero, norms, 1.0)
    radial = np.sum(grad_out * v, axis=-1, keepdims=True)
    return np.where(nonzero, (grad_out - radial * v) / safe, 0.0)


def _as_mask(mask, k):
    if mask is None:
        return np.ones(k)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (k,):
        raise InvalidInputError(f"mask must have shape ({k},), got {mask.shape}")
    if np.any(mask < 0.0) or np.any(mask > 1.0):
        raise InvalidInputError("mask entries must lie in [0, 1]")
    return mask


def matrix_distance(m1, m2, mask9=None):
    """Masked Frobenius distance ``sqrt(sum_r mask[r] * ||m1_r - m2_r||^2)``."""
    m1 = _check_finite(m1, "m1")
    m2 = _check_finite(m2, "m2")
    if m1.shape != m2.shape or m1.ndim != 2:
        raise InvalidInputError(f"shape mismatch: {m1.shape} vs {m2.shape}")
    mask = _as_mask(mask9, m1.shape[0])
    row_sq = np.sum((m1 - m2) ** 2, axis=1)
    return float(np.sqrt(np.dot(mask, row_sq)))


def pairwise_row_sq(sketches, photos):
    """Squared row gaps ``E[i, j, r] = ||s_i,r - p_j,r||^2`` for two batches."""
    diff = sketches[:, None, :, :] - photos[None, :, :, :]
    return np.einsum("ijrd,ijrd->ijr", diff, diff)


def pairwise_batch_distances(sketches, photos, masks=None):
    """Distance matrix whose entry ``(i, j)`` uses sketch ``i``'s mask.

    Returns ``(B, B)`` with the true pairs on the diagonal.
    """
    sketches = _check_finite(sketches, "sketches")
    photos = _check_finite(photos, "photos")
    if sketches.ndim != 3 or sketches.shape != photos.shape:
        raise InvalidInputError(
            f"expected matching (B, k, d) batches, got {sketches.shape} and {photos.shape}")
    b, k, _ = sketches.shape
    if b == 0:
        raise EmptyBatchError("empty batch")
    if masks is None:
        masks = np.ones((b, k))
    masks = np.asarray(masks, dtype=np.float64)
    if masks.shape != (b, k):
        raise InvalidInputError(f"masks must have shape ({b}, {k}), got {masks.shape}")
    row_sq = pairwise_row_sq(sketches, photos)
    return np.sqrt(np.einsum("ir,ijr->ij", masks, row_sq))


def pairwise_batch_distances_backward(sketches, photos, masks, dist, grad_dist):
    """Gradients of a scalar w.r.t. sketches, photos and masks given dL/dD.

    Entries with zero distance get zero gradient (subgradient choice).
    """
    safe = np.where(dist > 0.0, dist, 1.0)
    g = np.where(dist > 0.0, grad_dist / (2.0 * safe), 0.0)  # dL/d(D^2)
    diff = sketches[:, None, :, :] - photos[None, :, :, :]
    # d(D_ij^2)/d s_i,r = 2 * mask_i,r * (s_i,r - p_j,r)
    weighted = 2.0 * g[:, :, None, None] * masks[:, None, :, None] * diff
    grad_s = weighted.sum(axis=1)
    grad_p = -weighted.sum(axis=0)
    row_sq = np.einsum("ijrd,ijrd->ijr", diff, diff)
    grad_mask = np.einsum("ij,ijr->ir", g, row_sq)
    return grad_s, grad_p, grad_mask
