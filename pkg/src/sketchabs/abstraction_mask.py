"""Abstraction head and the differentiable row-selection mask.

Pipeline: logits -> Gumbel-softmax (straight-through argmax) -> reversed
cumulative sum -> per-group repeat -> row scaling of the feature matrix.
Every step has a matching ``*_backward`` helper so gradients can be chained
by hand.
"""
from __future__ import annotations

import enum

import numpy as np

from .core import InvalidInputError


class Level(enum.IntEnum):
    COARSE = 0
    MID = 1
    FINE = 2

    @property
    def completion(self) -> float:
        return LEVEL_COMPLETION[self]

    def one_hot(self):
        v = np.zeros(3)
        v[int(self)] = 1.0
        return v


LEVEL_COMPLETION = {Level.COARSE: 0.30, Level.MID: 0.60, Level.FINE: 1.00}


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(probs, grad_out):
    """VJP of softmax given its output ``probs``."""
    inner = np.sum(grad_out * probs, axis=-1, keepdims=True)
    return probs * (grad_out - inner)


def abstraction_head_forward(pooled, head_params):
    """Affine map from the pooled sketch feature to three level logits.

    ``head_params`` is ``(weight, bias)`` with weight shaped ``(3, d)``.
    ``pooled`` may be a single vector or a ``(B, d)`` batch.
    """
    weight, bias = head_params
    pooled = np.asarray(pooled, dtype=np.float64)
    if not np.all(np.isfinite(pooled)):
        raise InvalidInputError("pooled feature contains non-finite values")
    return pooled @ np.asarray(weight).T + np.asarray(bias)


def sample_gumbel(rng, shape):
    # -log(-log U) with U in the open interval (0, 1)
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def gumbel_softmax_sample(logits, temperature, noise):
    """Relaxed sample ``softmax((logits + noise) / temperature)``."""
    if temperature <= 0:
        raise InvalidInputError(f"temperature must be positive, got {temperature}")
    return softmax((np.asarray(logits, dtype=np.float64) + noise) / temperature)


def hard_one_hot(probs):
    idx = np.argmax(probs, axis=-1)
    out = np.zeros_like(np.asarray(probs, dtype=np.float64))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def gumbel_argmax(logits, temperature=1.0, hard=True, rng=None, noise=None):
    """Gumbel-softmax draw; one-hot in hard mode.

    Supply either ``rng`` or a fixed ``noise`` array. The hard output carries
    the soft sample's gradient (see :func:`gumbel_argmax_backward`).
    """
    if temperature <= 0:
        raise InvalidInputError(f"temperature must be positive, got {temperature}")
    logits = np.asarray(logits, dtype=np.float64)
    if noise is None:
        if rng is None:
            raise InvalidInputError("gumbel_argmax needs rng or noise")
        noise = sample_gumbel(rng, logits.shape)
    soft = gumbel_softmax_sample(logits, temperature, noise)
    return hard_one_hot(soft) if hard else soft


def gumbel_argmax_backward(soft, grad_out, temperature):
    """Gradient w.r.t. logits; identical for the hard and soft outputs."""
    return softmax_backward(soft, grad_out) / temperature


def gumbel_jacobian(soft, temperature):
    """Jacobian ``d sample / d logits`` for a single soft sample."""
    soft = np.asarray(soft, dtype=np.float64)
    return (np.diag(soft) - np.outer(soft, soft)) / temperature


def build_selection_mask(a_hat):
    """``flip(cumsum(flip(a_hat)))``: entry j is the mass on levels >= j."""
    a_hat = np.asarray(a_hat, dtype=np.float64)
    return np.flip(np.cumsum(np.flip(a_hat, axis=-1), axis=-1), axis=-1)


def build_selection_mask_backward(grad_mask3):
    # d mask3[j] / d a_hat[i] = 1 for i >= j
    return np.cumsum(grad_mask3, axis=-1)


def expand_mask(mask3, group_sizes=(3, 3, 3)):
    """Repeat each of the three level entries over its group of rows."""
    mask3 = np.asarray(mask3, dtype=np.float64)
    if mask3.shape[-1] != 3 or len(group_sizes) != 3:
        raise InvalidInputError("expand_mask needs a 3-entry mask and 3 group sizes")
    if sum(group_sizes) != 9 or any(g < 0 for g in group_sizes):
        raise InvalidInputError(f"group sizes {tuple(group_sizes)} must be >= 0 and sum to 9")
    return np.repeat(mask3, group_sizes, axis=-1)


def expand_mask_backward(grad_mask9, group_sizes=(3, 3, 3)):
    bounds = np.cumsum((0,) + tuple(group_sizes))
    parts = [grad_mask9[..., bounds[i]:bounds[i + 1]].sum(axis=-1) for i in range(3)]
    return np.stack(parts, axis=-1)


def apply_mask(m, mask9):
    """Scale row r of ``m`` by ``mask9[r]`` (batched over leading axes)."""
    m = np.asarray(m, dtype=np.float64)
    mask9 = np.asarray(mask9, dtype=np.float64)
    if m.shape[:-1] != mask9.shape:
        raise InvalidInputError(f"mask shape {mask9.shape} does not match rows {m.shape[:-1]}")
    return m * mask9[..., None]


def level_mask9(level, group_sizes=(3, 3, 3)):
    """Binary 9-row mask for a discrete level."""
    return expand_mask(build_selection_mask(Level(level).one_hot()), group_sizes)
