"""Toy two-branch matrix-embedding model with a hand-written backward pass.

Shared backbone: two affine + LeakyReLU layers, ``D_obs -> hidden -> r*d``.
Each branch owns nine affine heads ``r*d -> d``; stacking their outputs and
normalising rows gives the ``9 x d`` feature matrix. The abstraction head
reads the backbone feature mean-pooled over its ``r`` chunks of size ``d``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .abstraction_mask import abstraction_head_forward
from .core import K_STRUCT, InvalidInputError, row_l2_normalize, row_l2_normalize_backward

LEAK = 0.2

PARAM_ORDER = (
    "backbone_w1", "backbone_b1", "backbone_w2", "backbone_b2",
    "sketch_w", "sketch_b", "photo_w", "photo_b",
    "abs_w", "abs_b",
)


@dataclass(frozen=True)
class ModelConfig:
    d_obs: int = 32
    hidden: int = 64
    d: int = 16
    r: int = 4

    @property
    def feat_dim(self) -> int:
        return self.d * self.r

    def shapes(self) -> dict[str, tuple[int, ...]]:
        f = self.feat_dim
        return {
            "backbone_w1": (self.hidden, self.d_obs), "backbone_b1": (self.hidden,),
            "backbone_w2": (f, self.hidden), "backbone_b2": (f,),
            "sketch_w": (K_STRUCT, self.d, f), "sketch_b": (K_STRUCT, self.d),
            "photo_w": (K_STRUCT, self.d, f), "photo_b": (K_STRUCT, self.d),
            "abs_w": (3, self.d), "abs_b": (3,),
        }


class ModelParams(dict):
    """Named parameter arrays in a fixed declaration order."""

    def __init__(self, config: ModelConfig, arrays=None):
        super().__init__()
        self.config = config
        shapes = config.shapes()
        arrays = arrays or {}
        for name in PARAM_ORDER:
            arr = np.asarray(arrays.get(name, np.zeros(shapes[name])), dtype=np.float64)
            if arr.shape != shapes[name]:
                raise InvalidInputError(f"{name}: expected {shapes[name]}, got {arr.shape}")
            self[name] = arr.copy()

    def copy(self):
        return ModelParams(self.config, self)

    def zeros_like(self):
        return ModelParams(self.config)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.values())


def init_params(config: ModelConfig, rng) -> ModelParams:
    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    f = config.feat_dim
    s = config.shapes()
    return ModelParams(config, {
        "backbone_w1": he(s["backbone_w1"], config.d_obs),
        "backbone_w2": he(s["backbone_w2"], config.hidden),
        "sketch_w": rng.normal(0.0, 1.0 / np.sqrt(f), size=s["sketch_w"]),
        "photo_w": rng.normal(0.0, 1.0 / np.sqrt(f), size=s["photo_w"]),
        "abs_w": rng.normal(0.0, 1.0 / np.sqrt(config.d), size=s["abs_w"]),
    })


def _leaky(x):
    return np.where(x > 0, x, LEAK * x)


def _leaky_grad(x):
    return np.where(x > 0, 1.0, LEAK)


def backbone_forward(params, x):
    a1 = x @ params["backbone_w1"].T + params["backbone_b1"]
    h1 = _leaky(a1)
    a2 = h1 @ params["backbone_w2"].T + params["backbone_b2"]
    return _leaky(a2), (x, a1, h1, a2)


def backbone_backward(params, cache, grad_feat, grads):
    x, a1, h1, a2 = cache
    g2 = grad_feat * _leaky_grad(a2)
    grads["backbone_w2"] += g2.T @ h1
    grads["backbone_b2"] += g2.sum(axis=0)
    g1 = (g2 @ params["backbone_w2"]) * _leaky_grad(a1)
    grads["backbone_w1"] += g1.T @ x
    grads["backbone_b1"] += g1.sum(axis=0)


def heads_forward(params, feat, branch):
    w, b = params[f"{branch}_w"], params[f"{branch}_b"]
    return np.einsum("kdf,bf->bkd", w, feat) + b


def heads_backward(params, feat, grad_raw, branch, grads):
    grads[f"{branch}_w"] += np.einsum("bkd,bf->kdf", grad_raw, feat)
    grads[f"{branch}_b"] += grad_raw.sum(axis=0)
    return np.einsum("bkd,kdf->bf", grad_raw, params[f"{branch}_w"])


def pool(feat, config: ModelConfig):
    return feat.reshape(feat.shape[0], config.r, config.d).mean(axis=1)


def pool_backward(grad_pooled, config: ModelConfig):
    return np.tile(grad_pooled / config.r, (1, config.r))


def _check_obs(x, config):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != config.d_obs:
        raise InvalidInputError(f"observation dim {x.shape[-1]} != d_obs {config.d_obs}")
    return x


def encode(params, x, branch):
    """Batch encode ``(B, D_obs)`` observations -> ``(matrices, pooled, cache)``."""
    if branch not in ("sketch", "photo"):
        raise InvalidInputError(f"unknown branch {branch!r}")
    x = _check_obs(np.atleast_2d(x), params.config)
    feat, bb_cache = backbone_forward(params, x)
    raw = heads_forward(params, feat, branch)
    return row_l2_normalize(raw), pool(feat, params.config), (feat, bb_cache, raw)


def encode_backward(params, cache, grad_m, grad_pooled, branch, grads):
    feat, bb_cache, raw = cache
    grad_raw = row_l2_normalize_backward(raw, grad_m)
    grad_feat = heads_backward(params, feat, grad_raw, branch, grads)
    if grad_pooled is not None:
        grad_feat = grad_feat + pool_backward(grad_pooled, params.config)
    backbone_backward(params, bb_cache, grad_feat, grads)


def forward(x, branch, params):
    """Single observation -> (9 x d feature matrix, pooled d-vector)."""
    x = _check_obs(x, params.config)
    if x.ndim != 1:
        raise InvalidInputError("forward takes one observation vector")
    m, pooled, _ = encode(params, x[None], branch)
    return m[0], pooled[0]


def abstraction_logits(params, pooled):
    return abstraction_head_forward(pooled, (params["abs_w"], params["abs_b"]))
