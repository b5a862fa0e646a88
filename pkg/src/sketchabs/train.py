"""Batch objective, optimisers, the training loop and gradient checking."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import abstraction_mask as am
from .accq import LEVEL_Q, AccqConfig, accq_loss, batch_accuracy_at_q
from .core import K_TOTAL, InvalidInputError, pairwise_batch_distances, pairwise_batch_distances_backward
from .losses import (LinearGenerator, LossWeights, TripletConfig, abstraction_ce_from_logits,
                     batch_reconstruction_loss, batch_triplet_loss)
from .model import ModelConfig, ModelParams, encode, encode_backward, init_params, abstraction_logits
from .synth_data import SyntheticDataset, assign_abstraction_label

log = logging.getLogger(__name__)

COMPLETIONS = (0.30, 0.60, 1.00)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 300
    lr: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"
    loss: str = "accq"              # "accq" or "triplet"
    use_mask: bool = True
    freeze_padding: bool = False
    gumbel_temperature: float = 1.0
    gumbel_hard: bool = True
    fixed_q: int | None = None      # None -> per-level q (10 / 5 / 1)
    weights: LossWeights = field(default_factory=LossWeights)
    accq: AccqConfig = field(default_factory=AccqConfig)
    triplet: TripletConfig = field(default_factory=TripletConfig)
    group_sizes: tuple[int, int, int] = (3, 3, 3)

    def __post_init__(self):
        if self.batch_size < 2:
            raise InvalidInputError("ranking losses need batch_size >= 2")
        if self.lr < 0 or self.epochs < 0:
            raise InvalidInputError("lr and epochs must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidInputError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("accq", "triplet"):
            raise InvalidInputError(f"unknown loss {self.loss!r}")
        if self.fixed_q is not None and self.fixed_q < 1:
            raise InvalidInputError("fixed_q must be >= 1")
        if sum(self.group_sizes) != 9:
            raise InvalidInputError("group_sizes must sum to 9")


@dataclass
class Batch:
    sketch_obs: np.ndarray   # (B, D_obs)
    photo_obs: np.ndarray    # (B, D_obs)
    levels: np.ndarray       # (B,) ints
    targets: np.ndarray      # (B, D_img) reconstruction targets


@dataclass
class StepNoise:
    gumbel: np.ndarray       # (B, 3)
    pad_sketch: np.ndarray   # (B, 14, d)
    pad_photo: np.ndarray    # (B, 14, d)
    negatives: np.ndarray    # (B,) negative index per query

    @classmethod
    def draw(cls, rng, b, d):
        pad_rng, gum_rng, neg_rng = rng
        shift = neg_rng.integers(1, b, size=b) if b > 1 else np.zeros(1, dtype=int)
        return cls(am.sample_gumbel(gum_rng, (b, 3)),
                   pad_rng.standard_normal((b, K_TOTAL, d)),
                   pad_rng.standard_normal((b, K_TOTAL, d)),
                   (np.arange(b) + shift) % b)


def query_q(levels, cfg: TrainConfig):
    if cfg.fixed_q is not None:
        return np.full(len(levels), float(cfg.fixed_q))
    return np.array([LEVEL_Q[am.Level(int(lv))] for lv in levels], dtype=np.float64)


def objective(params: ModelParams, batch: Batch, cfg: TrainConfig, gen: LinearGenerator,
              noise: StepNoise):
    """Weighted total loss, its gradient w.r.t. every parameter, and metrics."""
    w = cfg.weights
    m_s, pooled, cache_s = encode(params, batch.sketch_obs, "sketch")
    m_p, _, cache_p = encode(params, batch.photo_obs, "photo")
    b = m_s.shape[0]
    logits = abstraction_logits(params, pooled)

    if cfg.use_mask:
        soft = am.gumbel_softmax_sample(logits, cfg.gumbel_temperature, noise.gumbel)
        picked = am.hard_one_hot(soft)
        a_hat = picked if cfg.gumbel_hard else soft
        mask3 = am.build_selection_mask(a_hat)
        mask9 = am.expand_mask(mask3, cfg.group_sizes)
        hard9 = am.expand_mask(am.build_selection_mask(picked), cfg.group_sizes)
    else:
        picked = np.tile(am.Level.FINE.one_hot(), (b, 1))
        mask9 = hard9 = np.ones((b, 9))

    dist = pairwise_batch_distances(m_s, m_p, mask9)
    if cfg.loss == "accq":
        rank_loss, g_dist = accq_loss(dist, query_q(batch.levels, cfg),
                                      cfg.accq.tau1, cfg.accq.tau2)
    else:
        rank_loss, g_dist = batch_triplet_loss(dist, noise.negatives, cfg.triplet.mu)
    g_ms, g_mp, g_mask9 = pairwise_batch_distances_backward(
        m_s, m_p, mask9, dist, w.accq * g_dist)

    abs_loss, _, g_logits_abs = abstraction_ce_from_logits(logits, batch.levels)
    g_logits = w.abs * g_logits_abs
    if cfg.use_mask:
        g_mask3 = am.expand_mask_backward(g_mask9, cfg.group_sizes)
        g_a = am.build_selection_mask_backward(g_mask3)
        # straight-through: the hard pick takes the soft sample's gradient
        g_logits = g_logits + am.gumbel_argmax_backward(soft, g_a, cfg.gumbel_temperature)

    # reconstruction sees the binary mask only; no gradient reaches the head
    counts = hard9.sum(axis=1).round().astype(int)
    keep = (np.arange(K_TOTAL)[None, :] < counts[:, None])[:, :, None]
    lat_s = np.where(keep, _pad9(m_s * hard9[:, :, None]), noise.pad_sketch)
    lat_p = np.where(keep, _pad9(m_p * hard9[:, :, None]), noise.pad_photo)
    rec_loss, g_lat_s, g_lat_p = batch_reconstruction_loss(
        lat_s, lat_p, batch.targets, gen, counts)
    g_ms += w.recons * g_lat_s[:, :9] * hard9[:, :, None]
    g_mp += w.recons * g_lat_p[:, :9] * hard9[:, :, None]

    grads = params.zeros_like()
    grads["abs_w"] += g_logits.T @ pooled
    grads["abs_b"] += g_logits.sum(axis=0)
    g_pooled = g_logits @ params["abs_w"]
    encode_backward(params, cache_s, g_ms, g_pooled, "sketch", grads)
    encode_backward(params, cache_p, g_mp, None, "photo", grads)

    total = w.recons * rec_loss + w.accq * rank_loss + w.abs * abs_loss
    metrics = {
        "L_total": total, "L_recons": rec_loss, "L_accq": rank_loss, "L_abs": abs_loss,
        "acc1": batch_accuracy_at_q(dist, 1),
        "mask_hist": np.bincount(np.argmax(picked, axis=1), minlength=3),
    }
    return total, grads, metrics


def _pad9(m):
    b, k, d = m.shape
    return np.concatenate([m, np.zeros((b, K_TOTAL - k, d))], axis=1)


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = params.copy()
        for name, g in grads.items():
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = params[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


class SGD:
    def __init__(self, lr=1e-3):
        self.lr = lr

    def step(self, params, grads):
        out = params.copy()
        for name, g in grads.items():
            out[name] = params[name] - self.lr * g
        return out


def make_optimizer(cfg: TrainConfig):
    return Adam(cfg.lr) if cfg.optimizer == "adam" else SGD(cfg.lr)


def train_step(params, batch, optimizer, cfg, gen, noise):
    """One gradient step on the total loss; returns ``(new_params, metrics)``."""
    _, grads, metrics = objective(params, batch, cfg, gen, noise)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(
                f"non-finite gradient in {name}; losses: "
                + ", ".join(f"{k}={metrics[k]:.4g}" for k in ("L_recons", "L_accq", "L_abs")))
    return optimizer.step(params, grads), metrics


class _Streams:
    """Independent RNG streams derived from one seed."""

    def __init__(self, seed):
        init, order, data, pad, gumbel, neg = np.random.SeedSequence(seed).spawn(6)
        self.init = np.random.default_rng(init)
        self.order = np.random.default_rng(order)
        self.data = np.random.default_rng(data)
        self.noise = (np.random.default_rng(pad), np.random.default_rng(gumbel),
                      np.random.default_rng(neg))


def make_batch(dataset: SyntheticDataset, objs, data_rng, completions=COMPLETIONS):
    ts = data_rng.choice(np.asarray(completions), size=len(objs))
    eps = data_rng.standard_normal((len(objs), dataset.params.d_obs))
    sketches = dataset.render_batch(dataset.latents(objs), ts, eps)
    photos = dataset.photos(objs)
    levels = np.array([int(assign_abstraction_label(t)) for t in ts])
    return Batch(sketches, photos, levels, photos)


def model_config_for(dataset: SyntheticDataset, d=16, hidden=64, r=4) -> ModelConfig:
    return ModelConfig(d_obs=dataset.params.d_obs, hidden=hidden, d=d, r=r)


def train(dataset: SyntheticDataset, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
          generator_seed: int = 0, callback=None):
    """Train from scratch. Returns ``(params, rows)``, one metrics row per epoch."""
    model_cfg = model_cfg or model_config_for(dataset)
    streams = _Streams(cfg.seed)
    params = init_params(model_cfg, streams.init)
    gen = LinearGenerator(model_cfg.d, dataset.params.d_obs, seed=generator_seed)
    optimizer = make_optimizer(cfg)
    train_objs = dataset.train
    frozen = None
    rows = []
    for epoch in range(cfg.epochs):
        order = streams.order.permutation(len(train_objs))
        sums = {"L_total": 0.0, "L_recons": 0.0, "L_accq": 0.0, "L_abs": 0.0, "acc1": 0.0}
        hist = np.zeros(3, dtype=int)
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            batch = make_batch(dataset, [train_objs[i] for i in idx], streams.data)
            noise = StepNoise.draw(streams.noise, len(idx), model_cfg.d)
            if cfg.freeze_padding:
                if frozen is None:
                    frozen = StepNoise.draw(streams.noise, cfg.batch_size, model_cfg.d)
                noise.pad_sketch = frozen.pad_sketch[:len(idx)]
                noise.pad_photo = frozen.pad_photo[:len(idx)]
            params, metrics = train_step(params, batch, optimizer, cfg, gen, noise)
            for k in sums:
                sums[k] += metrics[k]
            hist += metrics["mask_hist"]
            n_batches += 1
        row = {"epoch": epoch + 1, **{k: v / max(n_batches, 1) for k, v in sums.items()},
               "mask_hist": hist.tolist()}
        if not all(np.isfinite(row[k]) for k in sums):
            raise TrainingError(f"non-finite loss at epoch {epoch + 1}: {row}")
        rows.append(row)
        if callback is not None:
            callback(row)
    return params, rows


def gradcheck(params: ModelParams, batch: Batch, cfg: TrainConfig, gen: LinearGenerator,
              noise: StepNoise, h=1e-5, samples_per_group=12, seed=0, floor=1e-6):
    """Central finite differences against the analytic gradient of the total loss.

    Soft Gumbel sampling is forced (the hard pick is piecewise constant).
    Returns ``{group: {"max_rel_err", "index", "analytic", "numeric"}}``.
    """
    cfg = _soft(cfg)
    params = params.copy()
    _, grads, _ = objective(params, batch, cfg, gen, noise)
    rng = np.random.default_rng(seed)
    report = {}
    for name in params:
        arr = params[name]
        flat_idx = rng.choice(arr.size, size=min(samples_per_group, arr.size), replace=False)
        worst = {"max_rel_err": 0.0, "index": None, "analytic": 0.0, "numeric": 0.0}
        for fi in flat_idx:
            idx = np.unravel_index(fi, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + h
            f_plus = objective(params, batch, cfg, gen, noise)[0]
            arr[idx] = orig - h
            f_minus = objective(params, batch, cfg, gen, noise)[0]
            arr[idx] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            analytic = grads[name][idx]
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            if rel >= worst["max_rel_err"]:
                worst = {"max_rel_err": float(rel), "index": tuple(int(i) for i in idx),
                         "analytic": float(analytic), "numeric": float(numeric)}
        report[name] = worst
    return report


def _soft(cfg: TrainConfig) -> TrainConfig:
    return replace(cfg, gumbel_hard=False)
