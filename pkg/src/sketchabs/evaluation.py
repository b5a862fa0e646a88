"""Gallery retrieval evaluation: Acc@q, separation entropy, early-retrieval curves
and fixed-mask ablations.

Every query is a test sketch; the gallery is the test photos. The query's
predicted (noise-free argmax) mask is applied to both sides of each distance.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import abstraction_mask as am
from .accq import hard_ranks
from .core import EmptyBatchError, InvalidInputError, pairwise_row_sq
from .model import abstraction_logits, encode
from .synth_data import SyntheticDataset, assign_abstraction_label

DEFAULT_T_GRID = tuple(round(0.1 * i, 1) for i in range(1, 11))
FORCED_SETTINGS = (3, 6, 9, "random")


@dataclass
class EvalReport:
    acc_at: dict = field(default_factory=dict)
    entropy_curve: list = field(default_factory=list)
    ma_curve: list = field(default_factory=list)
    mb_curve: list = field(default_factory=list)
    mask_histogram: list = field(default_factory=lambda: [0, 0, 0])

    def to_text(self) -> str:
        out = ["[acc_at]"]
        out += [f"{q} = {v:.6f}" for q, v in sorted(self.acc_at.items())]
        for name in ("entropy_curve", "ma_curve", "mb_curve"):
            curve = getattr(self, name)
            if curve:
                out.append(f"\n[{name}]")
                out += [f"{t:.2f} = {v:.6f}" for t, v in curve]
        out.append("\n[mask_histogram]")
        out += [f"{lv.name.lower()} = {c}" for lv, c in zip(am.Level, self.mask_histogram)]
        return "\n".join(out) + "\n"


def curve_csv(curve, header=("t", "value")) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for t, v in curve:
        writer.writerow([f"{t:.2f}", f"{v:.8f}"])
    return buf.getvalue()


def predict_levels(params, sketch_obs):
    """Deterministic level prediction (argmax of the head, no Gumbel noise)."""
    _, pooled, _ = encode(params, sketch_obs, "sketch")
    return np.argmax(abstraction_logits(params, pooled), axis=1)


def level_masks(levels, group_sizes=(3, 3, 3)):
    return np.stack([am.level_mask9(lv, group_sizes) for lv in levels])


def gallery_distances(sketch_m, photo_m, masks):
    """``(Q, N)`` masked distances from each query to every gallery photo."""
    return np.sqrt(np.einsum("ir,ijr->ij", masks, pairwise_row_sq(sketch_m, photo_m)))


class Retriever:
    """Encodes a test gallery once and scores sketch queries against it."""

    def __init__(self, params, dataset: SyntheticDataset, group_sizes=(3, 3, 3), use_mask=True):
        self.params = params
        self.dataset = dataset
        self.group_sizes = tuple(group_sizes)
        self.use_mask = use_mask
        self.objects = dataset.test
        if not self.objects:
            raise EmptyBatchError("empty test gallery")
        self.photo_m, _, _ = encode(params, dataset.photos(self.objects), "photo")

    @property
    def n_gallery(self) -> int:
        return len(self.objects)

    def queries(self, t):
        return self.dataset.eval_sketches(self.objects, t)

    def distances(self, sketch_obs, masks=None):
        """Returns ``(dist, predicted_levels)``; ``masks`` overrides the prediction."""
        sketch_m, pooled, _ = encode(self.params, sketch_obs, "sketch")
        levels = np.argmax(abstraction_logits(self.params, pooled), axis=1)
        if masks is None:
            masks = (level_masks(levels, self.group_sizes) if self.use_mask
                     else np.ones((len(levels), 9)))
        return gallery_distances(sketch_m, self.photo_m, masks), levels

    def ranks(self, t, masks=None):
        dist, levels = self.distances(self.queries(t), masks)
        return hard_ranks(dist, np.arange(len(dist))), dist, levels


def accuracy_from_ranks(ranks, q_list):
    ranks = np.asarray(ranks)
    return {int(q): float(np.mean(ranks <= q)) for q in q_list}


def evaluate_retrieval(retriever: Retriever, q_list=(1, 5, 10), t=1.0) -> EvalReport:
    ranks, _, levels = retriever.ranks(t)
    return EvalReport(acc_at=accuracy_from_ranks(ranks, q_list),
                      mask_histogram=np.bincount(levels, minlength=3).tolist())


def separation_entropy(dist_row, true_index):
    """``-p ln p`` with ``p`` the softmax(-distance) mass on the true item."""
    dist_row = np.asarray(dist_row, dtype=np.float64)
    if dist_row.size == 0:
        raise EmptyBatchError("empty gallery")
    z = -(dist_row - dist_row.min())
    p = np.exp(z[true_index]) / np.sum(np.exp(z))
    return float(-p * np.log(p)) if p > 0 else 0.0


def _check_grid(t_grid):
    t_grid = [float(t) for t in t_grid]
    if any(b <= a for a, b in zip(t_grid, t_grid[1:])) or not all(0 < t <= 1 for t in t_grid):
        raise InvalidInputError("t grid must be ascending within (0, 1]")
    return t_grid


def entropy_study(retriever: Retriever, t_grid=DEFAULT_T_GRID):
    """Mean separation entropy per completion level."""
    curve = []
    for t in _check_grid(t_grid):
        dist, _ = retriever.distances(retriever.queries(t))
        h = [separation_entropy(row, i) for i, row in enumerate(dist)]
        curve.append((t, float(np.mean(h))))
    return curve


def percentile_score(ranks, n):
    if n < 2:
        raise InvalidInputError("ranking percentile needs a gallery of at least 2")
    return 100.0 * (n - np.asarray(ranks, dtype=np.float64)) / (n - 1)


def early_retrieval_curves(retriever: Retriever, t_grid=DEFAULT_T_GRID):
    """Per-completion mean ranking percentile (m@A) and mean 1/rank (m@B).

    Returns ``(ma_curve, mb_curve, summary)`` where summary holds the
    grid-averaged values.
    """
    n = retriever.n_gallery
    if n < 2:
        raise InvalidInputError("m@A needs a gallery of at least 2")
    ma, mb = [], []
    for t in _check_grid(t_grid):
        ranks, _, _ = retriever.ranks(t)
        ma.append((t, float(np.mean(percentile_score(ranks, n)))))
        mb.append((t, float(np.mean(1.0 / ranks))))
    summary = {"m@A": float(np.mean([v for _, v in ma])),
               "m@B": float(np.mean([v for _, v in mb]))}
    return ma, mb, summary


def forced_masks(setting, n_queries, rng=None, group_sizes=(3, 3, 3)):
    """Masks keeping a fixed 3/6/9 row prefix, or a random prefix per query."""
    bounds = np.cumsum(group_sizes)
    if setting == "random":
        if rng is None:
            raise InvalidInputError("random forcing needs an rng")
        levels = rng.integers(0, 3, size=n_queries)
    elif setting in (3, 6, 9) and setting in bounds:
        levels = np.full(n_queries, int(np.searchsorted(bounds, setting)))
    else:
        raise InvalidInputError(f"forced rows must be 3, 6, 9 or 'random', got {setting!r}")
    return level_masks(levels, group_sizes)


def mixed_completion_accuracy(retriever: Retriever, q_list=(1,), setting="dynamic", seed=0,
                              completions=(0.30, 0.60, 1.00)):
    """Acc@q over queries rendered at every completion in ``completions``."""
    rng = np.random.default_rng(seed)
    ranks = []
    for t in completions:
        masks = None
        if setting != "dynamic":
            masks = forced_masks(setting, retriever.n_gallery, rng, retriever.group_sizes)
        r, _, _ = retriever.ranks(t, masks)
        ranks.append(r)
    return accuracy_from_ranks(np.concatenate(ranks), q_list)


def fixed_mask_ablation(retriever: Retriever, settings=FORCED_SETTINGS, q_list=(1, 5, 10),
                        completions=(0.30, 0.60, 1.00), seed=0):
    """Acc@q per (setting, completion) cell, plus the dynamic model for reference.

    Returns ``{(setting, level_name): {q: acc}}``.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for setting in ("dynamic",) + tuple(settings):
        for t in completions:
            masks = None
            if setting != "dynamic":
                masks = forced_masks(setting, retriever.n_gallery, rng, retriever.group_sizes)
            ranks, _, _ = retriever.ranks(t, masks)
            level = assign_abstraction_label(t).name.lower()
            out[(setting, level)] = accuracy_from_ranks(ranks, q_list)
    return out
