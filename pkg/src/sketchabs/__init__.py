"""Abstraction-aware fine-grained sketch retrieval at desk scale.

Matrix embeddings with a learned coarse-to-fine row mask, a differentiable
Acc@q ranking loss, auxiliary losses with hand-written gradients, a seeded
synthetic partial-sketch corpus, and gallery evaluation tools.
"""
from .accq import AccqConfig, accq_loss, exact_accuracy_at_q, smooth_sigmoid, soft_rank
from .abstraction_mask import (Level, apply_mask, build_selection_mask, expand_mask,
                               gumbel_argmax)
from .core import EmbeddingConfig, matrix_distance, pairwise_batch_distances, row_l2_normalize

__version__ = "0.1.0"
