"""Prototype contrastive learning (ProtoCCL).

Every present prototype acts as a query; its positives are the same-class
prototypes from other domains, its negatives all prototypes of other
classes. The memory bank holds only prototypes, never per-sample features.
"""

from __future__ import annotations

import logging

import numpy as np

from .errors import ShapeError
from .prototypes import PrototypeBank
from .tensor import Tensor

log = logging.getLogger(__name__)


def info_nce(query: Tensor, positive: Tensor, negatives: Tensor, tau: float) -> Tensor:
    """-log( exp(q.p/tau) / (exp(q.p/tau) + sum_n exp(q.n/tau)) ).

    Similarities are raw dot products; exponents are max-shifted. With no
    negatives the loss is exactly zero.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    q = query if isinstance(query, Tensor) else Tensor(query)
    p = positive if isinstance(positive, Tensor) else Tensor(positive)
    negs = negatives if isinstance(negatives, Tensor) else Tensor(negatives)
    if negs.data.ndim == 1:
        negs = negs.reshape(1, negs.data.shape[0]) if negs.data.size else negs.reshape(0, q.data.shape[0])
    s_pos = q.matmul(p) / tau  # scalar
    if negs.data.shape[0] == 0:
        return s_pos - s_pos
    s_neg = negs.matmul(q) / tau  # (n_neg,)
    shift = max(s_pos.item(), float(s_neg.data.max()))
    e_pos = (s_pos - shift).exp()
    e_neg = (s_neg - shift).exp().sum()
    # -log(a / (a + b)) with log(a) written exactly as s_pos - shift
    return (e_pos + e_neg).clamp_min(1e-300).log() - (s_pos - shift)


def contrastive_loss_from_features(features: Tensor, class_ids: np.ndarray,
                                   tau: float = 0.5, normalize: bool = True) -> Tensor:
    """Mean contrastive term over all queries with at least one positive.

    Queries whose class is present in a single domain are skipped. Rows are
    L2-normalized first unless `normalize` is off.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    x = features if isinstance(features, Tensor) else Tensor(features)
    labels = np.asarray(class_ids)
    n = x.data.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"contrastive loss: {n} rows vs labels {labels.shape}")
    if n < 2:
        return Tensor(0.0)

    if normalize:
        norms = (x * x).sum(axis=1, keepdims=True).clamp_min(1e-24).sqrt()
        x = x / norms

    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    queried = pos_mask.any(axis=1)
    n_queries = int(queried.sum())
    if n_queries == 0:
        log.debug("contrastive loss: every class lives in a single domain; skipping")
        return Tensor(0.0)
    if not queried.all():
        skipped = sorted(set(labels[~queried].tolist()))
        log.debug("contrastive loss: classes %s present in one domain only", skipped)

    sims = x.matmul(x.transpose()) / tau  # (n, n)
    shift = np.where(pos_mask | neg_mask, sims.data, -np.inf).max(axis=1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    shifted = sims - Tensor(shift)
    e = shifted.exp()
    neg_sum = (e * Tensor(neg_mask.astype(np.float64))).sum(axis=1, keepdims=True)
    # per (query, positive) pair: log(e + sum_neg) - log(e), the latter exact
    pair_terms = (e + neg_sum.broadcast_to((n, n))).clamp_min(1e-300).log() - shifted

    pos_counts = pos_mask.sum(axis=1)
    weights = np.zeros((n, n))
    rows = pos_counts > 0
    weights[rows] = pos_mask[rows] / pos_counts[rows, None]
    return (pair_terms * Tensor(weights)).sum() / float(n_queries)


def protoccl_loss(bank: PrototypeBank, tau: float = 0.5, normalize: bool = True) -> Tensor:
    """Contrastive loss over the bank's initialized cells (constant features)."""
    rows, classes = [], []
    for m in range(bank.domains):
        for k in range(bank.classes):
            if bank.initialized[m, k]:
                rows.append(bank.protos[m, k])
                classes.append(k)
    if not rows:
        return Tensor(0.0)
    return contrastive_loss_from_features(
        Tensor(np.stack(rows)), np.array(classes), tau=tau, normalize=normalize
    )
