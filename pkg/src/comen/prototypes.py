"""Per-domain class prototypes with exponential-moving-average state.

The bank keeps an M x K grid of class centroids in embedding space. Each
step computes assignment-weighted local centroids from the batch, blends
them into the bank with decay rho, and exposes loss-side features whose
gradient reaches the encoder only through the local term: the EMA history
is held constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, concat

ABSENT_MASS = 1e-8


@dataclass
class LocalPrototypes:
    values: list  # M x K nested list of Tensor (d,) or None for absent cells
    mass: np.ndarray  # (M, K) assignment mass per cell

    def present(self, m: int, k: int) -> bool:
        return self.values[m][k] is not None


class PrototypeBank:
    def __init__(self, domains: int, classes: int, dim: int, rho: float = 0.7):
        if not 0.0 < rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {rho}")
        self.domains = domains
        self.classes = classes
        self.dim = dim
        self.rho = rho
        self.protos = np.zeros((domains, classes, dim))
        self.initialized = np.zeros((domains, classes), dtype=bool)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "protos": self.protos.copy(),
            "initialized": self.initialized.astype(np.float64),
        }

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.protos = arrays["protos"].copy()
        self.initialized = arrays["initialized"] > 0.5


def local_prototypes(embeddings: Tensor, class_labels: np.ndarray,
                     assignments) -> LocalPrototypes:
    """Assignment-weighted class centroids of one batch.

    Cell (m, k) is sum_i p_{i,m} f_i / sum_i p_{i,m} over samples of class k;
    cells whose mass falls below ABSENT_MASS are marked absent.
    """
    emb = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
    p = assignments if isinstance(assignments, Tensor) else Tensor(assignments)
    labels = np.asarray(class_labels)
    if emb.data.ndim != 2 or p.data.ndim != 2:
        raise ShapeError(f"local_prototypes: embeddings {emb.data.shape}, assignments {p.data.shape}")
    b = emb.data.shape[0]
    if p.data.shape[0] != b or labels.shape[0] != b:
        raise ShapeError("local_prototypes: row counts disagree")
    m_domains = p.data.shape[1]
    classes = int(labels.max()) + 1 if labels.size else 0

    mass = np.zeros((m_domains, classes))
    values: list[list[Tensor | None]] = [[None] * classes for _ in range(m_domains)]
    class_masks = {k: (labels == k) for k in set(labels.tolist())}
    for m in range(m_domains):
        col = p[:, m]  # (B,)
        for k, mask in class_masks.items():
            cell_mass = float(p.data[mask, m].sum())
            mass[m, k] = cell_mass
            if cell_mass < ABSENT_MASS:
                continue
            w = col * Tensor(mask.astype(np.float64))
            numer = w.reshape(1, b).matmul(emb).reshape(emb.data.shape[1])
            values[m][k] = numer / w.sum()
    return LocalPrototypes(values=values, mass=mass)


def ema_update(bank: PrototypeBank, local: LocalPrototypes) -> None:
    """Blend local centroids into the bank: present cells move by
    rho * previous + (1 - rho) * local; uninitialized cells adopt the local
    value; absent cells are left unchanged."""
    for m in range(bank.domains):
        for k in range(min(bank.classes, len(local.values[m]))):
            cell = local.values[m][k]
            if cell is None:
                continue
            if bank.initialized[m, k]:
                bank.protos[m, k] = bank.rho * bank.protos[m, k] + (1.0 - bank.rho) * cell.data
            else:
                bank.protos[m, k] = cell.data
                bank.initialized[m, k] = True


def loss_features(bank: PrototypeBank, local: LocalPrototypes | None):
    """Node features for the relational losses.

    Cells present in the batch contribute rho * stop(previous) +
    (1 - rho) * local (gradient flows through the local term only;
    first-touch cells contribute the local value directly). Initialized
    cells absent from the batch contribute their constant bank value.
    Returns (features (n, d) Tensor or None, class ids, domain ids).
    """
    rows, classes, domains = [], [], []
    for m in range(bank.domains):
        for k in range(bank.classes):
            in_local = local is not None and k < len(local.values[m])
            cell = local.values[m][k] if in_local else None
            if cell is not None:
                if bank.initialized[m, k]:
                    prev = Tensor(bank.protos[m, k])
                    feat = bank.rho * prev + (1.0 - bank.rho) * cell
                else:
                    feat = cell
            elif bank.initialized[m, k]:
                feat = Tensor(bank.protos[m, k])
            else:
                continue
            rows.append(feat.reshape(1, bank.dim))
            classes.append(k)
            domains.append(m)
    if not rows:
        return None, np.array([], dtype=np.int64), np.array([], dtype=np.int64)
    return (concat(rows, axis=0),
            np.array(classes, dtype=np.int64),
            np.array(domains, dtype=np.int64))
