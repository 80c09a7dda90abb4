"""Latent domain discovery.

Stage 1 bootstraps hard pseudo domain labels by clustering style vectors,
pretrains a small domain predictor on them, then refines the predictor and
the encoder jointly with a classification plus assignment-entropy objective.
The per-sample soft assignments computed at the end are frozen for stage 2.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, EmptyClusterError, ShapeError
from .nn import SGD, Linear, Parameter, cross_entropy, rng_for
from .stylenorm import pixel_style_vectors
from .tensor import Tensor, backward

log = logging.getLogger(__name__)


def _standardize(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    return (x - mu) / np.maximum(sd, 1e-12)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray | None:
    """k-means++ seeding; None when the distance mass degenerates."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(0, n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            return None
        centers[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def bootstrap_pseudo_domains(style_vecs: np.ndarray, domains: int, seed: int,
                             max_iter: int = 100, tol: float = 1e-6) -> np.ndarray:
    """k-means (k-means++ init) on standardized style vectors.

    Re-seeds up to 10 times when a cluster comes up empty, then raises
    EmptyClusterError.
    """
    x = _standardize(np.asarray(style_vecs, dtype=np.float64))
    n = x.shape[0]
    if n < domains:
        raise ShapeError(f"need at least {domains} vectors, got {n}")
    for attempt in range(10):
        rng = rng_for(seed, "kmeans", attempt)
        centers = _kmeans_pp_init(x, domains, rng)
        if centers is None:
            continue
        labels = None
        failed = False
        for _ in range(max_iter):
            d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            labels = d2.argmin(axis=1)
            counts = np.bincount(labels, minlength=domains)
            if np.any(counts == 0):
                failed = True
                break
            new_centers = np.stack([x[labels == j].mean(axis=0) for j in range(domains)])
            shift = np.abs(new_centers - centers).max()
            centers = new_centers
            if shift < tol:
                break
        if not failed and labels is not None:
            d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            return d2.argmin(axis=1).astype(np.int64)
    raise EmptyClusterError(f"empty cluster in all 10 attempts (k={domains})")


class DomainPredictor:
    """Small feed-forward net: style vector (2C) -> hidden -> M, softmax out.

    Inputs pass through a fixed affine standardization (fitted once during
    pretraining); it is a constant reparametrization of the first layer, so
    gradients still reach the upstream style statistics.
    """

    def __init__(self, in_dim: int, domains: int, seed: int,
                 hidden: int = 64, slope: float = 0.2):
        rng = rng_for(seed, "domain-predictor")
        self.in_dim = in_dim
        self.domains = domains
        self.slope = slope
        self.center = np.zeros(in_dim)
        self.inv_scale = np.ones(in_dim)
        self.l1 = Linear(in_dim, hidden, rng)
        self.l2 = Linear(hidden, domains, rng)

    def set_input_stats(self, styles: np.ndarray) -> None:
        self.center = styles.mean(axis=0)
        self.inv_scale = 1.0 / np.maximum(styles.std(axis=0), 1e-6)

    def logits(self, styles: Tensor) -> Tensor:
        if styles.data.ndim != 2 or styles.data.shape[1] != self.in_dim:
            raise ShapeError(
                f"domain predictor expects (B, {self.in_dim}), got {styles.data.shape}"
            )
        z = (styles - Tensor(self.center)) * Tensor(self.inv_scale)
        return self.l2(self.l1(z).leaky_relu(self.slope))

    def parameters(self) -> list[Parameter]:
        return self.l1.parameters() + self.l2.parameters()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "center": self.center.copy(),
            "inv_scale": self.inv_scale.copy(),
            "l1.weight": self.l1.weight.data.copy(),
            "l1.bias": self.l1.bias.data.copy(),
            "l2.weight": self.l2.weight.data.copy(),
            "l2.bias": self.l2.bias.data.copy(),
        }

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.center = arrays["center"].copy()
        self.inv_scale = arrays["inv_scale"].copy()
        self.l1.weight.replace(arrays["l1.weight"])
        self.l1.bias.replace(arrays["l1.bias"])
        self.l2.weight.replace(arrays["l2.weight"])
        self.l2.bias.replace(arrays["l2.bias"])


def predict_assignments(predictor: DomainPredictor, style_vecs) -> Tensor:
    """Soft domain assignments (rows on the simplex) for style vectors."""
    styles = style_vecs if isinstance(style_vecs, Tensor) else Tensor(style_vecs)
    return predictor.logits(styles).softmax(axis=1)


def entropy_loss(assignments) -> Tensor:
    """Mean per-row entropy of soft assignments; log arguments are clamped
    at 1e-12 so one-hot rows contribute exactly zero."""
    p = assignments if isinstance(assignments, Tensor) else Tensor(assignments)
    if p.data.ndim != 2:
        raise ShapeError(f"entropy_loss: expected BxM, got {p.data.shape}")
    logp = p.clamp_min(1e-12).log()
    return -(p * logp).sum(axis=1).mean()


def balance_penalty(assignments: Tensor) -> Tensor:
    """KL of the batch-mean assignment to uniform; guards against collapse."""
    mean = assignments.mean(axis=0)
    m = mean.data.shape[0]
    return (mean * (mean.clamp_min(1e-12) * float(m)).log()).sum()


def pretrain_predictor(predictor: DomainPredictor, styles: np.ndarray,
                       labels: np.ndarray, epochs: int = 200, lr: float = 0.1,
                       momentum: float = 0.9) -> float:
    """Full-batch fit of the predictor to pseudo labels; returns fit accuracy."""
    predictor.set_input_stats(styles)
    x = Tensor(styles)
    opt = SGD(predictor.parameters(), lr=lr, momentum=momentum, weight_decay=0.0)
    for _ in range(epochs):
        loss = cross_entropy(predictor.logits(x), labels)
        backward(loss)
        opt.step()
    pred = predictor.logits(Tensor(styles)).data.argmax(axis=1)
    return float((pred == labels).mean())


@dataclass
class Stage1Result:
    encoder: object
    predictor: DomainPredictor
    assignments: np.ndarray            # (n_source, M), rows follow source_idx
    source_idx: np.ndarray             # ascending bundle positions
    bootstrap_labels: np.ndarray       # per train sample, diagnostics only
    predictor_fit: float
    val_accuracy: float
    curves: dict = field(default_factory=dict)


def stage1_train(fold, cfg, seed: int) -> Stage1Result:
    """Joint classification + entropy training of encoder and predictor.

    The predictor reads pixel-level style vectors: the raw image is itself a
    feature map, and a stationary style source keeps the pretrained cluster
    structure valid while the encoder trains (styles taken from a trainable
    layer drift under the classification objective until all assignments
    collapse onto one branch). For the same reason, the normalization
    mixture treats the batch assignments as constants; the entropy objective
    still trains the predictor and the classification objective still trains
    every branch's statistics and affine parameters.
    """
    from .model import Encoder  # local import; model builds on this module's types

    m = cfg.resolve_domains(fold.domains)
    c_in = fold.train_x.shape[1]
    encoder = Encoder(c_in, fold.classes, m, seed, cfg)
    predictor = DomainPredictor(2 * c_in, m, seed,
                                hidden=cfg.predictor_hidden, slope=cfg.leaky_slope)

    pix_styles = pixel_style_vectors(fold.train_x, cfg.eps)
    boot = bootstrap_pseudo_domains(pix_styles, m, seed)

    n_train = fold.train_x.shape[0]
    portion_rng = rng_for(seed, "bootstrap-portion")
    portion = portion_rng.choice(n_train, size=max(m, n_train // 2), replace=False)
    fit = pretrain_predictor(predictor, pix_styles[portion], boot[portion],
                             epochs=cfg.predictor_pretrain_epochs,
                             lr=cfg.predictor_pretrain_lr, momentum=cfg.momentum)
    log.debug("predictor pretraining fit: %.3f", fit)

    params = encoder.parameters() + predictor.parameters()
    opt = SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    curves = {"train_loss": [], "entropy": [], "val_accuracy": []}
    guard_floor = 1.0 / (4.0 * m)

    for epoch in range(cfg.stage1_epochs):
        if epoch == cfg.lr_decay_epoch:
            opt.lr = cfg.lr * cfg.lr_decay_factor
        order = rng_for(seed, "stage1-shuffle", epoch).permutation(n_train)
        losses, entropies = [], []
        for start in range(0, n_train, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if idx.size < 2:
                continue
            x = Tensor(fold.train_x[idx])
            p = predict_assignments(predictor, Tensor(pix_styles[idx]))
            logits = encoder.head_from_conv1(
                encoder.conv1_features(x), Tensor(p.data), "train"
            )
            l_cls = cross_entropy(logits, fold.train_y[idx])
            l_ent = entropy_loss(p)
            loss = l_cls + l_ent
            if float(p.data.mean(axis=0).min()) < guard_floor:
                loss = loss + cfg.balance_guard_weight * balance_penalty(p)
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"stage 1 loss non-finite at epoch {epoch}")
            backward(loss)
            opt.step()
            losses.append(loss.item())
            entropies.append(l_ent.item())
        curves["train_loss"].append(float(np.mean(losses)))
        curves["entropy"].append(float(np.mean(entropies)))
        curves["val_accuracy"].append(_val_accuracy(encoder, predictor, fold, cfg))

    source_idx = fold.source_idx
    pos_to_row = {int(p): r for r, p in enumerate(source_idx)}
    source_x = np.concatenate([fold.train_x, fold.val_x])
    source_pos = np.concatenate([fold.train_idx, fold.val_idx])
    assignments = np.zeros((source_idx.size, m))
    source_styles = pixel_style_vectors(source_x, cfg.eps)
    for start in range(0, source_x.shape[0], cfg.batch_size):
        ps = source_pos[start:start + cfg.batch_size]
        rows = predict_assignments(
            predictor, Tensor(source_styles[start:start + cfg.batch_size])
        ).data
        for r, pos in enumerate(ps):
            assignments[pos_to_row[int(pos)]] = rows[r]

    return Stage1Result(
        encoder=encoder,
        predictor=predictor,
        assignments=assignments,
        source_idx=source_idx,
        bootstrap_labels=boot,
        predictor_fit=fit,
        val_accuracy=curves["val_accuracy"][-1] if curves["val_accuracy"] else 0.0,
        curves=curves,
    )


def _val_accuracy(encoder, predictor, fold, cfg) -> float:
    correct = 0
    n = fold.val_x.shape[0]
    styles = pixel_style_vectors(fold.val_x, cfg.eps)
    for start in range(0, n, cfg.batch_size):
        x = Tensor(fold.val_x[start:start + cfg.batch_size])
        p = predict_assignments(predictor, Tensor(styles[start:start + cfg.batch_size]))
        logits = encoder.head_from_conv1(encoder.conv1_features(x), p, "infer",
                                         update_running=False)
        correct += int((logits.data.argmax(axis=1) == fold.val_y[start:start + cfg.batch_size]).sum())
    return correct / n


def write_assignments(path, assignments: np.ndarray) -> None:
    """Text format: header '# M=<m> N=<n>', then N rows of M floats at nine
    significant digits."""
    n, m = assignments.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# M={m} N={n}\n")
        for row in assignments:
            fh.write(" ".join(f"{v:.9g}" for v in row) + "\n")


def read_assignments(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("# M="):
            raise ValueError(f"bad assignments header: {header!r}")
        fields = dict(part.split("=") for part in header[2:].split())
        m, n = int(fields["M"]), int(fields["N"])
        rows = [[float(v) for v in line.split()] for line in fh if line.strip()]
    out = np.array(rows)
    if out.shape != (n, m):
        raise ValueError(f"assignments shape {out.shape} != header ({n}, {m})")
    return out
