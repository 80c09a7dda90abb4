"""Channel-statistic style descriptors and style-driven domain-specific
normalization (SDNorm).

A feature map's per-channel spatial mean and standard deviation carry the
"style" of its source domain. SDNorm keeps one normalization branch per
latent domain, normalizes each branch with assignment-weighted batch moments,
and mixes the branches per sample by its soft domain assignment.
"""

from __future__ import annotations

import numpy as np

from .errors import EmptySpatialError, InsufficientBatchError, ShapeError
from .nn import Parameter
from .tensor import Tensor, concat

DEGENERATE_MASS = 1e-8


def channel_stats(f: Tensor, eps: float = 1e-5) -> tuple[Tensor, Tensor]:
    """Per-channel spatial mean and standard deviation of a CxHxW map.

    sigma_c is sqrt(spatial variance + eps), so it stays positive for
    constant channels whenever eps > 0.
    """
    f = f if isinstance(f, Tensor) else Tensor(f)
    if f.data.ndim != 3:
        raise ShapeError(f"channel_stats: expected CxHxW, got {f.data.shape}")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    c, h, w = f.data.shape
    if h * w == 0:
        raise EmptySpatialError("channel_stats: empty spatial extent")
    mu = f.mean(axis=(1, 2))
    dev = f - mu.reshape(c, 1, 1)
    var = (dev * dev).mean(axis=(1, 2))
    sigma = (var + eps).sqrt()
    return mu, sigma


def style_vector(f: Tensor, eps: float = 1e-5) -> Tensor:
    """Style descriptor of a feature map: concat(mu, sigma), length 2C."""
    mu, sigma = channel_stats(f, eps)
    return concat([mu, sigma], axis=0)


def style_vectors(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Batched style descriptors: (B, C, H, W) -> (B, 2C)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"style_vectors: expected BxCxHxW, got {x.data.shape}")
    b, c, h, w = x.data.shape
    if h * w == 0:
        raise EmptySpatialError("style_vectors: empty spatial extent")
    mu = x.mean(axis=(2, 3))
    # moment form; the clamp only engages on constant channels
    var = ((x * x).mean(axis=(2, 3)) - mu * mu).clamp_min(0.0)
    sigma = (var + eps).sqrt()
    return concat([mu, sigma], axis=1)


def pixel_style_vectors(pixels: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Plain-numpy style descriptors of raw images, for clustering."""
    x = np.asarray(pixels, dtype=np.float64)
    mu = x.mean(axis=(2, 3))
    sigma = np.sqrt(x.var(axis=(2, 3)) + eps)
    return np.concatenate([mu, sigma], axis=1)


def _as_batch_view(batch: Tensor) -> tuple[Tensor, int, int, int]:
    """Normalize input to (B, C, S) where S is the flattened spatial extent."""
    nd = batch.data.ndim
    if nd == 1:
        b = batch.data.shape[0]
        return batch.reshape(b, 1, 1), b, 1, 1
    if nd == 2:
        b, c = batch.data.shape
        return batch.reshape(b, c, 1), b, c, 1
    b, c = batch.data.shape[:2]
    s = int(np.prod(batch.data.shape[2:]))
    return batch.reshape(b, c, s), b, c, s


def weighted_domain_stats(batch: Tensor, assignments: Tensor):
    """Per-domain channel moments under column-normalized soft assignments.

    For domain m with weights w_i = p_{i,m} / sum_j p_{j,m}, the mean and
    variance are taken over all batch-and-spatial positions, each position of
    sample i weighted by w_i. Returns (stats, mass) where stats[m] is a
    (mu, var) pair of C-vectors or None when the domain's total mass is below
    DEGENERATE_MASS, and mass is the per-domain column sum.
    """
    batch = batch if isinstance(batch, Tensor) else Tensor(batch)
    assignments = assignments if isinstance(assignments, Tensor) else Tensor(assignments)
    p = assignments
    if p.data.ndim != 2:
        raise ShapeError(f"weighted_domain_stats: assignments must be BxM, got {p.data.shape}")
    if np.any(p.data < -1e-12):
        raise ValueError("assignment entries must be nonnegative")
    row_sums = p.data.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        raise ValueError("assignment rows must sum to 1")
    x, b, c, s = _as_batch_view(batch)
    if p.data.shape[0] != b:
        raise ShapeError(f"weighted_domain_stats: batch {b} vs assignment rows {p.data.shape[0]}")

    m_domains = p.data.shape[1]
    mass = p.data.sum(axis=0)
    # shared per-sample moments; per-branch stats are then tiny matmuls
    sample_mean = x.mean(axis=2)  # (B, C)
    sample_sqmean = (x * x).mean(axis=2)  # (B, C)
    stats: list[tuple[Tensor, Tensor] | None] = []
    for m in range(m_domains):
        if mass[m] < DEGENERATE_MASS:
            stats.append(None)
            continue
        col = p[:, m]
        w = (col / col.sum()).reshape(1, b)
        mu = w.matmul(sample_mean).reshape(c)
        e2 = w.matmul(sample_sqmean).reshape(c)
        var = (e2 - mu * mu).clamp_min(0.0)
        stats.append((mu, var))
    return stats, mass


class SDNormLayer:
    """Per-domain normalization with per-domain affine parameters.

    Branch m normalizes with domain-weighted batch moments in train mode and
    with its running moments at inference; each sample's output is the
    assignment-weighted mixture over branches.
    """

    def __init__(self, channels: int, domains: int, eps: float = 1e-5, momentum: float = 0.9):
        if domains < 1:
            raise ValueError("domains must be >= 1")
        self.channels = channels
        self.domains = domains
        self.eps = eps
        self.momentum = momentum
        self.gain = Parameter(np.ones((domains, channels)))
        self.bias = Parameter(np.zeros((domains, channels)))
        self.running_mean = np.zeros((domains, channels))
        self.running_var = np.ones((domains, channels))

    def parameters(self) -> list[Parameter]:
        return [self.gain, self.bias]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "gain": self.gain.data.copy(),
            "bias": self.bias.data.copy(),
            "running_mean": self.running_mean.copy(),
            "running_var": self.running_var.copy(),
        }

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.gain.replace(arrays["gain"])
        self.bias.replace(arrays["bias"])
        self.running_mean = arrays["running_mean"].copy()
        self.running_var = arrays["running_var"].copy()


def sdnorm_forward(layer: SDNormLayer, batch: Tensor, assignments: Tensor, mode: str,
                   update_running: bool = True, return_internals: bool = False):
    """Apply SDNorm to a (B, C, H, W) batch with (B, M) soft assignments."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    batch = batch if isinstance(batch, Tensor) else Tensor(batch)
    assignments = assignments if isinstance(assignments, Tensor) else Tensor(assignments)
    if batch.data.ndim != 4:
        raise ShapeError(f"sdnorm_forward: expected BxCxHxW, got {batch.data.shape}")
    b, c, h, w = batch.data.shape
    if c != layer.channels:
        raise ShapeError(f"sdnorm_forward: {c} channels vs layer {layer.channels}")
    if assignments.data.shape != (b, layer.domains):
        raise ShapeError(
            f"sdnorm_forward: assignments {assignments.data.shape} vs ({b}, {layer.domains})"
        )

    if mode == "train":
        if b < 2:
            raise InsufficientBatchError("train-mode SDNorm needs a batch of at least 2")
        stats, mass = weighted_domain_stats(batch, assignments)
    else:
        stats, mass = None, None

    # The per-sample mixture is affine in x: out = x * (p @ scale) + (p @ shift)
    # with per-branch scale_m = gain_m / sqrt(var_m + eps) and
    # shift_m = bias_m - mu_m * scale_m, so only two full-size ops are needed.
    scale_rows, shift_rows = [], []
    internals = []
    for m in range(layer.domains):
        if mode == "train" and stats[m] is not None:
            mu, var = stats[m]
        else:
            mu = Tensor(layer.running_mean[m])
            var = Tensor(layer.running_var[m])
        scale = layer.gain.t[m] / (var + layer.eps).sqrt()
        shift = layer.bias.t[m] - mu * scale
        scale_rows.append(scale.reshape(1, c))
        shift_rows.append(shift.reshape(1, c))
        if return_internals:
            xhat = (batch - mu.reshape(1, c, 1, 1)) / (var + layer.eps).sqrt().reshape(1, c, 1, 1)
            internals.append((mu, var, xhat))
        if mode == "train" and update_running and stats[m] is not None:
            rate = (1.0 - layer.momentum) * min(1.0, layer.domains * mass[m] / b)
            layer.running_mean[m] = (1.0 - rate) * layer.running_mean[m] + rate * mu.data
            layer.running_var[m] = (1.0 - rate) * layer.running_var[m] + rate * var.data

    coef_a = assignments.matmul(concat(scale_rows, axis=0))  # (B, C)
    coef_b = assignments.matmul(concat(shift_rows, axis=0))  # (B, C)
    out = batch * coef_a.reshape(b, c, 1, 1) + coef_b.reshape(b, c, 1, 1)

    if return_internals:
        return out, internals
    return out
