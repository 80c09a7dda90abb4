"""Prototype graph reasoning (ProtoGR).

Nodes are the per-domain class prototypes; edges connect pairs whose cosine
similarity exceeds a threshold and carry the cosine as weight. Two graph
attention layers refine the node features, the input features are added back
after the last layer, and a shared linear head classifies each node.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, ZeroNormNodeError
from .nn import Linear, Parameter, cross_entropy, rng_for
from .tensor import Tensor

_MASK_FILL = 30.0  # logit offset that zeroes masked-out attention entries


def build_adjacency(features: Tensor, delta: float = 0.5) -> Tensor:
    """Thresholded cosine adjacency: A_ij = cos(x_i, x_j) when it exceeds
    delta (strict), else 0. Rows must have positive norm; absent prototype
    cells are excluded before this step."""
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.data.ndim != 2:
        raise ShapeError(f"build_adjacency: expected (n, d), got {x.data.shape}")
    sq_norms = (x.data ** 2).sum(axis=1)
    if np.any(sq_norms < 1e-24):
        raise ZeroNormNodeError("zero-norm node row; drop it before building the graph")
    norms = (x * x).sum(axis=1, keepdims=True).sqrt()
    unit = x / norms
    cos = unit.matmul(unit.transpose())
    mask = (cos.data > delta).astype(np.float64)
    return cos * Tensor(mask)


class GatLayer:
    """Single graph attention layer with cosine-weighted masked softmax."""

    def __init__(self, dim: int, seed_rng: np.random.Generator, slope: float = 0.2):
        self.dim = dim
        self.slope = slope
        self.weight = Parameter(seed_rng.normal(0.0, np.sqrt(2.0 / dim), size=(dim, dim)))
        self.attn = Parameter(seed_rng.normal(0.0, 1.0 / np.sqrt(2.0 * dim), size=(2 * dim,)))

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.attn]


def gat_layer(layer: GatLayer, features: Tensor, adjacency: Tensor,
              activation: str = "relu") -> Tensor:
    """One attention pass: scores from concatenated projected pairs,
    adjacency-masked and adjacency-weighted softmax over each neighborhood,
    then the weighted sum of projected neighbors."""
    x = features if isinstance(features, Tensor) else Tensor(features)
    a = adjacency if isinstance(adjacency, Tensor) else Tensor(adjacency)
    n = x.data.shape[0]
    if a.data.shape != (n, n):
        raise ShapeError(f"gat_layer: adjacency {a.data.shape} vs {n} nodes")
    wx = x.matmul(layer.weight.t)  # (n, d')
    d_out = wx.data.shape[1]
    src = wx.matmul(layer.attn.t[:d_out])  # (n,)
    dst = wx.matmul(layer.attn.t[d_out:])  # (n,)
    scores = src.reshape(n, 1) + dst.reshape(1, n)
    e = scores.leaky_relu(layer.slope)

    mask = (a.data > 0.0).astype(np.float64)
    if np.any(mask.sum(axis=1) == 0.0):
        raise ShapeError("gat_layer: a node has an empty neighborhood (no self-loop)")
    shift = np.where(mask > 0, e.data, -np.inf).max(axis=1, keepdims=True)
    z = (e - Tensor(shift)) * Tensor(mask) - Tensor((1.0 - mask) * _MASK_FILL)
    weighted = a * z.exp()
    alpha = weighted / weighted.sum(axis=1, keepdims=True)
    out = alpha.matmul(wx)
    if activation == "relu":
        return out.relu()
    if activation == "identity":
        return out
    raise ValueError(f"unknown activation {activation!r}")


class ProtoGraphHead:
    """Two stacked attention layers, residual input combination, and a
    shared node classifier."""

    def __init__(self, dim: int, classes: int, seed: int, slope: float = 0.2):
        rng = rng_for(seed, "protogr")
        self.layer1 = GatLayer(dim, rng, slope)
        self.layer2 = GatLayer(dim, rng, slope)
        self.fc = Linear(dim, classes, rng)

    def parameters(self) -> list[Parameter]:
        return self.layer1.parameters() + self.layer2.parameters() + self.fc.parameters()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "gat1.weight": self.layer1.weight.data.copy(),
            "gat1.attn": self.layer1.attn.data.copy(),
            "gat2.weight": self.layer2.weight.data.copy(),
            "gat2.attn": self.layer2.attn.data.copy(),
            "fc.weight": self.fc.weight.data.copy(),
            "fc.bias": self.fc.bias.data.copy(),
        }

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.layer1.weight.replace(arrays["gat1.weight"])
        self.layer1.attn.replace(arrays["gat1.attn"])
        self.layer2.weight.replace(arrays["gat2.weight"])
        self.layer2.attn.replace(arrays["gat2.attn"])
        self.fc.weight.replace(arrays["fc.weight"])
        self.fc.bias.replace(arrays["fc.bias"])


def protogr_forward(head: ProtoGraphHead, features: Tensor, adjacency: Tensor) -> Tensor:
    """Node logits: FC(layer2(layer1(X)) + X)."""
    h1 = gat_layer(head.layer1, features, adjacency, "relu")
    h2 = gat_layer(head.layer2, h1, adjacency, "identity")
    return head.fc(h2 + features)


def protogr_loss(head: ProtoGraphHead, features: Tensor, adjacency: Tensor,
                 node_classes: np.ndarray) -> Tensor:
    logits = protogr_forward(head, features, adjacency)
    return cross_entropy(logits, node_classes)
