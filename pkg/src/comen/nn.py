"""Training plumbing: parameters, layers, SGD with momentum, seed streams."""

from __future__ import annotations

import zlib

import numpy as np

from .errors import LabelRangeError, ShapeError
from .tensor import Tensor


def rng_for(seed: int, *labels) -> np.random.Generator:
    """Independent, reproducible generator for (seed, purpose) pairs.

    Deriving every consumer's stream from its own label keeps unrelated
    components from shifting each other's randomness.
    """
    key = tuple(zlib.crc32(str(label).encode("utf-8")) for label in labels)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))


class Parameter:
    """Mutable slot holding the current value of a trainable tensor.

    Updates replace the tensor functionally; tensors already recorded in a
    graph are never mutated in place.
    """

    def __init__(self, value: np.ndarray):
        self.t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)

    @property
    def data(self) -> np.ndarray:
        return self.t.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.t.grad

    def replace(self, value: np.ndarray) -> None:
        self.t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out)))
        self.bias = Parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x.matmul(self.weight.t) + self.bias.t

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class Conv2d:
    """3x3 stride-1 convolution with configurable zero padding."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 kernel: int = 3, padding: int = 1):
        fan_in = in_channels * kernel * kernel
        self.weight = Parameter(
            rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_channels, in_channels, kernel, kernel))
        )
        self.bias = Parameter(np.zeros(out_channels))
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return x.conv2d(self.weight.t, self.bias.t, padding=self.padding)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class SGD:
    """SGD with classical momentum and L2 weight decay."""

    def __init__(self, parameters: list[Parameter], lr: float,
                 momentum: float = 0.9, weight_decay: float = 5e-4):
        self.parameters = list(parameters)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buffers = [np.zeros_like(p.data) for p in self.parameters]

    def step(self) -> None:
        for p, buf in zip(self.parameters, self._buffers):
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf *= self.momentum
            buf += g
            p.replace(p.data - self.lr * buf)


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError(f"one_hot: labels must be 1-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelRangeError(f"label outside [0, {classes})")
    out = np.zeros((labels.size, classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of row logits against integer labels."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.data.shape}")
    n, k = logits.data.shape
    hot = Tensor(one_hot(labels, k))
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = logits - shift
    lse = z.exp().sum(axis=1, keepdims=True).log()
    log_probs = z - lse
    return -(hot * log_probs).sum() / float(n)
