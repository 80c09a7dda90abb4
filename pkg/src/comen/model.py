"""Encoder and class predictor.

Two 3x3 conv blocks, each followed by domain-specific normalization, ReLU
and 2x2 mean pooling, then a linear map to the shared embedding width and a
linear class head. The first conv block's raw output also feeds the style
vectors consumed by the domain predictor.
"""

from __future__ import annotations

import numpy as np

from .nn import Conv2d, Linear, Parameter, rng_for
from .stylenorm import SDNormLayer, sdnorm_forward
from .tensor import Tensor


class Encoder:
    def __init__(self, in_channels: int, classes: int, domains: int, seed: int, cfg):
        rng = rng_for(seed, "encoder")
        c1, c2 = cfg.conv_channels
        self.in_channels = in_channels
        self.classes = classes
        self.domains = domains
        self.embed_dim = cfg.embed_dim
        self.conv1 = Conv2d(in_channels, c1, rng)
        self.norm1 = SDNormLayer(c1, domains, eps=cfg.eps, momentum=cfg.norm_momentum)
        self.conv2 = Conv2d(c1, c2, rng)
        self.norm2 = SDNormLayer(c2, domains, eps=cfg.eps, momentum=cfg.norm_momentum)
        self._flat_dim = None  # fixed on first forward
        self._fc_rng = rng
        self.fc: Linear | None = None
        self.classifier: Linear | None = None

    def _ensure_head(self, flat_dim: int) -> None:
        if self.fc is None:
            self._flat_dim = flat_dim
            self.fc = Linear(flat_dim, self.embed_dim, self._fc_rng)
            self.classifier = Linear(self.embed_dim, self.classes, self._fc_rng)
        elif flat_dim != self._flat_dim:
            raise ValueError(f"flattened width changed: {flat_dim} != {self._flat_dim}")

    def conv1_features(self, x: Tensor) -> Tensor:
        return self.conv1(x)

    def embed_from_conv1(self, c1: Tensor, assignments: Tensor, mode: str,
                         update_running: bool = True) -> Tensor:
        h = sdnorm_forward(self.norm1, c1, assignments, mode, update_running)
        h = h.relu().avg_pool2d(2)
        h = self.conv2(h)
        h = sdnorm_forward(self.norm2, h, assignments, mode, update_running)
        h = h.relu().avg_pool2d(2)
        b = h.data.shape[0]
        flat = h.reshape(b, int(np.prod(h.data.shape[1:])))
        self._ensure_head(flat.data.shape[1])
        return self.fc(flat)

    def head(self, embedding: Tensor) -> Tensor:
        return self.classifier(embedding)

    def head_from_conv1(self, c1: Tensor, assignments: Tensor, mode: str,
                        update_running: bool = True) -> Tensor:
        return self.head(self.embed_from_conv1(c1, assignments, mode, update_running))

    def forward(self, x: Tensor, assignments: Tensor, mode: str,
                update_running: bool = True) -> tuple[Tensor, Tensor]:
        """Returns (logits, embedding)."""
        emb = self.embed_from_conv1(self.conv1_features(x), assignments, mode, update_running)
        return self.head(emb), emb

    def parameters(self) -> list[Parameter]:
        params = (self.conv1.parameters() + self.norm1.parameters()
                  + self.conv2.parameters() + self.norm2.parameters())
        if self.fc is not None:
            params += self.fc.parameters() + self.classifier.parameters()
        return params

    def materialize(self, image_hw: tuple[int, int]) -> None:
        """Create the head layers without a real batch (fixed input size)."""
        h, w = image_hw
        dummy = Tensor(np.zeros((2, self.in_channels, h, w)))
        ones = Tensor(np.full((2, self.domains), 1.0 / self.domains))
        self.embed_from_conv1(self.conv1_features(dummy), ones, "infer", update_running=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {
            "conv1.weight": self.conv1.weight.data.copy(),
            "conv1.bias": self.conv1.bias.data.copy(),
            "conv2.weight": self.conv2.weight.data.copy(),
            "conv2.bias": self.conv2.bias.data.copy(),
        }
        for name, layer in (("norm1", self.norm1), ("norm2", self.norm2)):
            for key, val in layer.state_arrays().items():
                arrays[f"{name}.{key}"] = val
        if self.fc is not None:
            arrays.update({
                "fc.weight": self.fc.weight.data.copy(),
                "fc.bias": self.fc.bias.data.copy(),
                "classifier.weight": self.classifier.weight.data.copy(),
                "classifier.bias": self.classifier.bias.data.copy(),
            })
        return arrays

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.conv1.weight.replace(arrays["conv1.weight"])
        self.conv1.bias.replace(arrays["conv1.bias"])
        self.conv2.weight.replace(arrays["conv2.weight"])
        self.conv2.bias.replace(arrays["conv2.bias"])
        for name, layer in (("norm1", self.norm1), ("norm2", self.norm2)):
            layer.load_state({k.split(".", 1)[1]: v for k, v in arrays.items()
                              if k.startswith(name + ".")})
        if "fc.weight" in arrays:
            self._ensure_head(arrays["fc.weight"].shape[0])
            self.fc.weight.replace(arrays["fc.weight"])
            self.fc.bias.replace(arrays["fc.bias"])
            self.classifier.weight.replace(arrays["classifier.weight"])
            self.classifier.bias.replace(arrays["classifier.bias"])
