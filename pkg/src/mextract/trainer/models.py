"""Piracy (and toy victim) architectures.

Every network is a backbone followed by a single dense head; ``features``
returns the penultimate activations used for k-center selection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import torch
from torch import nn

from ..errors import UnknownArchitecture


@dataclass
class PiracyModelSpec:
    architecture: str = "small_cnn"
    num_classes: int = 10
    input_shape: tuple[int, ...] = (1, 8, 8)
    init: str = "scratch"  # or "pretrained"
    pretrained_source: str | None = None
    width: int = 32

    def __post_init__(self) -> None:
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.init not in ("scratch", "pretrained"):
            raise ValueError(f"init must be scratch or pretrained, not {self.init!r}")
        if self.init == "pretrained" and not self.pretrained_source:
            raise ValueError("pretrained init needs a pretrained_source")


class PiracyNet(nn.Module):
    def __init__(self, backbone: nn.Module, feature_dim: int, num_classes: int):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Linear(feature_dim, num_classes)
        self.num_classes = num_classes

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))


class BiasOnly(nn.Module):
    """Input-independent logits; the degenerate model of KD sanity checks."""

    def __init__(self, num_classes: int):
        super().__init__()
        self.bias = nn.Parameter(torch.zeros(num_classes))
        self.num_classes = num_classes

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return x.new_zeros(len(x), 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.bias.expand(len(x), -1)


def _linear(spec: PiracyModelSpec) -> PiracyNet:
    return PiracyNet(nn.Flatten(), math.prod(spec.input_shape), spec.num_classes)


def _mlp(spec: PiracyModelSpec) -> PiracyNet:
    d = math.prod(spec.input_shape)
    body = nn.Sequential(nn.Flatten(), nn.Linear(d, spec.width), nn.Tanh())
    return PiracyNet(body, spec.width, spec.num_classes)


def _small_cnn(spec: PiracyModelSpec) -> PiracyNet:
    c, h, w = spec.input_shape
    k = spec.width
    body = nn.Sequential(
        nn.Conv2d(c, k // 2, 3, padding=1),
        nn.ReLU(),
        nn.Conv2d(k // 2, k, 3, padding=1),
        nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Flatten(),
        nn.Linear(k * (h // 2) * (w // 2), 2 * k),
        nn.ReLU(),
    )
    return PiracyNet(body, 2 * k, spec.num_classes)


def _tiny_cnn(spec: PiracyModelSpec) -> PiracyNet:
    c, h, w = spec.input_shape
    k = max(spec.width // 4, 4)
    body = nn.Sequential(
        nn.Conv2d(c, k, 3, padding=1),
        nn.ReLU(),
        nn.AvgPool2d(2),
        nn.Flatten(),
        nn.Linear(k * (h // 2) * (w // 2), spec.width),
        nn.ReLU(),
    )
    return PiracyNet(body, spec.width, spec.num_classes)


ARCHITECTURES: dict[str, Callable[[PiracyModelSpec], nn.Module]] = {
    "linear": _linear,
    "mlp": _mlp,
    "small_cnn": _small_cnn,
    "tiny_cnn": _tiny_cnn,
    "bias_only": lambda spec: BiasOnly(spec.num_classes),
}

# (architecture, source id) -> callable returning a state dict
PRETRAINED_SOURCES: dict[tuple[str, str], Callable[[], dict]] = {}


def register_pretrained(architecture: str, source: str, loader: Callable[[], dict]) -> None:
    PRETRAINED_SOURCES[(architecture, source)] = loader


def build_model(spec: PiracyModelSpec, seed: int = 0) -> nn.Module:
    if spec.architecture not in ARCHITECTURES:
        raise UnknownArchitecture(f"unknown architecture {spec.architecture!r}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ARCHITECTURES[spec.architecture](spec)
    if spec.init == "pretrained":
        key = (spec.architecture, spec.pretrained_source)
        if key not in PRETRAINED_SOURCES:
            raise UnknownArchitecture(f"no pretrained weights registered for {key}")
        state = PRETRAINED_SOURCES[key]()
        # the head is always re-initialised for the oracle's label space
        state = {k: v for k, v in state.items() if not k.startswith("head.")}
        model.load_state_dict(state, strict=False)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
