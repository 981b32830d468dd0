"""Optimizer configuration and the Lion update rule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import torch

from ..errors import UnknownOptimizer

OPTIMIZERS = ("sgd", "adam", "adamw", "lion")

# (name, task) -> (learning rate, betas)
DEFAULTS = {
    ("sgd", "vision"): (3e-2, (0.9, 0.999)),
    ("adam", "vision"): (3e-4, (0.9, 0.999)),
    ("adamw", "vision"): (3e-4, (0.9, 0.999)),
    ("lion", "vision"): (3e-4, (0.9, 0.99)),
    ("sgd", "text"): (5e-4, (0.9, 0.99)),
    ("adam", "text"): (3e-6, (0.9, 0.99)),
    ("adamw", "text"): (3e-6, (0.9, 0.99)),
    ("lion", "text"): (3e-6, (0.95, 0.98)),
}


@dataclass
class OptimizerConfig:
    name: str = "adam"
    learning_rate: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    momentum: float = 0.0  # sgd only

    def __post_init__(self) -> None:
        self.name = self.name.lower()
        self.betas = (float(self.betas[0]), float(self.betas[1]))
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not all(0.0 < b < 1.0 for b in self.betas):
            raise ValueError("betas must lie in (0, 1)")

    @classmethod
    def default(cls, name: str, task: str = "vision", **overrides) -> "OptimizerConfig":
        key = (name.lower(), task)
        if key not in DEFAULTS:
            raise UnknownOptimizer(f"no defaults for optimizer {name!r} on task {task!r}")
        lr, betas = DEFAULTS[key]
        if name.lower() == "adamw":
            overrides.setdefault("weight_decay", 1e-2)
        return cls(name=name, learning_rate=lr, betas=betas, **overrides)


class Lion(torch.optim.Optimizer):
    """Sign-momentum optimizer.

    update = sign(b1 * m + (1 - b1) * g); p -= lr * (update + wd * p);
    m = b2 * m + (1 - b2) * g.
    """

    def __init__(self, params, lr: float = 3e-4, betas=(0.9, 0.99), weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"invalid learning rate {lr}")
        super().__init__(params, dict(lr=lr, betas=betas, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            lr, wd = group["lr"], group["weight_decay"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["exp_avg"] = torch.zeros_like(p)
                m = state["exp_avg"]
                update = (m * beta1 + p.grad * (1 - beta1)).sign_()
                if wd:
                    p.mul_(1 - lr * wd)
                p.add_(update, alpha=-lr)
                m.mul_(beta2).add_(p.grad, alpha=1 - beta2)
        return loss


def make_optimizer(cfg: OptimizerConfig, params: Iterable[torch.nn.Parameter]) -> torch.optim.Optimizer:
    params = list(params)
    if cfg.name == "sgd":
        return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    if cfg.name == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.betas, weight_decay=cfg.weight_decay)
    if cfg.name == "adamw":
        return torch.optim.AdamW(params, lr=cfg.learning_rate, betas=cfg.betas, weight_decay=cfg.weight_decay)
    if cfg.name == "lion":
        return Lion(params, lr=cfg.learning_rate, betas=cfg.betas, weight_decay=cfg.weight_decay)
    raise UnknownOptimizer(f"unknown optimizer {cfg.name!r}; expected one of {OPTIMIZERS}")
