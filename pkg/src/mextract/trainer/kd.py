"""Knowledge-distillation training on query-response pairs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import DegradedLabels, EmptyPairs
from .augment import AugmentConfig, augment_batch
from .optim import OptimizerConfig, make_optimizer


def kd_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean over examples of -sum_j t_j log softmax(logits)_j."""
    return -(targets * F.log_softmax(logits, dim=-1)).sum(dim=-1).mean()


def cross_entropy(target: Sequence[float], pred: Sequence[float]) -> float:
    """Per-example soft cross-entropy between two probability vectors."""
    t = np.asarray(target, dtype=np.float64)
    q = np.asarray(pred, dtype=np.float64)
    mask = t > 0
    return float(-(t[mask] * np.log(q[mask])).sum())


def check_targets(targets: np.ndarray, atol: float = 1e-6) -> np.ndarray:
    t = np.asarray(targets, dtype=np.float64)
    if t.ndim != 2:
        raise DegradedLabels(f"targets must be an (n, m) array of simplexes, got shape {t.shape}")
    if not np.all(np.isfinite(t)) or t.min() < -atol or t.max() > 1 + atol:
        raise DegradedLabels("targets contain entries outside [0, 1]")
    if np.abs(t.sum(axis=1) - 1).max() > atol:
        raise DegradedLabels("targets are not normalised; lift degraded responses first")
    return t


@dataclass
class TrainResult:
    model: nn.Module
    losses: list[float]
    holdout_fidelity: list[float] = field(default_factory=list)

    def write_trace(self, path: str | Path) -> None:
        write_loss_trace(path, self.losses, self.holdout_fidelity)


def write_loss_trace(path: str | Path, losses: Sequence[float], fidelity: Sequence[float] = ()) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "fidelity"])
        for i, loss in enumerate(losses):
            w.writerow([i + 1, repr(float(loss)), repr(float(fidelity[i])) if i < len(fidelity) else ""])


def predict_proba(model: nn.Module, x: np.ndarray | torch.Tensor, batch_size: int = 512) -> np.ndarray:
    model.eval()
    x = torch.as_tensor(np.asarray(x, dtype=np.float32))
    with torch.no_grad():
        out = [torch.softmax(model(x[i : i + batch_size]), dim=-1) for i in range(0, len(x), batch_size)]
    return torch.cat(out).double().numpy() if out else np.zeros((0, getattr(model, "num_classes", 0)))


def predict_classes(model: nn.Module, x: np.ndarray) -> np.ndarray:
    return predict_proba(model, x).argmax(axis=1)


def kd_train(
    inputs: np.ndarray,
    targets: np.ndarray,
    model: nn.Module,
    opt: OptimizerConfig | None = None,
    epochs: int = 200,
    augment: bool | AugmentConfig = False,
    seed: int = 0,
    batch_size: int = 64,
    holdout: tuple[np.ndarray, np.ndarray] | None = None,
) -> TrainResult:
    """Train ``model`` in place to match soft targets.

    ``holdout`` is an optional ``(inputs, victim_classes)`` pair; when given,
    fidelity on it is recorded after every epoch.
    """
    if len(inputs) == 0:
        raise EmptyPairs("no query-response pairs to train on")
    if len(inputs) != len(targets):
        raise EmptyPairs("inputs and targets differ in length")
    t = torch.as_tensor(check_targets(targets), dtype=torch.float32)
    x = torch.as_tensor(np.asarray(inputs, dtype=np.float32))
    opt = opt or OptimizerConfig()
    aug_cfg = augment if isinstance(augment, AugmentConfig) else AugmentConfig(enabled=bool(augment))
    optimizer = make_optimizer(opt, model.parameters())
    gen = torch.Generator().manual_seed(int(seed))

    losses: list[float] = []
    fid: list[float] = []
    n = len(x)
    for _ in range(epochs):
        model.train()
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            xb = augment_batch(x[idx], gen, aug_cfg)
            loss = kd_loss(model(xb), t[idx])
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
        losses.append(total / n)
        if holdout is not None:
            hx, hy = holdout
            fid.append(float(np.mean(predict_classes(model, hx) == np.asarray(hy))))
    return TrainResult(model, losses, fid)
