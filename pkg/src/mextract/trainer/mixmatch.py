"""MixMatch semi-supervised training for low query budgets.

Each step pairs a batch of queried (labeled) inputs with an equally sized
batch of unqueried pool inputs.  Pseudo-labels for the latter are the
sharpened average prediction over K augmentations; both sets are then
mixed up against a shuffled union of the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import EmptyPairs, SizeMismatch
from .augment import AugmentConfig, augment_batch
from .kd import TrainResult, check_targets, kd_loss, predict_classes
from .optim import OptimizerConfig, make_optimizer


@dataclass
class MixMatchConfig:
    temperature: float = 0.5
    augmentations: int = 2
    mixup_alpha: float = 0.75
    unlabeled_weight: float = 10.0
    rampup: float = 0.4  # fraction of all steps over which the weight ramps up linearly

    def __post_init__(self) -> None:
        if not 0 < self.temperature <= 1:
            raise ValueError("temperature must lie in (0, 1]")
        if self.augmentations < 1:
            raise ValueError("need at least one augmentation")
        if self.mixup_alpha <= 0:
            raise ValueError("mixup_alpha must be positive")


def sharpen(p: np.ndarray | torch.Tensor, temperature: float):
    if isinstance(p, torch.Tensor):
        q = p.pow(1.0 / temperature)
        return q / q.sum(dim=-1, keepdim=True)
    q = np.asarray(p, dtype=np.float64) ** (1.0 / temperature)
    return q / q.sum(axis=-1, keepdims=True)


@dataclass
class MixMatchBatch:
    x: torch.Tensor
    x_targets: torch.Tensor
    u: torch.Tensor
    u_targets: torch.Tensor
    lam: float


def mixmatch_round(
    labeled_x: torch.Tensor,
    labeled_y: torch.Tensor,
    unlabeled: torch.Tensor,
    model: nn.Module,
    cfg: MixMatchConfig,
    seed: int | torch.Generator,
    aug: AugmentConfig | None = None,
) -> MixMatchBatch:
    """Produce the mixed labeled set X' and pseudo-labeled set U'."""
    labeled_x = torch.as_tensor(labeled_x, dtype=torch.float32)
    labeled_y = torch.as_tensor(labeled_y, dtype=torch.float32)
    unlabeled = torch.as_tensor(unlabeled, dtype=torch.float32)
    if len(labeled_x) != len(unlabeled) or len(labeled_x) != len(labeled_y):
        raise SizeMismatch(f"labeled batch {len(labeled_x)} vs unlabeled batch {len(unlabeled)}")
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    aug = aug or AugmentConfig()
    b = len(labeled_x)

    x_hat = augment_batch(labeled_x, gen, aug)
    u_hats = [augment_batch(unlabeled, gen, aug) for _ in range(cfg.augmentations)]
    was_training = model.training
    model.eval()
    with torch.no_grad():
        avg = torch.stack([torch.softmax(model(u).double(), dim=-1) for u in u_hats]).mean(0)
    model.train(was_training)
    q = sharpen(avg, cfg.temperature).float()

    all_x = torch.cat([x_hat, *u_hats])
    all_y = torch.cat([labeled_y, q.repeat(cfg.augmentations, 1)])
    # one Beta draw per batch, from the torch generator for reproducibility
    lam = _beta(cfg.mixup_alpha, gen)
    lam = max(lam, 1.0 - lam)
    perm = torch.randperm(len(all_x), generator=gen)
    mixed_x = lam * all_x + (1 - lam) * all_x[perm]
    mixed_y = lam * all_y + (1 - lam) * all_y[perm]
    return MixMatchBatch(mixed_x[:b], mixed_y[:b], mixed_x[b:], mixed_y[b:], lam)


def _beta(alpha: float, gen: torch.Generator) -> float:
    seed = int(torch.randint(0, 2**31 - 1, (1,), generator=gen))
    return float(np.random.default_rng(seed).beta(alpha, alpha))


def mixmatch_train(
    inputs: np.ndarray,
    targets: np.ndarray,
    unlabeled: np.ndarray,
    model: nn.Module,
    opt: OptimizerConfig | None = None,
    epochs: int = 200,
    cfg: MixMatchConfig | None = None,
    seed: int = 0,
    batch_size: int = 64,
    aug: AugmentConfig | None = None,
    holdout: tuple[np.ndarray, np.ndarray] | None = None,
) -> TrainResult:
    """Semi-supervised training; an epoch is one pass over the larger of the two sets."""
    if len(inputs) == 0:
        raise EmptyPairs("no query-response pairs to train on")
    cfg = cfg or MixMatchConfig()
    opt = opt or OptimizerConfig()
    x = torch.as_tensor(np.asarray(inputs, dtype=np.float32))
    y = torch.as_tensor(check_targets(targets), dtype=torch.float32)
    u = torch.as_tensor(np.asarray(unlabeled, dtype=np.float32))
    if len(u) == 0:
        raise SizeMismatch("MixMatch needs unlabeled inputs")
    gen = torch.Generator().manual_seed(int(seed))
    optimizer = make_optimizer(opt, model.parameters())

    b = min(batch_size, len(x), len(u))
    steps_per_epoch = math.ceil(max(len(x), len(u)) / b)
    total_steps = steps_per_epoch * epochs
    ramp_steps = max(1, int(cfg.rampup * total_steps))
    step = 0
    losses: list[float] = []
    fid: list[float] = []
    for _ in range(epochs):
        running = 0.0
        for _ in range(steps_per_epoch):
            li = torch.randint(0, len(x), (b,), generator=gen)
            ui = torch.randint(0, len(u), (b,), generator=gen)
            mb = mixmatch_round(x[li], y[li], u[ui], model, cfg, gen, aug)
            model.train()
            logits = model(torch.cat([mb.x, mb.u]))
            lx = kd_loss(logits[:b], mb.x_targets)
            lu = F.mse_loss(torch.softmax(logits[b:], dim=-1), mb.u_targets)
            weight = cfg.unlabeled_weight * min(1.0, step / ramp_steps)
            loss = lx + weight * lu
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            running += loss.item()
            step += 1
        losses.append(running / steps_per_epoch)
        if holdout is not None:
            hx, hy = holdout
            fid.append(float(np.mean(predict_classes(model, hx) == np.asarray(hy))))
    return TrainResult(model, losses, fid)
