"""Query generation: random sampling, k-center coresets, adversarial inputs.

Adversarial examples are crafted against the piracy model (the attacker has
no gradients of the victim), untargeted with respect to the piracy model's
own prediction on the clean input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import EmptyCenters, NonContinuousInput, PoolExhausted, RatioIndivisible

STRATEGIES = ("basic", "active_kcenter", "adversarial_pgd", "adversarial_cw", "mixed")


@dataclass
class AdversarialConfig:
    method: str = "pgd"
    epsilon: float = 4 / 255
    alpha: float = 2 / 255
    iterations: int = 7
    random_init: bool = True
    kappa: float = 40.0
    steps: int = 50
    step_size: float = 0.01
    c: float = 1.0  # weight of the margin term in the CW objective

    def __post_init__(self) -> None:
        if self.method not in ("pgd", "cw"):
            raise ValueError(f"unknown adversarial method {self.method!r}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.iterations < 1 or self.steps < 1:
            raise ValueError("iterations and steps must be at least 1")


@dataclass
class QueryPlan:
    indices: list[int]
    adversarial_inputs: list[np.ndarray] = field(default_factory=list)
    ratio: tuple[int, int] = (0, 1)

    @property
    def size(self) -> int:
        return len(self.indices) + len(self.adversarial_inputs)


# --------------------------------------------------------------------------
# pool selection


def random_select(pool_size: int, k: int, seed: int, already_used: Iterable[int] = ()) -> list[int]:
    used = set(int(i) for i in already_used)
    available = np.array([i for i in range(pool_size) if i not in used], dtype=np.int64)
    if k > len(available):
        raise PoolExhausted(f"asked for {k} fresh indices, only {len(available)} left")
    rng = np.random.default_rng(seed)
    return [int(i) for i in rng.choice(available, size=k, replace=False)]


def kcenter_greedy(
    candidate_embeddings: np.ndarray | Sequence[Sequence[float]],
    center_embeddings: np.ndarray | Sequence[Sequence[float]],
    k: int,
) -> list[int]:
    """Greedy farthest-first selection, ties to the lowest candidate index."""
    cand = np.asarray(candidate_embeddings, dtype=np.float64)
    centers = np.asarray(center_embeddings, dtype=np.float64)
    if cand.ndim == 1:
        cand = cand[:, None]
    if centers.ndim == 1:
        centers = centers[:, None]
    if len(centers) == 0:
        raise EmptyCenters("k-center selection needs at least one center")
    if len(cand) == 0 or k > len(cand):
        raise PoolExhausted(f"cannot pick {k} of {len(cand)} candidates")

    min_dist = np.full(len(cand), np.inf)
    for start in range(0, len(centers), 1024):
        d = _pairwise(cand, centers[start : start + 1024])
        np.minimum(min_dist, d.min(axis=1), out=min_dist)
    chosen: list[int] = []
    for _ in range(k):
        i = int(np.argmax(min_dist))
        chosen.append(i)
        np.minimum(min_dist, _pairwise(cand, cand[i : i + 1])[:, 0], out=min_dist)
        min_dist[chosen] = -np.inf
    return chosen


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))


# --------------------------------------------------------------------------
# adversarial examples


def _check_continuous(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        raise NonContinuousInput(f"adversarial strategies need continuous inputs, got dtype {x.dtype}")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise NonContinuousInput("adversarial strategies need features in [0, 1]")
    return x


def _model_dtype(model: nn.Module) -> torch.dtype:
    p = next(model.parameters(), None)
    return p.dtype if p is not None else torch.float32


def pgd_batch(model: nn.Module, xs: np.ndarray, cfg: AdversarialConfig, seed: int = 0) -> np.ndarray:
    """L-infinity PGD maximising cross-entropy at the model's clean prediction."""
    xs = _check_continuous(xs)
    dtype = _model_dtype(model)
    x0 = torch.as_tensor(xs, dtype=dtype)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        labels = model(x0).argmax(dim=1)
    gen = torch.Generator().manual_seed(int(seed))
    if cfg.random_init:
        noise = (torch.rand(x0.shape, generator=gen, dtype=dtype) * 2 - 1) * cfg.epsilon
        x = torch.clamp(x0 + noise, 0.0, 1.0)
    else:
        x = x0.clone()
    for _ in range(cfg.iterations):
        x.requires_grad_(True)
        loss = F.cross_entropy(model(x), labels)
        (grad,) = torch.autograd.grad(loss, x)
        with torch.no_grad():
            x = x + cfg.alpha * grad.sign()
            x = torch.min(torch.max(x, x0 - cfg.epsilon), x0 + cfg.epsilon)
            x = torch.clamp(x, 0.0, 1.0)
    model.train(was_training)
    return x.detach().numpy().astype(xs.dtype, copy=False)


def gen_adversarial_pgd(model: nn.Module, x: np.ndarray, cfg: AdversarialConfig, seed: int = 0) -> np.ndarray:
    return pgd_batch(model, np.asarray(x)[None], cfg, seed)[0]


def _margin(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Z_label minus the largest other logit; positive while still classified as label."""
    true = logits.gather(1, labels[:, None])[:, 0]
    other = logits.masked_fill(F.one_hot(labels, logits.shape[1]).bool(), -torch.inf).max(dim=1).values
    return true - other


def cw_batch(
    model: nn.Module,
    xs: np.ndarray,
    cfg: AdversarialConfig,
    seed: int = 0,
    labels: Sequence[int] | None = None,
) -> np.ndarray:
    """Untargeted Carlini-Wagner L2 with tanh box reparameterisation.

    Minimises ||x' - x||^2 + c * max(margin, -kappa) with Adam for
    ``cfg.steps`` steps and returns, per input, the iterate with the lowest
    objective; the clean input itself wins ties.  ``labels`` default to the
    model's clean predictions.
    """
    xs = _check_continuous(xs)
    dtype = _model_dtype(model)
    x0 = torch.as_tensor(xs, dtype=torch.float64)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        y = model(x0.to(dtype)).argmax(dim=1) if labels is None else torch.as_tensor(labels, dtype=torch.long)
    scale = 1 - 1e-7
    w = torch.atanh((x0 * 2 - 1) * scale).clone().requires_grad_(True)
    opt = torch.optim.Adam([w], lr=cfg.step_size)

    def to_x(w: torch.Tensor) -> torch.Tensor:
        return (torch.tanh(w) / scale + 1) / 2

    best = x0.clone()
    best_obj = torch.full((len(x0),), torch.inf, dtype=torch.float64)
    flat = tuple(range(1, x0.ndim))
    for _ in range(cfg.steps):
        xa = to_x(w).clamp(0.0, 1.0)
        margin = _margin(model(xa.to(dtype)).double(), y)
        dist = ((xa - x0) ** 2).sum(dim=flat)
        f = torch.clamp(margin, min=-cfg.kappa)
        loss = (dist + cfg.c * f).sum()
        with torch.no_grad():
            obj = dist + cfg.c * f
            improved = obj < best_obj
            best_obj = torch.where(improved, obj, best_obj)
            best[improved] = xa[improved].detach()
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.train(was_training)
    # never return a point with a worse objective than the clean input
    with torch.no_grad():
        clean_obj = cfg.c * torch.clamp(_margin(model(x0.to(dtype)).double(), y), min=-cfg.kappa)
        keep_clean = clean_obj <= best_obj
        best[keep_clean] = x0[keep_clean]
    return best.clamp(0.0, 1.0).numpy().astype(xs.dtype, copy=False)


def gen_adversarial_cw(model: nn.Module, x: np.ndarray, cfg: AdversarialConfig, seed: int = 0) -> np.ndarray:
    return cw_batch(model, np.asarray(x)[None], cfg, seed)[0]


def gen_adversarial(model: nn.Module, xs: np.ndarray, cfg: AdversarialConfig, seed: int = 0) -> np.ndarray:
    if cfg.method == "pgd":
        return pgd_batch(model, xs, cfg, seed)
    return cw_batch(model, xs, cfg, seed)


# --------------------------------------------------------------------------
# mixing


def ratio_counts(ratio: tuple[int, int], batch_size: int) -> tuple[int, int]:
    """(adversarial, clean) counts for one batch."""
    adv, clean = int(ratio[0]), int(ratio[1])
    if adv < 0 or clean < 0 or adv + clean == 0:
        raise RatioIndivisible(f"invalid ratio {ratio}")
    if batch_size % (adv + clean):
        raise RatioIndivisible(f"batch size {batch_size} not divisible by {adv}+{clean}")
    unit = batch_size // (adv + clean)
    return adv * unit, clean * unit


def mix_batch(
    clean: Sequence[np.ndarray] | np.ndarray,
    adversarial: Sequence[np.ndarray] | np.ndarray,
    ratio: tuple[int, int],
    batch_size: int = 64,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Shuffled batch with the prescribed adversarial:clean counts.

    Returns the stacked batch and a boolean mask marking adversarial rows.
    """
    n_adv, n_clean = ratio_counts(ratio, batch_size)
    if len(adversarial) < n_adv or len(clean) < n_clean:
        raise RatioIndivisible(f"need {n_adv} adversarial and {n_clean} clean inputs")
    parts = [np.asarray(a) for a in list(adversarial)[:n_adv]] + [np.asarray(c) for c in list(clean)[:n_clean]]
    mask = np.array([True] * n_adv + [False] * n_clean)
    order = np.random.default_rng(seed).permutation(batch_size)
    return np.stack(parts)[order], mask[order]
