"""Training-time views: random crop with zero padding and horizontal flip."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class AugmentConfig:
    enabled: bool = True
    pad: int | None = None  # default: an eighth of the image side, at least 1
    hflip: bool = True


def _pad_for(h: int, cfg: AugmentConfig) -> int:
    return cfg.pad if cfg.pad is not None else max(1, h // 8)


def augment_batch(x: torch.Tensor, generator: torch.Generator, cfg: AugmentConfig | None = None) -> torch.Tensor:
    """Independently augment each image of an (N, C, H, W) batch."""
    cfg = cfg or AugmentConfig()
    if not cfg.enabled or x.ndim != 4:
        return x
    n, _, h, w = x.shape
    p = _pad_for(h, cfg)
    dy = torch.randint(0, 2 * p + 1, (n,), generator=generator)
    dx = torch.randint(0, 2 * p + 1, (n,), generator=generator)
    flip = torch.rand(n, generator=generator) < 0.5 if cfg.hflip else torch.zeros(n, dtype=torch.bool)
    padded = F.pad(x, (p, p, p, p))
    rows = (dy[:, None] + torch.arange(h)[None, :])  # (n, h)
    cols = (dx[:, None] + torch.arange(w)[None, :])  # (n, w)
    cols = torch.where(flip[:, None], cols.flip(1), cols)
    idx_r = rows[:, None, :, None].expand(n, x.shape[1], h, padded.shape[3])
    out = padded.gather(2, idx_r)
    idx_c = cols[:, None, None, :].expand(n, x.shape[1], h, w)
    return out.gather(3, idx_c)


def augment(x: np.ndarray, seed: int, cfg: AugmentConfig | None = None) -> np.ndarray:
    """Augmented copy of a single (C, H, W) input; shape and range preserved."""
    cfg = cfg or AugmentConfig()
    if not cfg.enabled:
        return x
    g = torch.Generator().manual_seed(int(seed))
    t = torch.as_tensor(np.asarray(x, dtype=np.float32))[None]
    return augment_batch(t, g, cfg)[0].numpy().astype(np.asarray(x).dtype, copy=False)
