"""Lifting degraded oracle responses back onto the probability simplex."""

from __future__ import annotations

import numpy as np

from ..oracle import DegradedResponse, ResponsePolicy
from ..retro import impute_full_simplex


def lift_response(response: DegradedResponse, policy: ResponsePolicy, num_classes: int) -> np.ndarray:
    """Full simplex target for KD training.

    top1 uses max-entropy imputation, label_only becomes one-hot, quantized
    midpoints and descriptor buckets (mapped to their interval centres) are
    renormalised.
    """
    kind = policy.kind
    if kind == "full":
        p = np.asarray(response, dtype=np.float64)
        return p / p.sum()
    if kind == "top1":
        cls, conf = response
        return impute_full_simplex(int(cls), float(conf), num_classes)
    if kind == "label_only":
        p = np.zeros(num_classes)
        p[int(response)] = 1.0
        return p
    if kind == "quantized":
        p = np.asarray(response, dtype=np.float64)
        return p / p.sum()
    edges = (0.0,) + policy.thresholds + (1.0,)
    centre = {name: (edges[i] + edges[i + 1]) / 2 for i, name in enumerate(policy.descriptor_names)}
    p = np.array([centre[name] for name in response])
    return p / p.sum()


def lift_many(responses, policy: ResponsePolicy, num_classes: int) -> np.ndarray:
    return np.stack([lift_response(r, policy, num_classes) for r in responses])
