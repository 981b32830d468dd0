"""Checkpoints: architecture spec, one flat parameter vector, metadata.

Stored as ``.npz`` so loading never unpickles arbitrary objects.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from .models import PiracyModelSpec, build_model


def save_checkpoint(path: str | Path, model: torch.nn.Module, spec: PiracyModelSpec,
                    metadata: dict[str, Any] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    flat = parameters_to_vector(model.parameters()).detach().cpu().numpy().astype(np.float32)
    with path.open("wb") as fh:
        np.savez(
            fh,
            spec=np.array(json.dumps(asdict(spec))),
            params=flat,
            metadata=np.array(json.dumps(metadata or {}, default=str)),
        )


def load_checkpoint(path: str | Path) -> tuple[torch.nn.Module, PiracyModelSpec, dict[str, Any]]:
    with np.load(Path(path), allow_pickle=False) as z:
        spec_d = json.loads(str(z["spec"]))
        flat = torch.as_tensor(z["params"])
        meta = json.loads(str(z["metadata"]))
    spec_d["init"] = "scratch"
    spec_d["pretrained_source"] = None
    spec = PiracyModelSpec(**spec_d)
    model = build_model(spec)
    vector_to_parameters(flat, model.parameters())
    model.eval()
    return model, spec, meta
