"""Accuracy, fidelity, adversarial fidelity and cross-dataset fidelity."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .errors import EmptySet, LabelSpaceMismatch, LengthMismatch
from .oracle import Oracle, ResponsePolicy, response_class
from .strategies import AdversarialConfig, _check_continuous, gen_adversarial


def _rate(a: Sequence[int], b: Sequence[int]) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if len(a) != len(b):
        raise LengthMismatch(f"{len(a)} vs {len(b)} predictions")
    if len(a) == 0:
        raise EmptySet("cannot score an empty set")
    return float(np.mean(a == b))


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    return _rate(predictions, labels)


def fidelity(piracy_preds: Sequence[int], victim_preds: Sequence[int]) -> float:
    return _rate(piracy_preds, victim_preds)


def per_class_fidelity(piracy_preds: Sequence[int], victim_preds: Sequence[int]) -> dict[int, float]:
    """Agreement rate grouped by the victim's predicted class."""
    p = np.asarray(piracy_preds)
    v = np.asarray(victim_preds)
    return {int(c): float(np.mean(p[v == c] == c)) for c in np.unique(v)}


def model_classes(model: nn.Module, inputs: np.ndarray) -> np.ndarray:
    """Piracy-model argmax, evaluated row by row like the oracle's backend."""
    if len(inputs) == 0:
        return np.zeros(0, dtype=np.int64)
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(inputs), dtype=dtype)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = np.array([int(model(x[i : i + 1]).argmax(dim=1)) for i in range(len(x))])
    model.train(was_training)
    return out


def victim_classes(
    oracle: Oracle,
    inputs: np.ndarray,
    policy: ResponsePolicy | None = None,
    budget_tag: str = "eval",
    round: int = -1,
) -> np.ndarray:
    """Victim argmax through the oracle, metered on the evaluation budget."""
    policy = policy or ResponsePolicy.full()
    if len(inputs) == 0:
        return np.zeros(0, dtype=np.int64)
    records = oracle.query(list(inputs), policy=policy, round=round, budget_tag=budget_tag)
    return np.array([response_class(r.response, policy) for r in records])


@dataclass
class AdvExampleSet:
    origins: np.ndarray
    adversarial: np.ndarray
    config: AdversarialConfig

    def max_linf(self) -> float:
        if len(self.origins) == 0:
            return 0.0
        return float(np.abs(self.adversarial.astype(np.float64) - self.origins.astype(np.float64)).max())

    def satisfies_ball(self, tol: float = 1e-6) -> bool:
        in_box = bool(np.all((self.adversarial >= 0) & (self.adversarial <= 1)))
        if self.config.method != "pgd":
            return in_box
        return in_box and self.max_linf() <= self.config.epsilon + tol


def adversarial_fidelity(
    piracy: nn.Module,
    oracle: Oracle,
    testset: np.ndarray,
    adv_cfg: AdversarialConfig | None = None,
    seed: int = 0,
    policy: ResponsePolicy | None = None,
    budget_tag: str = "eval",
) -> tuple[float, AdvExampleSet]:
    """Agreement of piracy and victim on adversarial examples of the piracy model."""
    testset = np.asarray(testset)
    if len(testset) == 0:
        raise EmptySet("empty test set")
    _check_continuous(testset)
    adv_cfg = adv_cfg or AdversarialConfig()
    adv = gen_adversarial(piracy, testset, adv_cfg, seed)
    victim = victim_classes(oracle, adv, policy, budget_tag)
    rate = fidelity(model_classes(piracy, adv), victim)
    return rate, AdvExampleSet(testset, adv, adv_cfg)


@dataclass
class MetricsReport:
    accuracy: float | None
    fidelity: float
    adversarial_fidelity: float | None = None
    per_class: dict[int, float] = field(default_factory=dict)
    n_test: int = 0
    n_queries: int = 0
    config_fingerprint: str = ""

    def __post_init__(self) -> None:
        for name in ("accuracy", "fidelity", "adversarial_fidelity"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MetricsReport":
        d = dict(d)
        d["per_class"] = {int(k): float(v) for k, v in d.get("per_class", {}).items()}
        return cls(**d)


def fingerprint(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class GeneralizabilityMatrix:
    origins: list[str]
    evaluations: list[str]
    values: np.ndarray

    def __getitem__(self, key: tuple[str, str]) -> float:
        o, e = key
        return float(self.values[self.origins.index(o), self.evaluations.index(e)])

    def to_dict(self) -> dict[str, dict[str, float]]:
        return {o: {e: self[o, e] for e in self.evaluations} for o in self.origins}

    def to_table(self) -> str:
        width = max(len(s) for s in self.origins + self.evaluations + ["origin"]) + 2
        lines = ["origin".ljust(width) + "".join(e.rjust(width) for e in self.evaluations)]
        for i, o in enumerate(self.origins):
            lines.append(o.ljust(width) + "".join(f"{100 * v:.2f}".rjust(width) for v in self.values[i]))
        return "\n".join(lines)


def generalizability_matrix(
    models: Mapping[str, nn.Module],
    datasets: Mapping[str, np.ndarray],
    oracle: Oracle,
    policy: ResponsePolicy | None = None,
    budget_tag: str = "eval",
) -> GeneralizabilityMatrix:
    """Fidelity of each origin-trained model on every evaluation dataset."""
    m = oracle.num_classes
    for name, model in models.items():
        k = getattr(model, "num_classes", m)
        if k != m:
            raise LabelSpaceMismatch(f"model {name!r} has {k} classes, oracle has {m}")
    victim = {e: victim_classes(oracle, x, policy, budget_tag) for e, x in datasets.items()}
    origins = list(models)
    evals = list(datasets)
    values = np.array(
        [[fidelity(model_classes(models[o], datasets[e]), victim[e]) for e in evals] for o in origins]
    )
    return GeneralizabilityMatrix(origins, evals, values.reshape(len(origins), len(evals)))
