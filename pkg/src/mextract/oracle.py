"""Metered black-box access to a victim model.

The :class:`Oracle` is the only path through which an attack may observe the
victim.  It hashes every input, serves repeats from a replay cache at zero
cost, bills cache misses against a :class:`Budget`, degrades the victim's
confidence vector according to a :class:`ResponsePolicy`, and appends one
:class:`QueryRecord` per input to an append-only log.
"""

from __future__ import annotations

import bisect
import hashlib
import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence, Union

import numpy as np

from .errors import (
    BudgetExhausted,
    InvalidInput,
    InvalidPolicy,
    InvalidSimplex,
    ModelNotLoaded,
)

SIMPLEX_ATOL = 1e-6

DEFAULT_DESCRIPTOR_THRESHOLDS = (0.2, 0.4, 0.6, 0.8)
DEFAULT_DESCRIPTOR_NAMES = ("very_unlikely", "unlikely", "possible", "likely", "very_likely")

POLICY_KINDS = ("full", "top1", "quantized", "descriptor", "label_only")

# full / quantized -> tuple of floats; descriptor -> tuple of names;
# top1 -> (class, confidence); label_only -> class
DegradedResponse = Union[tuple, int]


def check_simplex(scores: Sequence[float] | np.ndarray, atol: float = SIMPLEX_ATOL) -> np.ndarray:
    """Validate a probability vector and return it as a float64 array."""
    p = np.asarray(scores, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise InvalidSimplex(f"expected a 1-d score vector, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise InvalidSimplex("scores contain non-finite values")
    if p.min() < -atol or p.max() > 1 + atol:
        raise InvalidSimplex("scores must lie in [0, 1]")
    if abs(p.sum() - 1.0) > atol:
        raise InvalidSimplex(f"scores sum to {p.sum():.8f}, not 1")
    return p


def top_class(scores: Sequence[float] | np.ndarray) -> int:
    """Argmax with ties broken toward the lowest class index."""
    return int(np.argmax(np.asarray(scores)))


def input_id(x: np.ndarray) -> str:
    """Content hash of an input: dtype, shape and raw bytes."""
    a = np.ascontiguousarray(x)
    h = hashlib.sha256()
    h.update(a.dtype.str.encode())
    h.update(repr(a.shape).encode())
    h.update(a.tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# response policies


def _uniform_edges(width: float) -> list[float]:
    n = int(round(1.0 / width))
    if n < 1 or not math.isclose(n * width, 1.0, rel_tol=0, abs_tol=1e-9):
        raise InvalidPolicy(f"bucket width {width} does not tile [0, 1]")
    return [round(i / n, 12) for i in range(n + 1)]


@dataclass(frozen=True)
class ResponsePolicy:
    """How the oracle degrades f_v(x) before returning it.

    ``buckets`` are half-open ``[lo, hi)`` intervals except the last, which
    is closed so that a confidence of exactly 1.0 is covered.
    """

    kind: str = "full"
    buckets: tuple[tuple[float, float], ...] = ()
    thresholds: tuple[float, ...] = ()
    descriptor_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in POLICY_KINDS:
            raise InvalidPolicy(f"unknown policy kind {self.kind!r}")
        object.__setattr__(self, "buckets", tuple((float(a), float(b)) for a, b in self.buckets))
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        object.__setattr__(self, "descriptor_names", tuple(self.descriptor_names))
        if self.kind == "quantized":
            self._check_buckets()
        if self.kind == "descriptor":
            self._check_descriptors()

    def _check_buckets(self) -> None:
        b = self.buckets
        if not b:
            raise InvalidPolicy("quantized policy needs buckets")
        if b[0][0] != 0.0 or b[-1][1] != 1.0:
            raise InvalidPolicy("buckets must start at 0 and end at 1")
        for (lo, hi), (nlo, _) in zip(b, b[1:] + ((b[-1][1], None),)):
            if not lo < hi:
                raise InvalidPolicy(f"empty bucket [{lo}, {hi})")
            if hi != nlo:
                raise InvalidPolicy(f"gap or overlap at {hi}")

    def _check_descriptors(self) -> None:
        t = self.thresholds
        if not t:
            raise InvalidPolicy("descriptor policy needs thresholds")
        if any(not 0.0 < v < 1.0 for v in t) or any(a >= b for a, b in zip(t, t[1:])):
            raise InvalidPolicy("thresholds must be strictly ascending inside (0, 1)")
        if len(self.descriptor_names) != len(t) + 1:
            raise InvalidPolicy("need exactly len(thresholds) + 1 descriptor names")

    # constructors -------------------------------------------------------

    @classmethod
    def full(cls) -> "ResponsePolicy":
        return cls("full")

    @classmethod
    def top1(cls) -> "ResponsePolicy":
        return cls("top1")

    @classmethod
    def label_only(cls) -> "ResponsePolicy":
        return cls("label_only")

    @classmethod
    def quantized(cls, width: float = 0.1) -> "ResponsePolicy":
        """Uniform buckets of the given width (0.1 default, 0.2 coarse preset)."""
        return cls.from_edges(_uniform_edges(width))

    @classmethod
    def from_edges(cls, edges: Sequence[float]) -> "ResponsePolicy":
        return cls("quantized", buckets=tuple(zip(edges[:-1], edges[1:])))

    @classmethod
    def descriptor(
        cls,
        thresholds: Sequence[float] = DEFAULT_DESCRIPTOR_THRESHOLDS,
        names: Sequence[str] = DEFAULT_DESCRIPTOR_NAMES,
    ) -> "ResponsePolicy":
        return cls("descriptor", thresholds=tuple(thresholds), descriptor_names=tuple(names))

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ResponsePolicy":
        d = dict(d)
        kind = d.pop("kind", "full")
        if kind == "quantized" and "width" in d:
            pol = cls.quantized(float(d.pop("width")))
        elif kind == "quantized" and "edges" in d:
            pol = cls.from_edges(d.pop("edges"))
        elif kind == "descriptor":
            pol = cls.descriptor(
                d.pop("thresholds", DEFAULT_DESCRIPTOR_THRESHOLDS),
                d.pop("descriptor_names", DEFAULT_DESCRIPTOR_NAMES),
            )
        else:
            pol = cls(kind, buckets=tuple(map(tuple, d.pop("buckets", ()))))
        if d:
            raise InvalidPolicy(f"unknown policy keys: {sorted(d)}")
        return pol

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind}
        if self.kind == "quantized":
            d["edges"] = [lo for lo, _ in self.buckets] + [1.0]
        if self.kind == "descriptor":
            d["thresholds"] = list(self.thresholds)
            d["descriptor_names"] = list(self.descriptor_names)
        return d

    @property
    def tag(self) -> str:
        """Stable identifier used in logs and cache keys."""
        if self.kind in ("quantized", "descriptor"):
            blob = json.dumps(self.to_dict(), sort_keys=True).encode()
            return f"{self.kind}:{hashlib.sha1(blob).hexdigest()[:8]}"
        return self.kind

    # mapping ------------------------------------------------------------

    @property
    def midpoints(self) -> tuple[float, ...]:
        return tuple((lo + hi) / 2 for lo, hi in self.buckets)

    def bucket_index(self, score: float) -> int:
        lows = [lo for lo, _ in self.buckets]
        i = bisect.bisect_right(lows, score) - 1
        return min(max(i, 0), len(self.buckets) - 1)

    def descriptor_index(self, score: float) -> int:
        return bisect.bisect_right(self.thresholds, score)


def apply_policy(scores: Sequence[float] | np.ndarray, policy: ResponsePolicy) -> DegradedResponse:
    """Degrade a confidence vector as the API would before returning it."""
    p = check_simplex(scores)
    if policy.kind == "full":
        return tuple(float(v) for v in p)
    if policy.kind == "top1":
        c = top_class(p)
        return (c, float(p[c]))
    if policy.kind == "label_only":
        return top_class(p)
    if policy.kind == "quantized":
        mids = policy.midpoints
        return tuple(mids[policy.bucket_index(float(v))] for v in p)
    names = policy.descriptor_names
    return tuple(names[policy.descriptor_index(float(v))] for v in p)


def response_to_json(response: DegradedResponse) -> Any:
    if isinstance(response, tuple):
        return list(response)
    return response


def response_from_json(obj: Any, policy_kind: str) -> DegradedResponse:
    kind = policy_kind.split(":", 1)[0]
    if kind == "label_only":
        return int(obj)
    if kind == "top1":
        return (int(obj[0]), float(obj[1]))
    if kind == "descriptor":
        return tuple(str(v) for v in obj)
    return tuple(float(v) for v in obj)


# --------------------------------------------------------------------------
# budget and records


@dataclass
class Budget:
    batch_count: int
    batch_size: int = 64
    spent: int = 0

    def __post_init__(self) -> None:
        if self.batch_count < 0 or self.batch_size < 1 or self.spent < 0:
            raise ValueError("budget fields must be non-negative (batch_size positive)")
        if self.spent > self.capacity:
            raise ValueError("spent exceeds capacity")

    @property
    def capacity(self) -> int:
        return self.batch_count * self.batch_size

    @property
    def remaining(self) -> int:
        return self.capacity - self.spent

    def charge(self, n: int) -> None:
        if n > self.remaining:
            raise BudgetExhausted(f"{n} queries requested, {self.remaining} of {self.capacity} left")
        self.spent += n


@dataclass(frozen=True)
class QueryRecord:
    input_id: str
    round: int
    policy_kind: str
    response: DegradedResponse
    cost: float
    timestamp: int
    budget_tag: str = "attack"

    def to_json(self) -> str:
        return json.dumps(
            {
                "input_id": self.input_id,
                "round": self.round,
                "policy_kind": self.policy_kind,
                "response": response_to_json(self.response),
                "cost": self.cost,
                "timestamp": self.timestamp,
                "budget_tag": self.budget_tag,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "QueryRecord":
        d = json.loads(line)
        return cls(
            input_id=d["input_id"],
            round=int(d["round"]),
            policy_kind=d["policy_kind"],
            response=response_from_json(d["response"], d["policy_kind"]),
            cost=float(d["cost"]),
            timestamp=int(d["timestamp"]),
            budget_tag=d.get("budget_tag", "attack"),
        )


class QueryLog:
    """Append-only record log, optionally mirrored to a JSON-lines file."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._records: list[QueryRecord] = []
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def extend(self, records: Iterable[QueryRecord]) -> None:
        records = list(records)
        with self._lock:
            self._records.extend(records)
            if self.path is not None and records:
                with self.path.open("a") as fh:
                    fh.writelines(r.to_json() + "\n" for r in records)

    @property
    def records(self) -> tuple[QueryRecord, ...]:
        with self._lock:
            return tuple(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def billed(self, budget_tag: str | None = None) -> int:
        return sum(1 for r in self.records if r.cost > 0 and (budget_tag is None or r.budget_tag == budget_tag))

    def total_cost(self, budget_tag: str | None = None) -> float:
        return sum(r.cost for r in self.records if budget_tag is None or r.budget_tag == budget_tag)

    @staticmethod
    def read(path: str | Path) -> list[QueryRecord]:
        with open(path) as fh:
            return [QueryRecord.from_json(line) for line in fh if line.strip()]


class ResponseCache:
    """Replay cache keyed by (input_id, policy tag, victim version)."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._data: dict[tuple[str, str, str], DegradedResponse] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with self.path.open() as fh:
                for line in fh:
                    if line.strip():
                        d = json.loads(line)
                        key = (d["input_id"], d["policy_kind"], d["victim_version"])
                        self._data[key] = response_from_json(d["response"], d["policy_kind"])

    def get(self, key: tuple[str, str, str]) -> DegradedResponse | None:
        with self._lock:
            return self._data.get(key)

    def __contains__(self, key: tuple[str, str, str]) -> bool:
        with self._lock:
            return key in self._data

    def __len__(self) -> int:
        return len(self._data)

    def put_many(self, items: Iterable[tuple[tuple[str, str, str], DegradedResponse]]) -> None:
        fresh = []
        with self._lock:
            for key, resp in items:
                if key not in self._data:
                    self._data[key] = resp
                    fresh.append((key, resp))
            if self.path is not None and fresh:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a") as fh:
                    for (iid, kind, ver), resp in fresh:
                        row = {
                            "input_id": iid,
                            "policy_kind": kind,
                            "victim_version": ver,
                            "response": response_to_json(resp),
                        }
                        fh.write(json.dumps(row) + "\n")


# --------------------------------------------------------------------------
# victim backends


class VictimBackend(Protocol):
    num_classes: int
    version: str
    reentrant: bool

    def predict(self, batch: np.ndarray) -> np.ndarray:
        """Return an (n, m) array of class probabilities."""


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class LinearVictim:
    """Softmax-linear victim ``softmax(W x + b)`` on flattened inputs."""

    reentrant = True

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None = None, version: str = "linear-v1"):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.zeros(self.weight.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)
        self.num_classes = self.weight.shape[0]
        self.version = version

    def predict(self, batch: np.ndarray) -> np.ndarray:
        x = np.asarray(batch, dtype=np.float64).reshape(len(batch), -1)
        return softmax(x @ self.weight.T + self.bias)


class TorchVictim:
    """Wraps a ``torch.nn.Module`` returning logits.

    Rows are evaluated one at a time so that a response never depends on
    which other inputs shared its batch.
    """

    reentrant = False

    def __init__(self, model=None, num_classes: int | None = None, version: str = "torch-v1",
                 loader: Callable[[], Any] | None = None):
        self._model = model
        self._loader = loader
        self.version = version
        self.num_classes = num_classes if num_classes is not None else getattr(model, "num_classes", None)

    @property
    def loaded(self) -> bool:
        return self._model is not None

    def load(self) -> None:
        if self._model is None and self._loader is not None:
            self._model = self._loader()
            if self.num_classes is None:
                self.num_classes = self._model.num_classes

    def predict(self, batch: np.ndarray) -> np.ndarray:
        import torch

        if self._model is None:
            self.load()
        if self._model is None:
            raise ModelNotLoaded("victim model not loaded")
        self._model.eval()
        param = next(self._model.parameters(), None)
        dtype = param.dtype if param is not None else torch.float32
        x = torch.as_tensor(np.asarray(batch), dtype=dtype)
        with torch.no_grad():
            logits = torch.cat([self._model(x[i : i + 1]) for i in range(len(x))])
        return torch.softmax(logits.double(), dim=-1).numpy()


def victim_predict(backend: VictimBackend | None, x: np.ndarray) -> np.ndarray:
    """Full confidence vector of the victim for a single input."""
    if backend is None:
        raise ModelNotLoaded("no victim backend")
    p = np.asarray(backend.predict(np.asarray(x)[None]), dtype=np.float64)[0]
    return check_simplex(p)


# --------------------------------------------------------------------------
# validity gates


def variance_gate(floor: float = 1e-4) -> Callable[[np.ndarray], bool]:
    """Accept inputs whose feature variance is at least ``floor``."""

    def gate(x: np.ndarray) -> bool:
        return float(np.var(x)) >= floor

    return gate


def _neighbour_correlation(x: np.ndarray) -> float:
    a = np.asarray(x, dtype=np.float64)
    while a.ndim > 2 and a.shape[0] == 1:
        a = a[0]
    if a.ndim >= 2:
        pairs = [(a[..., :-1, :], a[..., 1:, :]), (a[..., :, :-1], a[..., :, 1:])]
    else:
        pairs = [(a[:-1], a[1:])]
    u = np.concatenate([p.ravel() for p, _ in pairs])
    v = np.concatenate([q.ravel() for _, q in pairs])
    if u.std() == 0 or v.std() == 0:
        return 0.0
    return float(np.corrcoef(u, v)[0, 1])


def noise_gate(min_variance: float = 1e-4, min_correlation: float = 0.2) -> Callable[[np.ndarray], bool]:
    """Reject flat inputs and spatially uncorrelated (noise-like) inputs.

    Natural images have strongly correlated neighbouring pixels; i.i.d.
    noise has neighbour correlation near zero.
    """
    var_ok = variance_gate(min_variance)

    def gate(x: np.ndarray) -> bool:
        return var_ok(x) and _neighbour_correlation(x) >= min_correlation

    return gate


# --------------------------------------------------------------------------
# the oracle


class Oracle:
    """Metered, cached, policy-degrading access to a victim backend.

    Budgets are kept per ``budget_tag`` so evaluation traffic never draws on
    the attack budget.  All state changes for one ``query`` call happen under
    a single lock and are all-or-nothing: if any part of the batch fails,
    nothing is billed, cached or logged.
    """

    def __init__(
        self,
        backend: VictimBackend | None,
        budget: Budget | None = None,
        policy: ResponsePolicy | None = None,
        *,
        cache: ResponseCache | None = None,
        log: QueryLog | None = None,
        validity_gate: Callable[[np.ndarray], bool] | None = None,
        cost_per_query: float | Mapping[str, float] = 1.0,
        label_map: Sequence[int] | None = None,
        eval_budget: Budget | None = None,
    ):
        self.backend = backend
        self.policy = policy or ResponsePolicy.full()
        self.budgets: dict[str, Budget] = {"attack": budget if budget is not None else Budget(0)}
        if eval_budget is not None:
            self.budgets["eval"] = eval_budget
        self.cache = cache if cache is not None else ResponseCache()
        self.log = log if log is not None else QueryLog()
        self.validity_gate = validity_gate
        self.cost_per_query = cost_per_query
        self.label_map = None if label_map is None else [int(c) for c in label_map]
        self._lock = threading.RLock()
        self._backend_lock = threading.Lock()
        self._tick = 0

    @property
    def budget(self) -> Budget:
        return self.budgets["attack"]

    @property
    def version(self) -> str:
        if self.backend is None:
            raise ModelNotLoaded("no victim backend")
        return self.backend.version

    @property
    def num_classes(self) -> int:
        if self.label_map is not None:
            return max(self.label_map) + 1
        if self.backend is None:
            raise ModelNotLoaded("no victim backend")
        return int(self.backend.num_classes)

    def _cost(self, policy: ResponsePolicy) -> float:
        if isinstance(self.cost_per_query, Mapping):
            return float(self.cost_per_query.get(policy.kind, 1.0))
        return float(self.cost_per_query)

    def _predict(self, batch: np.ndarray) -> np.ndarray:
        if self.backend is None:
            raise ModelNotLoaded("no victim backend")
        if getattr(self.backend, "reentrant", False):
            probs = self.backend.predict(batch)
        else:
            with self._backend_lock:
                probs = self.backend.predict(batch)
        probs = np.asarray(probs, dtype=np.float64)
        if self.label_map is not None:
            mapped = np.zeros((len(probs), self.num_classes))
            for src, dst in enumerate(self.label_map):
                mapped[:, dst] += probs[:, src]
            probs = mapped
        return probs

    def predict_full(self, x: np.ndarray) -> np.ndarray:
        """Unmetered full prediction; for tests and offline analysis only."""
        return check_simplex(self._predict(np.asarray(x)[None])[0])

    def query(
        self,
        batch: Sequence[np.ndarray] | np.ndarray,
        policy: ResponsePolicy | None = None,
        round: int = 0,
        budget_tag: str = "attack",
    ) -> list[QueryRecord]:
        policy = policy or self.policy
        items = [np.asarray(x) for x in batch]
        if self.validity_gate is not None:
            for i, x in enumerate(items):
                if not self.validity_gate(x):
                    raise InvalidInput(f"input {i} rejected by the validity gate")
        ids = [input_id(x) for x in items]
        version = self.version
        cost = self._cost(policy)

        with self._lock:
            budget = self.budgets.get(budget_tag)
            if budget is None:
                raise BudgetExhausted(f"no budget named {budget_tag!r}")
            # first occurrence of an uncached id is a miss; repeats are hits
            miss_pos: dict[str, int] = {}
            for i, iid in enumerate(ids):
                if iid not in miss_pos and (iid, policy.tag, version) not in self.cache:
                    miss_pos[iid] = i
            if len(miss_pos) > budget.remaining:
                raise BudgetExhausted(
                    f"{len(miss_pos)} uncached queries, {budget.remaining} left in {budget_tag!r} budget"
                )
            fresh: dict[str, DegradedResponse] = {}
            if miss_pos:
                order = list(miss_pos.values())
                probs = self._predict(np.stack([items[i] for i in order]))
                for i, p in zip(order, probs):
                    fresh[ids[i]] = apply_policy(p, policy)

            budget.charge(len(miss_pos))
            self.cache.put_many(((iid, policy.tag, version), r) for iid, r in fresh.items())
            records = []
            billed: set[str] = set()
            for iid in ids:
                if iid in fresh and iid not in billed:
                    billed.add(iid)
                    resp, c = fresh[iid], cost
                else:
                    resp, c = self.cache.get((iid, policy.tag, version)), 0.0
                self._tick += 1
                records.append(QueryRecord(iid, round, policy.tag, resp, c, self._tick, budget_tag))
            self.log.extend(records)
        return records


def response_class(response: DegradedResponse, policy: ResponsePolicy | str) -> int:
    """Predicted class carried by any degraded response (lowest index on ties)."""
    kind = policy.kind if isinstance(policy, ResponsePolicy) else policy.split(":", 1)[0]
    if kind == "label_only":
        return int(response)
    if kind == "top1":
        return int(response[0])
    if kind == "descriptor":
        if not isinstance(policy, ResponsePolicy):
            raise InvalidPolicy("descriptor responses need the policy to rank names")
        rank = {name: i for i, name in enumerate(policy.descriptor_names)}
        return top_class([rank[name] for name in response])
    return top_class(response)
