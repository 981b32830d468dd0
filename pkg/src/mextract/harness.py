"""The attack loop: GenerateQuery -> QueryAPI -> UpdateModel, round by round."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from .config import AttackConfig, VictimConfig, from_dict
from .data import Dataset, load_dataset
from .errors import EmptySet, ExtractionError, PoolExhausted, RoundError, TooSmall, UnknownFormat
from .metrics import (
    MetricsReport,
    accuracy,
    adversarial_fidelity,
    fidelity,
    fingerprint,
    generalizability_matrix,
    model_classes,
    per_class_fidelity,
    victim_classes,
)
from .oracle import Budget, Oracle, QueryLog, ResponseCache, ResponsePolicy, TorchVictim
from .strategies import gen_adversarial, kcenter_greedy, random_select, ratio_counts
from .trainer import (
    PiracyModelSpec,
    build_model,
    kd_train,
    lift_many,
    load_checkpoint,
    mixmatch_train,
    save_checkpoint,
    write_loss_trace,
)
from .trainer.kd import predict_classes

log = logging.getLogger(__name__)


def split_dataset(dataset: Dataset, fraction: float = 0.8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the reference and test parts, stratified when labels exist."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    n = len(dataset)
    if n == 0:
        raise TooSmall("empty dataset")
    rng = np.random.default_rng(seed)
    if dataset.labels is None:
        perm = rng.permutation(n)
        k = int(round(fraction * n))
        return np.sort(perm[:k]), np.sort(perm[k:])
    ref, test = [], []
    for c in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) < 2:
            raise TooSmall(f"class {c} has {len(idx)} item(s); stratification needs at least 2")
        idx = rng.permutation(idx)
        k = min(max(int(round(fraction * len(idx))), 1), len(idx) - 1)
        ref.append(idx[:k])
        test.append(idx[k:])
    return np.sort(np.concatenate(ref)), np.sort(np.concatenate(test))


def _sub_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([abs(int(p)) for p in parts]).generate_state(1)[0])


# --------------------------------------------------------------------------
# victims


def _param_digest(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for p in model.parameters():
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:12]


def train_victim(cfg: VictimConfig, data: Dataset) -> tuple[torch.nn.Module, PiracyModelSpec]:
    """Fit a victim on ground-truth labels (cross-entropy on one-hot targets)."""
    m = data.num_classes
    spec = PiracyModelSpec(cfg.architecture, m, data.inputs.shape[1:], width=cfg.width)
    model = build_model(spec, seed=cfg.seed)
    from .trainer import AugmentConfig, OptimizerConfig

    kd_train(
        data.inputs,
        np.eye(m)[data.labels],
        model,
        OptimizerConfig.default("adam"),
        epochs=cfg.train_epochs,
        augment=AugmentConfig(hflip=False),
        seed=cfg.seed,
    )
    model.eval()
    return model, spec


def load_victim(cfg: VictimConfig, data: Dataset) -> TorchVictim:
    path = Path(cfg.checkpoint) if cfg.checkpoint else None
    if path is not None and path.exists():
        model, spec, _ = load_checkpoint(path)
    else:
        model, spec = train_victim(cfg, data)
        if path is not None:
            save_checkpoint(path, model, spec, {"role": "victim", "dataset": cfg.dataset, "seed": cfg.seed})
    version = cfg.version or f"{spec.architecture}-{_param_digest(model)}"
    return TorchVictim(model, spec.num_classes, version=version)


# --------------------------------------------------------------------------
# results


@dataclass
class SeedReport:
    seed: int
    metrics: MetricsReport
    queries: int  # responses consumed in training, billed or replayed
    spent: int  # queries billed against the attack budget
    rounds: int
    log_path: str | None = None
    checkpoint: str | None = None
    transfer: dict[str, dict[str, float]] | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metrics"] = self.metrics.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SeedReport":
        d = dict(d)
        d["metrics"] = MetricsReport.from_dict(d["metrics"])
        return cls(**d)


METRIC_NAMES = ("accuracy", "fidelity", "adversarial_fidelity")


@dataclass
class ExperimentResult:
    config: dict
    reports: list[SeedReport]
    wall_clock: float = 0.0

    @property
    def name(self) -> str:
        return self.config.get("name", "experiment")

    def values(self, metric: str) -> list[float]:
        vals = [getattr(r.metrics, metric) for r in self.reports]
        return [v for v in vals if v is not None]

    def aggregate(self) -> dict[str, dict[str, float]]:
        out = {}
        for m in METRIC_NAMES:
            vals = self.values(m)
            if vals:
                out[m] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
        return out

    def mean(self, metric: str = "fidelity") -> float:
        return self.aggregate()[metric]["mean"]

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "config": self.config,
            "reports": [r.to_dict() for r in self.reports],
            "aggregate": self.aggregate(),
            "wall_clock": self.wall_clock,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentResult":
        return cls(d["config"], [SeedReport.from_dict(r) for r in d["reports"]], d.get("wall_clock", 0.0))

    def comparable(self) -> dict:
        """Everything except wall-clock time and file locations."""
        d = self.to_dict()
        d.pop("wall_clock")
        for r in d["reports"]:
            r.pop("log_path")
            r.pop("checkpoint")
        return d


# --------------------------------------------------------------------------
# the loop


def _make_oracle(cfg: AttackConfig, victim: TorchVictim, cache: ResponseCache, log_path: Path | None,
                 eval_queries: int, attack_budget: int | None) -> Any:
    if cfg.gateway is not None:
        from .gateway import GatewayClient

        return GatewayClient(cfg.gateway.endpoint, cfg.gateway.key, cfg.gateway.eval_key)
    batches = cfg.budget.batches if attack_budget is None else attack_budget
    bs = cfg.budget.batch_size
    return Oracle(
        victim,
        Budget(batches, bs),
        cfg.response_policy,
        cache=cache,
        log=QueryLog(log_path),
        eval_budget=Budget(math.ceil(eval_queries / bs), bs),
    )


def _plan_round(cfg: AttackConfig, model, pool: np.ndarray, used: list[int], k: int, seed: int, r: int):
    """Return (pool indices consumed, inputs to query)."""
    name = cfg.strategy.name
    rseed = _sub_seed(seed, r)
    if name == "active_kcenter" and used:
        free = np.setdiff1d(np.arange(len(pool)), used)
        if k > len(free):
            raise PoolExhausted(f"{k} queries requested, {len(free)} pool items left")
        emb = _embed(model, pool)
        picks = kcenter_greedy(emb[free], emb[np.asarray(used)], k)
        idx = [int(free[i]) for i in picks]
        return idx, pool[idx]
    idx = random_select(len(pool), k, rseed, used)
    if name in ("basic", "active_kcenter") or r == 0:
        return idx, pool[idx]
    n_adv, n_clean = ratio_counts(cfg.strategy.ratio, cfg.budget.batch_size)
    n_adv = int(round(k * n_adv / (n_adv + n_clean)))
    adv_cfg = cfg.strategy.adversarial
    if name == "adversarial_cw":
        adv_cfg = type(adv_cfg)(**{**asdict(adv_cfg), "method": "cw"})
    elif name == "adversarial_pgd":
        adv_cfg = type(adv_cfg)(**{**asdict(adv_cfg), "method": "pgd"})
    batch = pool[idx].copy()
    if n_adv:
        batch[k - n_adv :] = gen_adversarial(model, pool[idx[k - n_adv :]], adv_cfg, rseed)
    order = np.random.default_rng(rseed).permutation(k)
    return [idx[i] for i in order], batch[order]


def _embed(model, x: np.ndarray) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        t = torch.as_tensor(x, dtype=torch.float32)
        return torch.cat([model.features(t[i : i + 512]) for i in range(0, len(t), 512)]).double().numpy()


def _train(cfg: AttackConfig, model, x, y, unlabeled, epochs: int, seed: int):
    tc = cfg.trainer
    if tc.mixmatch and len(unlabeled):
        return mixmatch_train(x, y, unlabeled, model, tc.optimizer, epochs, tc.mixmatch_config,
                              seed=seed, batch_size=tc.batch_size, aug=tc.augment)
    return kd_train(x, y, model, tc.optimizer, epochs, augment=tc.augment, seed=seed, batch_size=tc.batch_size)


def attack_once(
    cfg: AttackConfig,
    seed: int,
    victim: TorchVictim,
    reference: Dataset,
    test: Dataset,
    cache: ResponseCache,
    extra_eval: dict[str, Dataset] | None = None,
    attack_budget: int | None = None,
    out_dir: Path | None = None,
) -> SeedReport:
    extra_eval = extra_eval or {}
    policy = cfg.response_policy
    m = victim.num_classes
    spec = PiracyModelSpec(cfg.trainer.architecture, m, reference.inputs.shape[1:], cfg.trainer.init,
                           cfg.trainer.pretrained_source, cfg.trainer.width)
    model = build_model(spec, seed=seed)

    eval_queries = len(test) * (2 if cfg.evaluation.adversarial_fidelity else 1)
    eval_queries += sum(len(d) for d in extra_eval.values())
    log_path = out_dir / f"queries_seed{seed}.jsonl" if out_dir else None
    if log_path is not None and log_path.exists():
        log_path.unlink()
    oracle = _make_oracle(cfg, victim, cache, log_path, eval_queries, attack_budget)

    pool = reference.inputs
    total = min(cfg.budget.batches * cfg.budget.batch_size, len(pool))
    used: list[int] = []
    xs: list[np.ndarray] = []
    ys: list[np.ndarray] = []
    r = 0
    while len(used) < total:
        k = min(cfg.budget.batch_size, total - len(used))
        try:
            idx, batch = _plan_round(cfg, model, pool, used, k, seed, r)
            records = oracle.query(list(batch), policy=policy, round=r)
            targets = lift_many([rec.response for rec in records], policy, m)
        except ExtractionError as e:
            raise RoundError(r, e) from e
        used.extend(idx)
        xs.append(np.asarray(batch))
        ys.append(targets)
        if cfg.trainer.round_epochs > 0 and len(used) < total:
            unl = np.delete(pool, used, axis=0)
            _train(cfg, model, np.concatenate(xs), np.concatenate(ys), unl, cfg.trainer.round_epochs,
                   _sub_seed(seed, r, 1))
        r += 1

    trace = None
    if xs:
        unl = np.delete(pool, used, axis=0)
        if len(unl) == 0:
            unl = pool
        trace = _train(cfg, model, np.concatenate(xs), np.concatenate(ys), unl, cfg.trainer.epochs, seed)

    # evaluation, metered separately from the attack budget
    eval_policy = ResponsePolicy.from_dict(cfg.evaluation.policy)
    vt = victim_classes(oracle, test.inputs, eval_policy)
    pt = model_classes(model, test.inputs)
    adv_fid = None
    if cfg.evaluation.adversarial_fidelity:
        adv_fid, _ = adversarial_fidelity(model, oracle, test.inputs, cfg.evaluation.adversarial, seed, eval_policy)
    transfer = None
    if extra_eval:
        sets = {"test": test.inputs, **{k: d.inputs for k, d in extra_eval.items()}}
        transfer = generalizability_matrix({reference.name: model}, sets, oracle, eval_policy).to_dict()
    metrics = MetricsReport(
        accuracy=accuracy(pt, test.labels) if test.labels is not None else None,
        fidelity=fidelity(pt, vt),
        adversarial_fidelity=adv_fid,
        per_class=per_class_fidelity(pt, vt),
        n_test=len(test),
        n_queries=len(used),
        config_fingerprint=fingerprint(cfg.to_dict()),
    )

    ckpt = None
    if out_dir is not None:
        ckpt = str(out_dir / f"piracy_seed{seed}.npz")
        save_checkpoint(ckpt, model, spec, {"seed": seed, "epochs": cfg.trainer.epochs,
                                            "optimizer": asdict(cfg.trainer.optimizer)})
        if trace is not None:
            write_loss_trace(out_dir / f"loss_seed{seed}.csv", trace.losses, trace.holdout_fidelity)
    spent = oracle.log.billed("attack") if hasattr(oracle, "log") else oracle.spent
    return SeedReport(seed, metrics, len(used), spent, r, str(log_path) if log_path else None, ckpt, transfer)


def run_experiment(
    cfg: AttackConfig,
    *,
    victim: TorchVictim | None = None,
    cache: ResponseCache | None = None,
    replay: bool = False,
) -> ExperimentResult:
    """Run every seed of ``cfg``; ``replay`` forbids any billed query."""
    start = time.perf_counter()
    data = load_dataset(cfg.victim.dataset)
    ref_idx, test_idx = split_dataset(data, cfg.split_fraction, cfg.split_seed)
    reference, test = data.subset(ref_idx), data.subset(test_idx)
    if victim is None:
        victim = load_victim(cfg.victim, reference)
    if cache is None:
        cache = ResponseCache(cfg.cache_path)
    extra = {name: load_dataset(name) for name in cfg.evaluation.datasets}
    out_dir = Path(cfg.output_dir) if cfg.output_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for seed in cfg.seeds:
        log.info("seed %d: %s, %d batches of %d", seed, cfg.strategy_label, cfg.budget.batches, cfg.budget.batch_size)
        reports.append(
            attack_once(cfg, seed, victim, reference, test, cache, extra, 0 if replay else None, out_dir)
        )
    return ExperimentResult(cfg.to_dict(), reports, time.perf_counter() - start)


# --------------------------------------------------------------------------
# reports

CSV_FIELDS = (
    "name", "strategy", "policy", "batches", "batch_size", "seed", "accuracy", "fidelity",
    "adversarial_fidelity", "n_test", "n_queries", "queries", "spent", "rounds", "config_fingerprint",
    "per_class", "config",
)


def _label(config: dict) -> str:
    cfg = from_dict(AttackConfig, config)
    return cfg.strategy_label


def _num(s: str):
    if s == "":
        return None
    return int(s) if s.lstrip("-").isdigit() else float(s)


def result_to_csv(result: ExperimentResult) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    cfg = result.config
    for r in result.reports:
        m = r.metrics
        w.writerow({
            "name": cfg.get("name", ""),
            "strategy": _label(cfg),
            "policy": ResponsePolicy.from_dict(cfg["policy"]).tag,
            "batches": cfg["budget"]["batches"],
            "batch_size": cfg["budget"]["batch_size"],
            "seed": r.seed,
            "accuracy": "" if m.accuracy is None else repr(m.accuracy),
            "fidelity": repr(m.fidelity),
            "adversarial_fidelity": "" if m.adversarial_fidelity is None else repr(m.adversarial_fidelity),
            "n_test": m.n_test,
            "n_queries": m.n_queries,
            "queries": r.queries,
            "spent": r.spent,
            "rounds": r.rounds,
            "config_fingerprint": m.config_fingerprint,
            "per_class": json.dumps({str(k): v for k, v in m.per_class.items()}),
            "config": json.dumps(cfg, sort_keys=True),
        })
    return buf.getvalue()


def result_from_csv(text: str) -> ExperimentResult:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise EmptySet("CSV report has no rows")
    config = json.loads(rows[0]["config"])
    reports = []
    for row in rows:
        metrics = MetricsReport(
            accuracy=_num(row["accuracy"]),
            fidelity=float(row["fidelity"]),
            adversarial_fidelity=_num(row["adversarial_fidelity"]),
            per_class={int(k): float(v) for k, v in json.loads(row["per_class"]).items()},
            n_test=int(row["n_test"]),
            n_queries=int(row["n_queries"]),
            config_fingerprint=row["config_fingerprint"],
        )
        reports.append(SeedReport(int(row["seed"]), metrics, int(row["queries"]), int(row["spent"]), int(row["rounds"])))
    return ExperimentResult(config, reports)


def format_cell(values: Sequence[float]) -> str:
    """Mean and population standard deviation in percent."""
    return f"{100 * np.mean(values):.2f} ± {100 * np.std(values):.2f}"


def render_table(results: Sequence[ExperimentResult], metric: str = "fidelity") -> str:
    """Strategy rows by budget columns, one ``mean ± std`` cell each."""
    cells: dict[tuple[str, int], str] = {}
    rows: list[str] = []
    cols: list[int] = []
    for res in results:
        if not res.reports:
            raise EmptySet("cannot tabulate an empty result")
        row = _label(res.config)
        col = res.config["budget"]["batches"]
        rows += [row] if row not in rows else []
        cols += [col] if col not in cols else []
        vals = res.values(metric)
        cells[row, col] = format_cell(vals) if vals else "/"
    cols.sort()
    first = max(len(r) for r in rows + ["strategy"]) + 2
    width = max([len(c) for c in cells.values()] + [8]) + 2
    lines = ["strategy".ljust(first) + "".join(str(c).rjust(width) for c in cols)]
    lines.append("-" * len(lines[0]))
    for row in rows:
        lines.append(row.ljust(first) + "".join(cells.get((row, c), "/").rjust(width) for c in cols))
    return "\n".join(lines)


def emit_report(result: ExperimentResult | Sequence[ExperimentResult], format: str = "json") -> str:
    results = [result] if isinstance(result, ExperimentResult) else list(result)
    if not results or any(not r.reports for r in results):
        raise EmptySet("refusing to emit an empty report")
    if format == "json":
        if len(results) == 1:
            return json.dumps(results[0].to_dict(), indent=2, sort_keys=True)
        return json.dumps([r.to_dict() for r in results], indent=2, sort_keys=True)
    if format == "csv":
        parts = [result_to_csv(r) for r in results]
        return parts[0] + "".join(p.split("\n", 1)[1] for p in parts[1:])
    if format == "table":
        return render_table(results)
    raise UnknownFormat(f"unknown report format {format!r}; expected json, csv or table")


def load_result(path: str | Path) -> list[ExperimentResult]:
    text = Path(path).read_text()
    if str(path).endswith(".csv"):
        return [result_from_csv(text)]
    data = json.loads(text)
    items = data if isinstance(data, list) else [data]
    return [ExperimentResult.from_dict(d) for d in items]
