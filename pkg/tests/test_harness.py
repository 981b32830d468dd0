import json

import numpy as np
import pytest
import yaml

from mextract.cli import main
from mextract.config import AttackConfig, from_dict, load_config
from mextract.data import Dataset
from mextract.errors import ConfigError, EmptySet, TooSmall, UnknownFormat
from mextract.gateway import ApiKeyAccount, serve
from mextract.harness import (
    ExperimentResult,
    emit_report,
    format_cell,
    load_result,
    result_from_csv,
    run_experiment,
    split_dataset,
)
from mextract.metrics import fidelity, model_classes
from mextract.oracle import Budget, Oracle, QueryLog, ResponseCache, ResponsePolicy, input_id
from mextract.trainer import PiracyModelSpec, build_model, kd_train, lift_many


def config(setup, tmp_path=None, **changes):
    base = {
        "name": "t",
        "victim": {"dataset": "blobs", "architecture": "small_cnn", "width": 16, "train_epochs": 10,
                   "checkpoint": str(setup["ckpt"]), "version": "blobs-v1"},
        "budget": {"batches": 4, "batch_size": 16},
        "trainer": {"architecture": "tiny_cnn", "width": 16, "epochs": 15, "batch_size": 16},
        "seeds": [0],
    }
    if tmp_path is not None:
        base["output_dir"] = str(tmp_path / "out")
    cfg = from_dict(AttackConfig, base)
    return cfg.replace(**changes) if changes else cfg


# -- split -------------------------------------------------------------------


def toy_dataset(n=100, classes=10):
    return Dataset("toy", np.zeros((n, 1, 2, 2), np.float32), np.arange(n) % classes)


def test_split_sizes_and_determinism():
    ref, test = split_dataset(toy_dataset(), 0.8, seed=3)
    assert (len(ref), len(test)) == (80, 20)
    assert not set(ref) & set(test)
    again = split_dataset(toy_dataset(), 0.8, seed=3)
    assert np.array_equal(ref, again[0]) and np.array_equal(test, again[1])
    assert np.bincount(toy_dataset().labels[test]).tolist() == [2] * 10


def test_split_rejects_singleton_class():
    with pytest.raises(TooSmall):
        split_dataset(Dataset("x", np.zeros((3, 1)), np.array([0, 0, 1])), 0.8)


# -- run ---------------------------------------------------------------------


def test_zero_budget_gives_untrained_metrics(blobs_setup):
    res = run_experiment(config(blobs_setup, budget={"batches": 0}), victim=blobs_setup["victim"])
    rep, = res.reports
    assert rep.queries == rep.spent == rep.rounds == 0
    assert rep.metrics.n_queries == 0
    test = blobs_setup["data"].subset(blobs_setup["test"])
    untrained = build_model(PiracyModelSpec("tiny_cnn", 4, (1, 8, 8), width=16), seed=0)
    victim = blobs_setup["victim"].predict(test.inputs).argmax(1)
    assert rep.metrics.fidelity == fidelity(model_classes(untrained, test.inputs), victim)


def test_two_seeds_give_two_reports_and_mean_std(blobs_setup):
    res = run_experiment(config(blobs_setup, seeds=[0, 1]), victim=blobs_setup["victim"])
    assert [r.seed for r in res.reports] == [0, 1]
    fids = [r.metrics.fidelity for r in res.reports]
    agg = res.aggregate()["fidelity"]
    assert agg["mean"] == pytest.approx(np.mean(fids)) and agg["std"] == pytest.approx(np.std(fids))
    assert all(r.queries == 64 for r in res.reports)


def test_full_budget_matches_manual_pipeline(blobs_setup, tmp_path):
    ref = blobs_setup["data"].subset(blobs_setup["ref"])
    test = blobs_setup["data"].subset(blobs_setup["test"])
    batches = -(-len(ref) // 16)
    cfg = config(blobs_setup, tmp_path, budget={"batches": batches})
    res = run_experiment(cfg, victim=blobs_setup["victim"])
    rep, = res.reports
    assert rep.queries == rep.spent == len(ref)

    # rebuild the query/response pairs from the log alone, then train by hand
    by_id = {input_id(x): x for x in ref.inputs}
    records = [r for r in QueryLog.read(rep.log_path) if r.budget_tag == "attack"]
    assert len(records) == len(ref)
    xs = np.stack([by_id[r.input_id] for r in records])
    ys = lift_many([r.response for r in records], ResponsePolicy.full(), 4)
    model = build_model(PiracyModelSpec("tiny_cnn", 4, (1, 8, 8), width=16), seed=0)
    kd_train(xs, ys, model, cfg.trainer.optimizer, cfg.trainer.epochs, augment=False, seed=0, batch_size=16)
    victim = blobs_setup["victim"].predict(test.inputs).argmax(1)
    assert rep.metrics.fidelity == fidelity(model_classes(model, test.inputs), victim)


def test_budget_accounting_closes(blobs_setup, tmp_path):
    cache = ResponseCache(tmp_path / "c.jsonl")
    res = run_experiment(config(blobs_setup, seeds=[0, 1]), victim=blobs_setup["victim"], cache=cache)
    first, second = res.reports
    assert first.spent == 64
    # the second seed re-uses whatever the first already paid for
    assert second.spent <= 64 and second.queries == 64


def test_determinism_and_replay(blobs_setup, tmp_path):
    cache_path = tmp_path / "cache.jsonl"
    cfg = config(blobs_setup, cache_path=str(cache_path), seeds=[0, 1])
    a = run_experiment(cfg, victim=blobs_setup["victim"])  # cold: fills the cache
    b = run_experiment(cfg, victim=blobs_setup["victim"])
    c = run_experiment(cfg, victim=blobs_setup["victim"])
    assert b.comparable() == c.comparable()
    assert [r.metrics for r in b.reports] == [r.metrics for r in a.reports]
    assert all(r.spent == 0 for r in b.reports)
    replayed = run_experiment(cfg, victim=blobs_setup["victim"], replay=True)
    assert all(r.spent == 0 for r in replayed.reports)
    assert [r.metrics for r in replayed.reports] == [r.metrics for r in a.reports]


@pytest.mark.parametrize(
    "changes",
    [
        {"strategy": {"name": "active_kcenter"}},
        {"strategy": {"name": "adversarial_pgd", "ratio": [1, 1]}},
        {"strategy": {"name": "adversarial_cw", "ratio": [1, 3], "adversarial": {"steps": 5}}},
        {"strategy": {"name": "mixed", "ratio": [1, 1]}, "trainer": {"round_epochs": 2}},
        {"trainer": {"mixmatch": True, "epochs": 3}},
        {"policy": {"kind": "top1"}},
        {"policy": {"kind": "quantized", "width": 0.2}},
        {"policy": {"kind": "descriptor"}},
        {"policy": {"kind": "label_only"}},
        {"evaluation": {"adversarial_fidelity": True, "datasets": ["blobs"]}},
    ],
)
def test_every_strategy_and_policy_spends_the_budget(blobs_setup, changes):
    res = run_experiment(config(blobs_setup, **changes), victim=blobs_setup["victim"])
    rep, = res.reports
    assert rep.queries == 64 and rep.rounds == 4
    assert 0.0 <= rep.metrics.fidelity <= 1.0
    if changes.get("evaluation"):
        assert rep.metrics.adversarial_fidelity is not None
        assert set(rep.transfer["blobs"]) == {"test", "blobs"}


def test_attack_through_gateway(blobs_setup):
    oracle = Oracle(blobs_setup["victim"], Budget(4, 16), eval_budget=Budget(10, 16))
    with serve(oracle, accounts=[ApiKeyAccount("atk"), ApiKeyAccount("ev")]) as handle:
        cfg = config(blobs_setup, gateway={"endpoint": handle.url, "key": "atk", "eval_key": "ev"})
        remote = run_experiment(cfg, victim=blobs_setup["victim"])
    local = run_experiment(config(blobs_setup), victim=blobs_setup["victim"])
    strip = lambda r: {**r.reports[0].metrics.to_dict(), "config_fingerprint": None}
    assert strip(remote) == strip(local)
    assert oracle.budget.spent == 64


# -- reports -----------------------------------------------------------------


@pytest.fixture(scope="module")
def two_seed_result(blobs_setup):
    cfg = config(blobs_setup, seeds=[0, 1], trainer={"epochs": 2}, evaluation={"adversarial_fidelity": True})
    return run_experiment(cfg, victim=blobs_setup["victim"])


def test_json_csv_json_round_trip(two_seed_result):
    res = two_seed_result
    back = result_from_csv(emit_report(ExperimentResult.from_dict(json.loads(emit_report(res, "json"))), "csv"))
    for a, b in zip(res.reports, back.reports):
        assert a.metrics == b.metrics
        assert (a.seed, a.queries, a.spent, a.rounds) == (b.seed, b.queries, b.spent, b.rounds)
    assert back.config == res.config
    assert back.aggregate() == res.aggregate()


def test_table_cell():
    assert format_cell([0.40, 0.42]) == "41.00 ± 1.00"


def test_table_lists_strategy_and_budget(two_seed_result):
    table = emit_report(two_seed_result, "table")
    assert "basic" in table and "4" in table.splitlines()[0]
    assert format_cell(two_seed_result.values("fidelity")) in table


def test_empty_result_is_an_error(tmp_path):
    with pytest.raises(EmptySet):
        emit_report(ExperimentResult({}, []), "json")
    with pytest.raises(EmptySet):
        emit_report([], "csv")


def test_unknown_format(two_seed_result):
    with pytest.raises(UnknownFormat):
        emit_report(two_seed_result, "xml")


# -- config ------------------------------------------------------------------


def test_config_rejects_unknown_keys_and_versions(blobs_setup):
    with pytest.raises(ConfigError):
        config(blobs_setup, colour="red")
    with pytest.raises(ConfigError):
        config(blobs_setup, trainer={"optimiser": "adam"})
    with pytest.raises(ConfigError):
        config(blobs_setup, schema_version=2)
    with pytest.raises(ConfigError):
        config(blobs_setup, strategy={"name": "mixed", "ratio": [1, 2]})
    with pytest.raises(ConfigError):
        config(blobs_setup, policy={"kind": "quantized", "width": 0.3})
    with pytest.raises(ConfigError):
        config(blobs_setup, trainer={"optimizer": {"name": "rmsprop"}})


def test_config_yaml_round_trip(blobs_setup, tmp_path):
    cfg = config(blobs_setup, strategy={"name": "mixed", "ratio": [3, 1]})
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(cfg.to_dict()))
    assert load_config(path) == cfg


# -- CLI ---------------------------------------------------------------------


def write_cfg(setup, tmp_path, **changes):
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(config(setup, tmp_path, **changes).to_dict()))
    return path


def test_cli_run_report_and_replay(blobs_setup, tmp_path):
    path = write_cfg(blobs_setup, tmp_path, cache_path=str(tmp_path / "cache.jsonl"), trainer={"epochs": 2})
    out = tmp_path / "result.json"
    assert main(["run", str(path), "-o", str(out)]) == 0
    result, = load_result(out)
    assert result.reports[0].spent == 64
    assert (tmp_path / "out" / "queries_seed0.jsonl").exists()
    assert (tmp_path / "out" / "piracy_seed0.npz").exists()

    replay_out = tmp_path / "replay.json"
    assert main(["replay", str(path), "-o", str(replay_out)]) == 0
    replayed, = load_result(replay_out)
    assert replayed.reports[0].spent == 0
    assert replayed.reports[0].metrics == result.reports[0].metrics

    assert main(["report", str(out), str(replay_out), "--format", "table", "-o", str(tmp_path / "t.txt")]) == 0
    assert "±" in (tmp_path / "t.txt").read_text()


def test_cli_exit_codes(blobs_setup, tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("schema_version: 1\nbogus: true\n")
    assert main(["run", str(bad)]) == 2
    assert main(["run", str(tmp_path / "missing.yaml")]) == 2
    # replay against an empty cache must buy its first batch, which a zero budget forbids
    path = write_cfg(blobs_setup, tmp_path, cache_path=str(tmp_path / "empty.jsonl"))
    assert main(["replay", str(path)]) == 3
    assert main(["report", str(tmp_path / "nothing.json")]) == 4


def test_cli_retro_diff(tmp_path):
    head = "# mextract-snapshot v1\ninput_id,year,class,confidence\n"
    (tmp_path / "a.csv").write_text(head + "x,2020,0,0.9\ny,2020,1,0.5\n")
    (tmp_path / "b.csv").write_text(head + "x,2024,0,0.8\ny,2024,0,0.6\n")
    out = tmp_path / "d.json"
    assert main(["retro-diff", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"), "-o", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["predicted_class_overlap"] == 0.5
    assert doc["mean_abs_confidence_delta"] == pytest.approx(0.1)
    (tmp_path / "c.csv").write_text(head + "x,2020,0,1.3\n")
    assert main(["retro-diff", str(tmp_path / "a.csv"), str(tmp_path / "c.csv")]) == 2
