import json
import socket
import threading

import numpy as np
import pytest

from mextract.errors import BindFailure, BudgetExhausted, RateLimited, TransportError, Unauthorized
from mextract.gateway import ApiKeyAccount, GatewayClient, GatewayService, encode_input, remote_query, serve
from mextract.oracle import Budget, LinearVictim, Oracle, ResponsePolicy

W = np.random.default_rng(7).normal(size=(3, 5))


def make_oracle(batches=4, batch_size=64, backend=None, **kw):
    return Oracle(backend or LinearVictim(W), Budget(batches, batch_size), **kw)


@pytest.fixture
def gateway():
    oracle = make_oracle()
    with serve(oracle, accounts=[ApiKeyAccount("k1")]) as handle:
        yield handle, oracle


def test_full_policy_response_shape(gateway):
    handle, _ = gateway
    rec, = remote_query(handle.url, "k1", [np.random.default_rng(0).normal(size=5)])
    assert len(rec.response) == 3
    assert abs(sum(rec.response) - 1) <= 1e-6


def test_unknown_key_is_401(gateway):
    handle, oracle = gateway
    with pytest.raises(Unauthorized):
        remote_query(handle.url, "nope", [np.zeros(5)])
    status, body = handle.service.handle({"key": "nope", "inputs": []})
    assert status == 401 and body["error"]["code"] == "unauthorized"
    assert oracle.budget.spent == 0


def test_rate_limit_is_429_with_retry_after():
    oracle = make_oracle()
    service = GatewayService(oracle, [ApiKeyAccount("k", rate_limit=1.0, burst=2.0)])
    body = {"key": "k", "inputs": [encode_input(np.full(5, i, dtype=np.float64)) for i in range(5)]}
    status, payload = service.handle(body)
    assert status == 429 and payload["error"]["retry_after"] > 0
    with serve(oracle, accounts=[ApiKeyAccount("k", rate_limit=1.0, burst=2.0)]) as handle:
        with pytest.raises(RateLimited) as e:
            remote_query(handle.url, "k", [np.zeros(5)] * 3)
        assert e.value.retry_after > 0
    assert oracle.budget.spent == 0


def test_malformed_request_is_400(gateway):
    handle, _ = gateway
    assert handle.service.handle({"key": "k1"})[0] == 400
    assert handle.service.handle(["not", "an", "object"])[0] == 400


def test_loopback_matches_local_oracle_byte_for_byte(gateway):
    handle, remote_oracle = gateway
    local = make_oracle()
    rng = np.random.default_rng(1)
    xs = [rng.normal(size=5) for _ in range(100)]
    xs[10] = xs[3]  # a repeat, so a cache hit is billed at zero on both sides
    for chunk in range(0, 100, 25):
        batch = xs[chunk : chunk + 25]
        remote = remote_query(handle.url, "k1", batch)
        here = local.query(batch)
        assert [json.dumps(r.response) for r in remote] == [json.dumps(r.response) for r in here]
        assert [(r.input_id, r.cost) for r in remote] == [(r.input_id, r.cost) for r in here]
    assert remote_oracle.budget.spent == local.budget.spent == 99


@pytest.mark.parametrize(
    "policy",
    [ResponsePolicy.top1(), ResponsePolicy.label_only(), ResponsePolicy.quantized(0.2), ResponsePolicy.descriptor()],
)
def test_degraded_policies_round_trip(policy):
    local = make_oracle(policy=policy)
    xs = list(np.random.default_rng(2).normal(size=(10, 5)))
    with serve(make_oracle(), accounts=[ApiKeyAccount("k", policy=policy)]) as handle:
        remote = remote_query(handle.url, "k", xs)
    assert [r.response for r in remote] == [r.response for r in local.query(xs)]
    assert all(r.policy_kind == policy.tag for r in remote)


def test_confidences_keep_full_precision(gateway):
    handle, oracle = gateway
    x = np.random.default_rng(3).normal(size=5)
    rec, = remote_query(handle.url, "k1", [x])
    assert np.array(rec.response) == pytest.approx(oracle.backend.predict(x[None])[0], rel=1e-12)


def test_dropped_response_retry_is_not_double_billed(gateway):
    handle, oracle = gateway
    handle.service.drop_responses = 1
    xs = list(np.random.default_rng(4).normal(size=(8, 5)))
    recs = remote_query(handle.url, "k1", xs, idempotency_token="tok-1", retries=2)
    assert len(recs) == 8 and sum(r.cost for r in recs) == 8
    assert oracle.budget.spent == 8
    again = remote_query(handle.url, "k1", xs, idempotency_token="tok-1")
    assert [r.response for r in again] == [r.response for r in recs]
    assert oracle.budget.spent == 8


def test_unrecovered_transport_failure_raises(gateway):
    handle, _ = gateway
    handle.service.drop_responses = 5
    with pytest.raises(TransportError):
        remote_query(handle.url, "k1", [np.zeros(5)], retries=1)


def test_backend_failure_bills_nothing():
    class Broken(LinearVictim):
        def predict(self, batch):
            raise RuntimeError("disk on fire")

    oracle = make_oracle(backend=Broken(W))
    with serve(oracle, accounts=[ApiKeyAccount("k")]) as handle:
        with pytest.raises(TransportError):
            remote_query(handle.url, "k", list(np.ones((4, 5))))
    assert oracle.budget.spent == 0 and len(oracle.log) == 0


def test_budget_exhaustion_maps_to_exception():
    with serve(make_oracle(batches=1, batch_size=2), accounts=[ApiKeyAccount("k")]) as handle:
        remote_query(handle.url, "k", [np.zeros(5), np.ones(5)])
        with pytest.raises(BudgetExhausted):
            remote_query(handle.url, "k", [np.full(5, 2.0)])


def test_concurrent_clients_exactly_exhaust_shared_budget():
    oracle = make_oracle(batches=10, batch_size=10)
    received = []
    lock = threading.Lock()
    with serve(oracle, accounts=[ApiKeyAccount("k", rate_limit=1e6)]) as handle:

        def client(seed):
            rng = np.random.default_rng(seed)
            while True:
                try:
                    recs = remote_query(handle.url, "k", list(rng.normal(size=(3, 5))))
                except BudgetExhausted:
                    return
                with lock:
                    received.extend(recs)

        threads = [threading.Thread(target=client, args=(s,)) for s in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    billed = sum(r.cost for r in received)
    assert oracle.budget.spent == billed <= 100
    assert oracle.budget.remaining < 3  # every client stopped only because a batch of 3 no longer fit


def test_concurrent_clients_fill_budget_exactly_with_unit_batches():
    oracle = make_oracle(batches=6, batch_size=10)
    with serve(oracle, accounts=[ApiKeyAccount("k", rate_limit=1e6)]) as handle:
        counts = [0] * 8

        def client(i):
            rng = np.random.default_rng(100 + i)
            while True:
                try:
                    remote_query(handle.url, "k", [rng.normal(size=5)])
                except BudgetExhausted:
                    return
                counts[i] += 1

        threads = [threading.Thread(target=client, args=(i,)) for i in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    assert sum(counts) == 60 == oracle.budget.spent


def test_bind_failure():
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    sock.listen(1)
    try:
        with pytest.raises(BindFailure):
            serve(make_oracle(), address=sock.getsockname(), accounts=[ApiKeyAccount("k")])
    finally:
        sock.close()


def test_client_uses_separate_eval_key_and_checks_policy():
    oracle = make_oracle(eval_budget=Budget(1, 16))
    accounts = [ApiKeyAccount("atk", policy=ResponsePolicy.top1()), ApiKeyAccount("ev")]
    with serve(oracle, accounts=accounts) as handle:
        client = GatewayClient(handle.url, "atk", eval_key="ev")
        client.query([np.zeros(5)], policy=ResponsePolicy.top1())
        client.query([np.ones(5)], policy=ResponsePolicy.full(), budget_tag="eval")
        with pytest.raises(Exception, match="policy"):
            client.query([np.full(5, 3.0)], policy=ResponsePolicy.full())
    assert oracle.budget.spent == 2 and oracle.budgets["eval"].spent == 1
    assert len(client.log) == 2
