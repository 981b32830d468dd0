"""Mock MLaaS endpoint over HTTP/JSON, with per-key billing and rate limits.

Wire protocol (version 1), single route ``POST /v1/predict``, header
``X-Api-Version: 1``::

    request  {"key": str, "inputs": [{"dtype": str, "shape": [int], "data": base64}],
              "round": int, "budget_tag": "attack" | "eval", "idempotency_token": str | null}
    200      {"api_version": 1, "policy": str,
              "results": [{"input_id": str, "predictions": [...], "cost": float, "timestamp": int}],
              "billing": {"cost": float, "remaining": int}}
    error    {"error": {"code": str, "message": str, "retry_after": float?}}

``predictions`` entries are ``{"class": j, "confidence": s}`` (full, quantized,
top1), ``{"class": j, "likelihood": name}`` (descriptor) or ``{"class": j}``
(label_only).  Error statuses: 400 bad_request, 401 unauthorized,
402 budget_exhausted, 422 invalid_input, 429 rate_limited, 500 backend_error.
Inputs are shipped as raw bytes so the server hashes exactly what the client
hashed.
"""

from __future__ import annotations

import base64
import http.client
import json
import threading
import time
import urllib.error
import urllib.request
import uuid
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import (
    BindFailure,
    BudgetExhausted,
    ExtractionError,
    InvalidInput,
    RateLimited,
    TransportError,
    Unauthorized,
)
from .oracle import DegradedResponse, Oracle, QueryLog, QueryRecord, ResponsePolicy

API_VERSION = 1
ROUTE = "/v1/predict"


@dataclass
class ApiKeyAccount:
    key_id: str
    policy: ResponsePolicy = field(default_factory=ResponsePolicy.full)
    rate_limit: float = 1000.0  # queries per second
    burst: float | None = None  # bucket capacity, defaults to one second of traffic
    spent: int = 0

    def __post_init__(self) -> None:
        if self.rate_limit <= 0:
            raise ValueError("rate limit must be positive")
        self._tokens = self.capacity
        self._stamp = time.monotonic()
        self._lock = threading.Lock()

    @property
    def capacity(self) -> float:
        return self.burst if self.burst is not None else self.rate_limit

    def take(self, n: int) -> float:
        """Consume ``n`` tokens; return 0 on success or the seconds to wait."""
        with self._lock:
            now = time.monotonic()
            self._tokens = min(self.capacity, self._tokens + (now - self._stamp) * self.rate_limit)
            self._stamp = now
            if n <= self._tokens:
                self._tokens -= n
                return 0.0
            return max((n - self._tokens) / self.rate_limit, 1e-3)

    def add_spent(self, n: int) -> None:
        with self._lock:
            self.spent += n


# --------------------------------------------------------------------------
# encoding


def encode_input(x: np.ndarray) -> dict:
    a = np.ascontiguousarray(x)
    return {"dtype": a.dtype.str, "shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode()}


def decode_input(d: Mapping[str, Any]) -> np.ndarray:
    raw = base64.b64decode(d["data"], validate=True)
    a = np.frombuffer(raw, dtype=np.dtype(d["dtype"]))
    return a.reshape(tuple(d["shape"])).copy()


def encode_response(response: DegradedResponse, policy: ResponsePolicy) -> list[dict]:
    kind = policy.kind
    if kind == "label_only":
        return [{"class": int(response)}]
    if kind == "top1":
        return [{"class": int(response[0]), "confidence": float(response[1])}]
    if kind == "descriptor":
        return [{"class": j, "likelihood": name} for j, name in enumerate(response)]
    return [{"class": j, "confidence": float(s)} for j, s in enumerate(response)]


def decode_response(predictions: Sequence[Mapping[str, Any]], policy_tag: str) -> DegradedResponse:
    kind = policy_tag.split(":", 1)[0]
    if kind == "label_only":
        return int(predictions[0]["class"])
    if kind == "top1":
        return (int(predictions[0]["class"]), float(predictions[0]["confidence"]))
    ordered = sorted(predictions, key=lambda p: p["class"])
    if kind == "descriptor":
        return tuple(str(p["likelihood"]) for p in ordered)
    return tuple(float(p["confidence"]) for p in ordered)


# --------------------------------------------------------------------------
# server


class _ApiError(Exception):
    def __init__(self, status: int, code: str, message: str, retry_after: float | None = None):
        super().__init__(message)
        self.status, self.code, self.retry_after = status, code, retry_after

    def body(self) -> dict:
        err: dict[str, Any] = {"code": self.code, "message": str(self)}
        if self.retry_after is not None:
            err["retry_after"] = self.retry_after
        return {"error": err}


class GatewayService:
    """Request handling independent of the HTTP plumbing."""

    def __init__(self, oracle: Oracle, accounts: Sequence[ApiKeyAccount]):
        self.oracle = oracle
        self.accounts = {a.key_id: a for a in accounts}
        self._done: dict[str, tuple[int, dict]] = {}
        self._token_locks: dict[str, threading.Lock] = {}
        self._lock = threading.Lock()
        # test hook: number of upcoming responses to drop after processing
        self.drop_responses = 0

    def handle(self, body: Mapping[str, Any]) -> tuple[int, dict]:
        token = body.get("idempotency_token") if isinstance(body, Mapping) else None
        if not token:
            return self._process(body)
        with self._lock:
            if token in self._done:
                return self._done[token]
            lock = self._token_locks.setdefault(token, threading.Lock())
        with lock:
            with self._lock:
                if token in self._done:
                    return self._done[token]
            status, payload = self._process(body)
            if status == 200:
                with self._lock:
                    self._done[token] = (status, payload)
            return status, payload

    def _process(self, body: Mapping[str, Any]) -> tuple[int, dict]:
        try:
            return 200, self._predict(body)
        except _ApiError as e:
            return e.status, e.body()

    def _predict(self, body: Mapping[str, Any]) -> dict:
        if not isinstance(body, Mapping):
            raise _ApiError(400, "bad_request", "body must be a JSON object")
        account = self.accounts.get(body.get("key"))
        if account is None:
            raise _ApiError(401, "unauthorized", "unknown API key")
        try:
            inputs = [decode_input(d) for d in body["inputs"]]
            round_ = int(body.get("round", 0))
            tag = str(body.get("budget_tag", "attack"))
        except (KeyError, TypeError, ValueError) as e:
            raise _ApiError(400, "bad_request", f"malformed request: {e}") from None
        wait = account.take(len(inputs))
        if wait > 0:
            raise _ApiError(429, "rate_limited", "rate limit exceeded", retry_after=wait)
        try:
            records = self.oracle.query(inputs, policy=account.policy, round=round_, budget_tag=tag)
        except BudgetExhausted as e:
            raise _ApiError(402, "budget_exhausted", str(e)) from None
        except InvalidInput as e:
            raise _ApiError(422, "invalid_input", str(e)) from None
        except Exception as e:  # backend failure: nothing was billed
            raise _ApiError(500, "backend_error", f"{type(e).__name__}: {e}") from None
        billed = sum(1 for r in records if r.cost > 0)
        account.add_spent(billed)
        budget = self.oracle.budgets.get(tag)
        return {
            "api_version": API_VERSION,
            "policy": account.policy.tag,
            "results": [
                {
                    "input_id": r.input_id,
                    "predictions": encode_response(r.response, account.policy),
                    "cost": r.cost,
                    "timestamp": r.timestamp,
                }
                for r in records
            ],
            "billing": {"cost": sum(r.cost for r in records), "remaining": budget.remaining if budget else 0},
        }


class _Handler(BaseHTTPRequestHandler):
    service: GatewayService  # set on the per-server subclass

    def log_message(self, format: str, *args: Any) -> None:  # quiet
        pass

    def _send(self, status: int, payload: dict) -> None:
        blob = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("X-Api-Version", str(API_VERSION))
        self.send_header("Content-Length", str(len(blob)))
        if status == 429:
            self.send_header("Retry-After", f"{payload['error']['retry_after']:.3f}")
        self.end_headers()
        self.wfile.write(blob)

    def do_POST(self) -> None:
        if self.path != ROUTE:
            self._send(404, {"error": {"code": "not_found", "message": self.path}})
            return
        if self.headers.get("X-Api-Version", str(API_VERSION)) != str(API_VERSION):
            self._send(400, {"error": {"code": "bad_request", "message": "unsupported API version"}})
            return
        try:
            length = int(self.headers.get("Content-Length", 0))
            body = json.loads(self.rfile.read(length))
        except (ValueError, json.JSONDecodeError):
            self._send(400, {"error": {"code": "bad_request", "message": "invalid JSON"}})
            return
        status, payload = self.service.handle(body)
        with self.service._lock:
            drop = self.service.drop_responses > 0
            if drop:
                self.service.drop_responses -= 1
        if drop:
            self.close_connection = True
            return
        self._send(status, payload)


class GatewayHandle:
    def __init__(self, server: ThreadingHTTPServer, service: GatewayService):
        self.server = server
        self.service = service
        self._thread = threading.Thread(target=server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}{ROUTE}"

    def shutdown(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        self._thread.join()

    def __enter__(self) -> "GatewayHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()


def serve(oracle: Oracle, address: tuple[str, int] = ("127.0.0.1", 0),
          accounts: Sequence[ApiKeyAccount] = ()) -> GatewayHandle:
    """Start serving ``oracle`` in a background thread."""
    service = GatewayService(oracle, accounts)
    handler = type("GatewayHandler", (_Handler,), {"service": service})
    try:
        server = ThreadingHTTPServer(address, handler)
    except OSError as e:
        raise BindFailure(f"cannot bind {address}: {e}") from e
    server.daemon_threads = True
    return GatewayHandle(server, service)


# --------------------------------------------------------------------------
# client


def remote_query(
    endpoint: str,
    key: str,
    batch: Sequence[np.ndarray],
    round: int = 0,
    budget_tag: str = "attack",
    idempotency_token: str | None = None,
    retries: int = 2,
    timeout: float = 60.0,
) -> list[QueryRecord]:
    """Query a gateway; transport failures are retried with the same token."""
    token = idempotency_token or uuid.uuid4().hex
    body = json.dumps({
        "key": key,
        "inputs": [encode_input(np.asarray(x)) for x in batch],
        "round": round,
        "budget_tag": budget_tag,
        "idempotency_token": token,
    }).encode()
    last: Exception | None = None
    for _ in range(retries + 1):
        req = urllib.request.Request(
            endpoint, data=body, method="POST",
            headers={"Content-Type": "application/json", "X-Api-Version": str(API_VERSION)},
        )
        try:
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                payload = json.loads(resp.read())
            break
        except urllib.error.HTTPError as e:
            _raise_api_error(e)
        except (urllib.error.URLError, http.client.HTTPException, ConnectionError, TimeoutError) as e:
            last = e
    else:
        raise TransportError(f"gateway unreachable: {last}")
    tag = payload["policy"]
    return [
        QueryRecord(r["input_id"], round, tag, decode_response(r["predictions"], tag), float(r["cost"]),
                    int(r["timestamp"]), budget_tag)
        for r in payload["results"]
    ]


def _raise_api_error(e: urllib.error.HTTPError) -> None:
    try:
        err = json.loads(e.read())["error"]
    except (ValueError, KeyError):
        raise TransportError(f"HTTP {e.code}") from None
    msg = err.get("message", "")
    if e.code == 401:
        raise Unauthorized(msg)
    if e.code == 429:
        raise RateLimited(msg, float(err.get("retry_after", 0.0)))
    if e.code == 402:
        raise BudgetExhausted(msg)
    if e.code == 422:
        raise InvalidInput(msg)
    raise TransportError(f"HTTP {e.code}: {msg}")


class GatewayClient:
    """Oracle-shaped client so the harness can attack over the network.

    The response policy is fixed by the account; ``query`` checks that the
    policy the caller expects is the one the server applied.
    """

    def __init__(self, endpoint: str, key: str, eval_key: str | None = None):
        self.endpoint = endpoint
        self.keys = {"attack": key, "eval": eval_key or key}
        self.log = QueryLog()

    def query(self, batch, policy: ResponsePolicy | None = None, round: int = 0,
              budget_tag: str = "attack") -> list[QueryRecord]:
        records = remote_query(self.endpoint, self.keys[budget_tag], list(batch), round, budget_tag)
        if policy is not None and records and records[0].policy_kind != policy.tag:
            raise ExtractionError(
                f"gateway applied policy {records[0].policy_kind!r}, expected {policy.tag!r}"
            )
        self.log.extend(records)
        return records
