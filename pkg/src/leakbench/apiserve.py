"""Prediction API for a victim model and the attacker-side client.

Wire format (JSON over HTTP/1.1):

    POST /v1/predict   {"texts": [...], "ids": [...]?}
                    -> {"posteriors": [[...], ...], "model_info": {"num_classes": C}}
    GET  /v1/info   -> {"num_classes": C, "defense": "<kind>"}
    GET  /v1/health -> "ok"

``ids`` is optional; when present it keys the per-request noise stream of
stochastic defenses, which makes HTTP answers identical to in-process ones.
"""
from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Sequence

import numpy as np
import requests

from leakbench.corpus import tokenize
from leakbench.errors import ApiError, BudgetExhausted, ConfigError, StartupError
from leakbench.victim import VictimModel, predict_batch

logger = logging.getLogger(__name__)

DEFAULT_MAX_BATCH = 256


@dataclass(frozen=True)
class Query:
    id: str
    tokens: tuple[str, ...]


class BudgetLedger:
    """Query counter with an atomic check-and-add."""

    def __init__(self, max_queries: int):
        if max_queries < 0:
            raise ConfigError("max_queries must be >= 0")
        self.max_queries = int(max_queries)
        self._used = 0
        self._lock = threading.Lock()

    @property
    def used(self) -> int:
        return self._used

    @property
    def remaining(self) -> int:
        return self.max_queries - self._used

    def reserve(self, n: int) -> None:
        with self._lock:
            if self._used + n > self.max_queries:
                raise BudgetExhausted(f"need {n} queries, {self.max_queries - self._used} left")
            self._used += n

    def refund(self, n: int) -> None:
        with self._lock:
            self._used = max(0, self._used - n)


# --------------------------------------------------------------------------
# server
# --------------------------------------------------------------------------


class _Handler(BaseHTTPRequestHandler):
    server_version = "leakbench/1"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        logger.debug("%s - %s", self.address_string(), fmt % args)

    def _send(self, status: int, body, content_type: str = "application/json") -> None:
        data = body.encode("utf-8") if isinstance(body, str) else json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", f"{content_type}; charset=utf-8")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _error(self, status: int, message: str) -> None:
        self._send(status, {"error": message})

    def do_GET(self):
        victim: VictimModel = self.server.victim
        if self.path == "/v1/health":
            self._send(HTTPStatus.OK, "ok", "text/plain")
        elif self.path == "/v1/info":
            self._send(HTTPStatus.OK, {"num_classes": victim.num_classes, "defense": victim.defense.kind})
        else:
            self._error(HTTPStatus.NOT_FOUND, f"no route {self.path}")

    def do_POST(self):
        if self.path != "/v1/predict":
            self._error(HTTPStatus.NOT_FOUND, f"no route {self.path}")
            return
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length)
        try:
            payload = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            self._error(HTTPStatus.BAD_REQUEST, "body is not valid JSON")
            return
        texts = payload.get("texts") if isinstance(payload, dict) else None
        if not isinstance(texts, list) or not all(isinstance(t, str) for t in texts):
            self._error(HTTPStatus.BAD_REQUEST, "'texts' must be a list of strings")
            return
        ids = payload.get("ids")
        if ids is None:
            ids = texts
        if not isinstance(ids, list) or len(ids) != len(texts):
            self._error(HTTPStatus.BAD_REQUEST, "'ids' must be a list aligned with 'texts'")
            return
        if len(texts) > self.server.max_batch:
            self._error(HTTPStatus.REQUEST_ENTITY_TOO_LARGE, f"batch exceeds {self.server.max_batch}")
            return
        queries = [Query(str(i), tuple(tokenize(t))) for i, t in zip(ids, texts)]
        if any(not q.tokens for q in queries):
            self._error(HTTPStatus.BAD_REQUEST, "every text needs at least one token")
            return
        posteriors = predict_batch(self.server.victim, queries)
        self._send(
            HTTPStatus.OK,
            {"posteriors": posteriors.tolist(), "model_info": {"num_classes": self.server.victim.num_classes}},
        )


class ServiceHandle:
    """A running prediction service. Use as a context manager or call :meth:`close`."""

    def __init__(self, httpd: ThreadingHTTPServer):
        self.httpd = httpd
        self.thread = threading.Thread(target=httpd.serve_forever, daemon=True)
        self.thread.start()

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def close(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        self.thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(victim: VictimModel, host: str = "127.0.0.1", port: int = 0,
          max_batch: int = DEFAULT_MAX_BATCH) -> ServiceHandle:
    if not victim.model.trained:
        raise ConfigError("victim must be trained before serving")
    try:
        httpd = ThreadingHTTPServer((host, port), _Handler)
    except OSError as exc:
        raise StartupError(f"cannot bind {host}:{port}: {exc}") from exc
    httpd.daemon_threads = True
    httpd.victim = victim
    httpd.max_batch = max_batch
    logger.info("serving victim on http://%s:%d", *httpd.server_address[:2])
    return ServiceHandle(httpd)


# --------------------------------------------------------------------------
# client
# --------------------------------------------------------------------------


class DirectTransport:
    """In-process transport with the same interface as :class:`HttpTransport`."""

    def __init__(self, victim: VictimModel):
        self.victim = victim

    def predict(self, docs: Sequence) -> np.ndarray:
        return predict_batch(self.victim, docs)


class HttpTransport:
    def __init__(self, url: str, timeout: float = 30.0, retries: int = 3, backoff: float = 0.05):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.session = requests.Session()

    def _post(self, payload: dict) -> requests.Response:
        for attempt in range(self.retries + 1):
            try:
                resp = self.session.post(f"{self.url}/v1/predict", json=payload, timeout=self.timeout)
            except (requests.ConnectionError, requests.Timeout) as exc:
                if attempt == self.retries:
                    raise ApiError(f"transport failure after {attempt + 1} attempts: {exc}") from exc
            else:
                if resp.status_code != HTTPStatus.SERVICE_UNAVAILABLE or attempt == self.retries:
                    return resp
            time.sleep(self.backoff * 2**attempt)
        raise AssertionError("unreachable")

    def predict(self, docs: Sequence) -> np.ndarray:
        payload = {"texts": [" ".join(d.tokens) for d in docs], "ids": [str(d.id) for d in docs]}
        resp = self._post(payload)
        if resp.status_code != HTTPStatus.OK:
            raise ApiError(resp.text, resp.status_code)
        posteriors = np.asarray(resp.json()["posteriors"], dtype=np.float64)
        if posteriors.shape[0] != len(docs):
            raise ApiError("response length does not match request")
        return posteriors

    def info(self) -> dict:
        resp = self.session.get(f"{self.url}/v1/info", timeout=self.timeout)
        if resp.status_code != HTTPStatus.OK:
            raise ApiError(resp.text, resp.status_code)
        return resp.json()


def as_transport(endpoint):
    if isinstance(endpoint, str):
        return HttpTransport(endpoint)
    if isinstance(endpoint, VictimModel):
        return DirectTransport(endpoint)
    return endpoint


def client_query(endpoint, docs: Sequence, ledger: BudgetLedger, batch_size: int = 128) -> list[np.ndarray]:
    """Query the victim for every document, charging ``ledger`` up front.

    ``endpoint`` is a URL, a :class:`VictimModel` (direct transport) or any
    object with a ``predict(docs)`` method.  On failure the charge is refunded.
    """
    transport = as_transport(endpoint)
    n = len(docs)
    ledger.reserve(n)
    try:
        out = []
        for start in range(0, n, batch_size):
            out.extend(transport.predict(docs[start : start + batch_size]))
    except Exception:
        ledger.refund(n)
        raise
    return out
