"""Hard-label wire protocol: HTTP/1.1 + JSON, labels only.

Server side exposes any model (or oracle) as a classify-only endpoint;
client side presents a remote endpoint as a HardLabelOracle. The protocol is
deliberately minimal so adapters in other ecosystems can re-implement it from
the documented golden vectors:

    GET  /meta           -> {"v": 1, "num_labels", "shape", "queries_served"}
    POST /classify       -> body {"shape": [H,W,C], "data": [floats]}
                            -> {"label": int}
    POST /classify_batch -> body [input, ...] -> [int, ...]

Validation always precedes counting; out-of-range values are clipped to
[0, 1] (and logged), never rejected; budget refusal is status 429 with
code "over_budget".
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

import numpy as np
import requests

from .core import GapScanError, HardLabelOracle, QueryBudgetExceededError

PROTOCOL_VERSION = 1

logger = logging.getLogger("gapscan.wire")


class TransportError(GapScanError, ConnectionError):
    """The endpoint could not be reached (after retries)."""


class WireProtocolError(GapScanError, RuntimeError):
    """The remote peer answered outside the protocol contract."""


@dataclass
class WireConfig:
    host: str = "127.0.0.1"
    port: int = 0  # 0 = pick a free port
    query_budget: Optional[int] = None
    log_path: Optional[str] = None

    def __post_init__(self):
        if self.query_budget is not None and self.query_budget < 1:
            raise ValueError("query_budget, when set, must be >= 1")


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True) + "\n").encode()


def _parse_input(obj, input_shape):
    """Validate one {"shape", "data"} payload; returns (array, clipped_count).

    Raises ValueError with a short protocol error code in args[0].
    """
    if not isinstance(obj, dict):
        raise ValueError("bad_payload: input must be an object")
    shape = obj.get("shape")
    data = obj.get("data")
    if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(v, int) for v in shape)):
        raise ValueError("bad_shape: shape must be [H, W, C]")
    if tuple(shape) != tuple(input_shape):
        raise ValueError(f"bad_shape: expected {list(input_shape)}, got {shape}")
    n = int(np.prod(input_shape))
    if not isinstance(data, list) or len(data) != n:
        raise ValueError(f"bad_payload: data must hold exactly {n} numbers")
    try:
        arr = np.asarray(data, dtype=np.float64).reshape(input_shape)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"bad_payload: {exc}") from exc
    if not np.isfinite(arr).all():
        raise ValueError("bad_payload: data contains non-finite values")
    clipped = int(np.sum((arr < 0.0) | (arr > 1.0)))
    return np.clip(arr, 0.0, 1.0), clipped


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "gapscan-wire"
    # Without TCP_NODELAY every response stalls ~40 ms in Nagle/delayed-ACK,
    # which dominates single-query traffic.
    disable_nagle_algorithm = True
    oracle: HardLabelOracle = None  # set on the subclass by WireServer

    # -- plumbing ---------------------------------------------------------

    def _reply(self, status: int, payload) -> None:
        body = _json_bytes(payload)
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _error(self, status: int, code: str, message: str) -> None:
        self._reply(status, {"code": code, "error": message})

    def log_message(self, fmt, *args):  # route BaseHTTPRequestHandler logging
        logger.info("%s %s", self.address_string(), fmt % args)

    def _read_json(self):
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length)
        try:
            return json.loads(raw)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ValueError(f"bad_json: {exc}") from exc

    # -- routes -----------------------------------------------------------

    def do_GET(self):
        if self.path != "/meta":
            self._error(404, "not_found", f"unknown path {self.path}")
            return
        o = self.oracle
        self._reply(200, {
            "v": PROTOCOL_VERSION,
            "num_labels": o.num_labels,
            "shape": list(o.input_shape),
            "queries_served": o.queries_used,
        })

    def do_POST(self):
        if self.path not in ("/classify", "/classify_batch"):
            self._error(404, "not_found", f"unknown path {self.path}")
            return
        try:
            payload = self._read_json()
            if self.path == "/classify":
                arrs = [payload]
            else:
                if not isinstance(payload, list) or not payload:
                    raise ValueError("bad_payload: batch body must be a non-empty array")
                arrs = payload
            parsed = [_parse_input(obj, self.oracle.input_shape) for obj in arrs]
        except ValueError as exc:
            code, _, msg = str(exc).partition(": ")
            self._error(400, code, msg or code)
            return
        clipped = sum(c for _, c in parsed)
        if clipped:
            logger.info("clipped %d out-of-range value(s) into [0, 1]", clipped)
        batch = np.stack([a for a, _ in parsed])
        try:
            labels = self.oracle.classify_batch(batch)
        except QueryBudgetExceededError as exc:
            self._error(429, "over_budget", str(exc))
            return
        if self.path == "/classify":
            self._reply(200, {"label": int(labels[0])})
        else:
            self._reply(200, [int(v) for v in labels])


class WireServer:
    """A running wire endpoint around a HardLabelOracle (or zoo model)."""

    def __init__(self, model_or_oracle, cfg: Optional[WireConfig] = None):
        from .modelzoo import LocalOracle  # local import: modelzoo pulls numba

        self.cfg = cfg if cfg is not None else WireConfig()
        if isinstance(model_or_oracle, HardLabelOracle):
            if self.cfg.query_budget is not None:
                raise ValueError("pass the budget on the oracle, not both")
            self.oracle = model_or_oracle
        else:
            self.oracle = LocalOracle(model_or_oracle, query_budget=self.cfg.query_budget)
        handler = type("BoundHandler", (_Handler,), {"oracle": self.oracle})
        self._httpd = ThreadingHTTPServer((self.cfg.host, self.cfg.port), handler)
        self._thread: Optional[threading.Thread] = None
        self._log_handler: Optional[logging.Handler] = None
        if self.cfg.log_path:
            self._log_handler = logging.FileHandler(self.cfg.log_path)
            self._log_handler.setFormatter(
                logging.Formatter("%(asctime)s %(message)s")
            )
            logger.addHandler(self._log_handler)
            logger.setLevel(logging.INFO)

    @property
    def queries_served(self) -> int:
        return self.oracle.queries_used

    @property
    def address(self) -> tuple:
        return self._httpd.server_address[:2]

    @property
    def endpoint(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def start(self) -> "WireServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
        if self._log_handler is not None:
            logger.removeHandler(self._log_handler)
            self._log_handler.close()

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def __enter__(self) -> "WireServer":
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve(model, cfg: Optional[WireConfig] = None) -> WireServer:
    """Start serving a model; returns the running server (use .stop())."""
    return WireServer(model, cfg).start()


def reference_head(num_labels: int, input_shape, query_budget: Optional[int] = None):
    """The classifier behind the golden protocol vectors.

    label = argmax of the first `num_labels` values of the row-major
    flattened input (post-clip), ties breaking to the lowest label. Trivial
    to re-implement in any language, which is the point: protocol adapters
    validate against the vectors without sharing any code with this package.
    """
    from .core import CallableOracle

    def fn(xs: np.ndarray) -> np.ndarray:
        flat = xs.reshape(xs.shape[0], -1)[:, :num_labels]
        return np.argmax(flat, axis=1)

    return CallableOracle(fn, num_labels, input_shape, query_budget)


class RemoteOracle(HardLabelOracle):
    """A wire endpoint presented as a HardLabelOracle.

    Keeps its own local query ledger (and optional local budget) in addition
    to whatever budget the server enforces. Transient transport failures are
    retried up to `retries` times with exponential backoff.
    """

    def __init__(
        self,
        endpoint: str,
        query_budget: Optional[int] = None,
        timeout: float = 10.0,
        retries: int = 3,
        backoff: float = 0.1,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._session = requests.Session()
        meta = self._request("GET", "/meta")
        try:
            num_labels = int(meta["num_labels"])
            shape = tuple(int(v) for v in meta["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise WireProtocolError(f"malformed /meta response: {meta!r}") from exc
        super().__init__(num_labels, shape, query_budget)

    def _request(self, method: str, path: str, body=None):
        url = self.endpoint + path
        last_exc = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._session.request(
                    method, url, json=body, timeout=self.timeout
                )
                break
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_exc = exc
                if attempt < self.retries:
                    time.sleep(self.backoff * (2 ** attempt))
        else:
            raise TransportError(f"{url} unreachable after {self.retries} retries: {last_exc}")
        try:
            payload = resp.json()
        except ValueError as exc:
            raise WireProtocolError(f"{url}: non-JSON response (status {resp.status_code})") from exc
        if resp.status_code == 429:
            raise QueryBudgetExceededError(str(payload.get("error", "server budget exhausted")))
        if resp.status_code != 200:
            raise WireProtocolError(
                f"{url}: status {resp.status_code}, {payload.get('error', payload)!r}"
            )
        return payload

    def _encode(self, x: np.ndarray) -> dict:
        return {"shape": list(self._input_shape), "data": x.reshape(-1).tolist()}

    def _predict(self, xs: np.ndarray) -> np.ndarray:
        if len(xs) == 1:
            payload = self._request("POST", "/classify", self._encode(xs[0]))
            if not isinstance(payload, dict) or "label" not in payload:
                raise WireProtocolError(f"malformed /classify response: {payload!r}")
            return np.array([payload["label"]], dtype=np.int64)
        payload = self._request("POST", "/classify_batch", [self._encode(x) for x in xs])
        if not isinstance(payload, list) or len(payload) != len(xs):
            raise WireProtocolError(
                f"/classify_batch returned {type(payload).__name__} of wrong arity"
            )
        return np.asarray(payload, dtype=np.int64)


def remote_oracle(endpoint: str, **kwargs) -> RemoteOracle:
    """Connect to a wire endpoint; raises TransportError if /meta is unreachable."""
    return RemoteOracle(endpoint, **kwargs)
