"""Hard-label wire endpoint around a wrapped classifier.

Implements protocol version 1 as documented by the scanner it serves
(`GET /meta`, `POST /classify`, `POST /classify_batch`): JSON over HTTP/1.1,
errors as `{"code", "error"}`, validation before counting, whole-batch
refusal when the query budget would be exceeded, inputs clipped into [0, 1]
server-side. Responses carry integer labels only — scores never leave the
process, whatever the wrapped model returns.

There is deliberately no code shared with the scanner; the contract is the
protocol document plus the golden vectors vendored under ``tests/data/``.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Optional

import numpy as np

from .spec import BridgeSpec, load_predictor

PROTOCOL_VERSION = 1


def _parse_input(obj, input_shape):
    """Validate one {"shape", "data"} payload; returns the clipped array.

    Raises ValueError whose message starts with the protocol error code.
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
    return np.clip(arr, 0.0, 1.0)


class _Counter:
    """Monotone query counter with an optional hard budget; thread-safe."""

    def __init__(self, budget: Optional[int]):
        self.budget = budget
        self.used = 0
        self._lock = threading.Lock()

    def take(self, units: int) -> bool:
        """Commit ``units`` queries atomically; False if it would overrun."""
        with self._lock:
            if self.budget is not None and self.used + units > self.budget:
                return False
            self.used += units
            return True


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "wirebridge"
    # Nagle/delayed-ACK stalls every single-query round trip ~40 ms without this.
    disable_nagle_algorithm = True
    # Set on the subclass by BridgeServer:
    labels_fn: Callable[[np.ndarray], np.ndarray] = None
    input_shape: tuple = None
    num_labels: int = None
    counter: _Counter = None

    def log_message(self, fmt, *args):
        pass  # quiet by default; the CLI prints the endpoint line

    def _reply(self, status: int, payload) -> None:
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _error(self, status: int, code: str, message: str) -> None:
        self._reply(status, {"code": code, "error": message})

    def _read_json(self):
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length)
        try:
            return json.loads(raw)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ValueError(f"bad_json: {exc}") from exc

    def do_GET(self):
        if self.path != "/meta":
            self._error(404, "not_found", f"unknown path {self.path}")
            return
        self._reply(200, {
            "v": PROTOCOL_VERSION,
            "num_labels": self.num_labels,
            "shape": list(self.input_shape),
            "queries_served": self.counter.used,
        })

    def do_POST(self):
        if self.path not in ("/classify", "/classify_batch"):
            self._error(404, "not_found", f"unknown path {self.path}")
            return
        try:
            payload = self._read_json()
            if self.path == "/classify":
                objs = [payload]
            else:
                if not isinstance(payload, list) or not payload:
                    raise ValueError("bad_payload: batch body must be a non-empty array")
                objs = payload
            arrays = [_parse_input(obj, self.input_shape) for obj in objs]
        except ValueError as exc:
            code, _, msg = str(exc).partition(": ")
            self._error(400, code, msg or code)
            return
        if not self.counter.take(len(arrays)):
            self._error(429, "over_budget", f"budget {self.counter.budget} would be exceeded")
            return
        try:
            labels = self.labels_fn(np.stack(arrays))
        except Exception as exc:  # the wrapped model is third-party code
            self._error(500, "internal_error", f"wrapped model failed: {exc}")
            return
        if self.path == "/classify":
            self._reply(200, {"label": int(labels[0])})
        else:
            self._reply(200, [int(v) for v in labels])


class BridgeServer:
    """A running bridge endpoint; use as a context manager or call .start()."""

    def __init__(self, spec: BridgeSpec, labels_fn: Optional[Callable] = None):
        """Serve ``spec``. ``labels_fn`` overrides the spec's loader (for tests)."""
        self.spec = spec
        fn = labels_fn if labels_fn is not None else load_predictor(spec)
        counter = _Counter(spec.query_budget)
        handler = type("BoundHandler", (_Handler,), {
            "labels_fn": staticmethod(fn),
            "input_shape": spec.input_shape,
            "num_labels": spec.num_labels,
            "counter": counter,
        })
        self._counter = counter
        self._httpd = ThreadingHTTPServer((spec.host, spec.port), handler)
        self._thread: Optional[threading.Thread] = None

    @property
    def queries_served(self) -> int:
        return self._counter.used

    @property
    def endpoint(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "BridgeServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def __enter__(self) -> "BridgeServer":
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve_spec(spec: BridgeSpec) -> BridgeServer:
    """Validate the spec against the wrapped model and start serving it."""
    return BridgeServer(spec).start()
