"""Serve any classifier behind a hard-label JSON wire protocol.

The bridge wraps a user-supplied predictor (anything that maps a float batch
to labels or scores) and exposes it as a protocol-conformant endpoint that
returns argmax labels only, with exact query accounting and an optional hard
budget.
"""

from .spec import (
    BridgeError,
    BridgeSpec,
    SpecError,
    StartupError,
    load_predictor,
    load_spec,
    resolve_loader,
)
from .server import BridgeServer, serve_spec

__version__ = "0.1.0"

__all__ = [
    "BridgeError",
    "BridgeServer",
    "BridgeSpec",
    "SpecError",
    "StartupError",
    "load_predictor",
    "load_spec",
    "resolve_loader",
    "serve_spec",
    "__version__",
]
