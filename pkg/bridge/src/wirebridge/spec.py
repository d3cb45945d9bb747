"""Bridge specification: which model to wrap and how to serve it.

A spec is a flat JSON file:

```json
{
  "loader": "my_models.loaders:load_resnet",
  "loader_args": {"weights": "resnet.bin"},
  "input_shape": [32, 32, 3],
  "num_labels": 10,
  "host": "127.0.0.1",
  "port": 8765,
  "query_budget": 100000
}
```

``loader`` names a callable — either ``package.module:attr`` on the import
path or ``path/to/file.py:attr`` — that is called with ``loader_args`` and
returns the predictor. The predictor takes one float batch of shape
``(n, *input_shape)`` and returns either integer labels ``(n,)`` or a score
matrix ``(n, num_labels)``; scores are reduced to argmax labels inside the
bridge and never leave the process.

The declared ``input_shape``/``num_labels`` are checked against the wrapped
model with one dry-run input before the server starts, so a spec that lies
about its model fails at startup instead of mid-scan.
"""

from __future__ import annotations

import importlib
import importlib.util
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np


class BridgeError(Exception):
    """Base class for everything the bridge raises on purpose."""


class SpecError(BridgeError):
    """The spec file is missing, malformed, or self-inconsistent."""


class StartupError(BridgeError):
    """The model failed to load or failed dry-run validation."""


_ALLOWED_KEYS = {
    "loader",
    "loader_args",
    "input_shape",
    "num_labels",
    "host",
    "port",
    "query_budget",
}


@dataclass(frozen=True)
class BridgeSpec:
    loader: str
    input_shape: tuple
    num_labels: int
    loader_args: dict = field(default_factory=dict)
    host: str = "127.0.0.1"
    port: int = 8765
    query_budget: Optional[int] = None

    def __post_init__(self):
        if not isinstance(self.loader, str) or ":" not in self.loader:
            raise SpecError(
                f"loader must look like 'module:attr' or 'file.py:attr', got {self.loader!r}"
            )
        shape = tuple(self.input_shape)
        if len(shape) != 3 or any(not isinstance(d, int) or d <= 0 for d in shape):
            raise SpecError(f"input_shape must be three positive ints, got {self.input_shape!r}")
        object.__setattr__(self, "input_shape", shape)
        if not isinstance(self.num_labels, int) or self.num_labels < 2:
            raise SpecError(f"num_labels must be an int >= 2, got {self.num_labels!r}")
        if not isinstance(self.loader_args, dict):
            raise SpecError("loader_args must be an object of keyword arguments")
        if not isinstance(self.port, int) or not (0 <= self.port <= 65535):
            raise SpecError(f"port must be an int in [0, 65535], got {self.port!r}")
        if self.query_budget is not None:
            if not isinstance(self.query_budget, int) or self.query_budget <= 0:
                raise SpecError(f"query_budget must be a positive int, got {self.query_budget!r}")


def load_spec(path) -> BridgeSpec:
    """Parse and validate a BridgeSpec JSON file."""
    p = Path(path)
    try:
        raw = p.read_text()
    except OSError as exc:
        raise SpecError(f"cannot read spec file {p}: {exc}") from exc
    try:
        doc = json.loads(raw)
    except ValueError as exc:
        raise SpecError(f"spec file {p} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SpecError("spec file must contain a JSON object")
    unknown = set(doc) - _ALLOWED_KEYS
    if unknown:
        raise SpecError(f"unknown spec keys: {sorted(unknown)}")
    missing = {"loader", "input_shape", "num_labels"} - set(doc)
    if missing:
        raise SpecError(f"spec is missing required keys: {sorted(missing)}")
    try:
        return BridgeSpec(**doc)
    except TypeError as exc:
        raise SpecError(str(exc)) from exc


def resolve_loader(ref: str) -> Callable:
    """Turn 'module:attr' or 'path/to/file.py:attr' into the named callable."""
    target, _, attr = ref.rpartition(":")
    if not target or not attr:
        raise SpecError(f"loader reference {ref!r} must be 'module:attr'")
    if target.endswith(".py"):
        path = Path(target)
        if not path.exists():
            raise StartupError(f"loader file {path} does not exist")
        modspec = importlib.util.spec_from_file_location(path.stem, path)
        if modspec is None or modspec.loader is None:
            raise StartupError(f"cannot import loader file {path}")
        module = importlib.util.module_from_spec(modspec)
        try:
            modspec.loader.exec_module(module)
        except Exception as exc:
            raise StartupError(f"loader file {path} failed to import: {exc}") from exc
    else:
        try:
            module = importlib.import_module(target)
        except Exception as exc:
            raise StartupError(f"cannot import loader module {target!r}: {exc}") from exc
    try:
        fn = getattr(module, attr)
    except AttributeError as exc:
        raise StartupError(f"loader module {target!r} has no attribute {attr!r}") from exc
    if not callable(fn):
        raise StartupError(f"loader {ref!r} is not callable")
    return fn


def load_predictor(spec: BridgeSpec) -> Callable[[np.ndarray], np.ndarray]:
    """Load the wrapped model and normalize it to a labels-only callable.

    Runs one all-zeros input through the model to verify the declared
    interface; raises StartupError with the real shapes on any mismatch.
    """
    fn = resolve_loader(spec.loader)
    try:
        predictor = fn(**spec.loader_args)
    except Exception as exc:
        raise StartupError(f"loader {spec.loader!r} failed: {exc}") from exc
    if not callable(predictor):
        raise StartupError(f"loader {spec.loader!r} did not return a callable predictor")

    probe = np.zeros((1, *spec.input_shape), dtype=np.float64)
    try:
        out = np.asarray(predictor(probe))
    except Exception as exc:
        raise StartupError(f"dry-run classification failed: {exc}") from exc

    if out.shape == (1, spec.num_labels):
        return lambda batch: np.argmax(np.asarray(predictor(batch)), axis=1)
    if out.shape == (1,):
        if not np.issubdtype(out.dtype, np.integer):
            raise StartupError(f"label predictor must return integers, got dtype {out.dtype}")
        label = int(out[0])
        if not 0 <= label < spec.num_labels:
            raise StartupError(
                f"dry-run label {label} outside declared range [0, {spec.num_labels})"
            )
        return lambda batch: np.asarray(predictor(batch))
    raise StartupError(
        f"predictor output shape {out.shape} matches neither labels (1,) nor "
        f"scores (1, {spec.num_labels}); declared shape/labels are wrong"
    )
