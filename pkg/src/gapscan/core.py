"""Shared domain types: input tensors, triggers, hard-label oracles, sample banks.

Inputs are numpy arrays of shape (height, width, channels), float64, row-major
with channels innermost, every element in [0, 1]. That layout is canonical for
the whole package, including the wire protocol.
"""

from __future__ import annotations

import abc
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np


class GapScanError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatchError(GapScanError, ValueError):
    """Input rejected: wrong shape, wrong rank, or out-of-range values."""


class QueryBudgetExceededError(GapScanError, RuntimeError):
    """The oracle's query budget would be exceeded by this call."""


class BankConstructionError(GapScanError, RuntimeError):
    """A sample bank could not be built for at least one class."""


def validate_input(x, shape=None, name: str = "input") -> np.ndarray:
    """Coerce to a float64 (H, W, C) array in [0, 1] or raise ShapeMismatchError."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeMismatchError(f"{name}: expected a (H, W, C) array, got ndim={arr.ndim}")
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise ShapeMismatchError(f"{name}: expected shape {tuple(shape)}, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ShapeMismatchError(f"{name}: contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ShapeMismatchError(f"{name}: values outside [0, 1]")
    return arr


@dataclass(frozen=True)
class TriggerSpec:
    """A backdoor trigger: binary mask, pattern, blend coefficient, target label.

    Stamping an input x gives (1 - blend * mask) * x + blend * mask * pattern;
    blend 1.0 is an opaque patch, smaller blends are translucent watermarks.
    """

    mask: np.ndarray
    pattern: np.ndarray
    target_label: int
    blend: float = 1.0

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=np.float64)
        pattern = np.asarray(self.pattern, dtype=np.float64)
        if mask.shape != pattern.shape:
            raise ShapeMismatchError(
                f"mask shape {mask.shape} != pattern shape {pattern.shape}"
            )
        if not np.isin(mask, (0.0, 1.0)).all():
            raise ValueError("mask elements must be 0 or 1")
        if pattern.min() < 0.0 or pattern.max() > 1.0:
            raise ValueError("pattern values must lie in [0, 1]")
        if not 0.0 < self.blend <= 1.0:
            raise ValueError(f"blend must be in (0, 1], got {self.blend}")
        if self.target_label < 0:
            raise ValueError("target_label must be nonnegative")
        mask.setflags(write=False)
        pattern.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "pattern", pattern)

    @property
    def footprint(self) -> float:
        """Fraction of elements covered by the mask."""
        return float(self.mask.sum() / self.mask.size)


def apply_trigger(x, trigger: TriggerSpec) -> np.ndarray:
    """Stamp a trigger onto an input.

    The carrier x may be any real-valued array of the trigger's shape (the
    closed-form model analyses use unbounded feature vectors); for inputs in
    [0, 1] the output is guaranteed to stay in [0, 1].
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != trigger.mask.shape:
        raise ShapeMismatchError(
            f"input shape {arr.shape} != trigger shape {trigger.mask.shape}"
        )
    bm = trigger.blend * trigger.mask
    return (1.0 - bm) * arr + bm * trigger.pattern


class HardLabelOracle(abc.ABC):
    """The sole channel to a model under test: classify-only, query-counted.

    classify() is deterministic for a fixed oracle state and increments the
    query counter by exactly one; classify_batch() counts one query per
    element. The budget check-and-increment is a single atomic operation, so
    concurrent workers can share one oracle without over-admission.
    """

    def __init__(self, num_labels: int, input_shape, query_budget: Optional[int] = None):
        if num_labels < 1:
            raise ValueError("num_labels must be >= 1")
        if query_budget is not None and query_budget < 1:
            raise ValueError("query_budget, when set, must be >= 1")
        self._num_labels = int(num_labels)
        self._input_shape = tuple(int(v) for v in input_shape)
        self._query_budget = query_budget
        self._queries_used = 0
        self._lock = threading.Lock()

    @property
    def num_labels(self) -> int:
        return self._num_labels

    @property
    def input_shape(self) -> tuple:
        return self._input_shape

    @property
    def query_budget(self) -> Optional[int]:
        return self._query_budget

    @property
    def queries_used(self) -> int:
        return self._queries_used

    def _charge(self, n: int) -> None:
        with self._lock:
            if (
                self._query_budget is not None
                and self._queries_used + n > self._query_budget
            ):
                raise QueryBudgetExceededError(
                    f"budget {self._query_budget} exhausted "
                    f"({self._queries_used} used, {n} requested)"
                )
            self._queries_used += n

    def classify(self, x) -> int:
        """Label a single (H, W, C) input; one query."""
        return int(self.classify_batch(np.asarray(x, dtype=np.float64)[None])[0])

    def classify_batch(self, xs) -> np.ndarray:
        """Label a (n, H, W, C) batch; n queries, charged atomically up front.

        The counter is monotone: an attempted query stays counted even if the
        underlying prediction fails, so budgets are conservative.
        """
        arr = np.ascontiguousarray(xs, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[1:] != self._input_shape:
            raise ShapeMismatchError(
                f"batch shape {arr.shape} does not match (n, {self._input_shape})"
            )
        n = arr.shape[0]
        self._charge(n)
        return np.asarray(self._predict(arr), dtype=np.int64)

    @abc.abstractmethod
    def _predict(self, xs: np.ndarray) -> np.ndarray:
        """Map a validated (n, H, W, C) batch to n label indices."""


class CallableOracle(HardLabelOracle):
    """Wraps a plain batch-labelling function as a HardLabelOracle."""

    def __init__(
        self,
        fn: Callable[[np.ndarray], np.ndarray],
        num_labels: int,
        input_shape,
        query_budget: Optional[int] = None,
    ):
        super().__init__(num_labels, input_shape, query_budget)
        self._fn = fn

    def _predict(self, xs):
        return self._fn(xs)


class ScopedBudgetOracle(HardLabelOracle):
    """A budget-capped view of another oracle.

    Queries pass through to (and are counted by) the parent; this view
    additionally enforces its own cap and keeps a local ledger, which is what
    per-pair campaign budgets are made of.
    """

    def __init__(self, parent: HardLabelOracle, query_budget: int):
        super().__init__(parent.num_labels, parent.input_shape, query_budget)
        self._parent = parent

    def _predict(self, xs):
        return self._parent.classify_batch(xs)


def with_budget(oracle: HardLabelOracle, query_budget: Optional[int]) -> HardLabelOracle:
    """Return a budget-capped view of an oracle (or the oracle itself if no cap)."""
    if query_budget is None:
        return oracle
    return ScopedBudgetOracle(oracle, query_budget)


@dataclass
class SampleBank:
    """Per-class pools of oracle-agreeing samples."""

    per_class: dict
    batch_size: int
    rejected: dict = field(default_factory=dict)

    @property
    def classes(self) -> list:
        return sorted(self.per_class)

    def samples(self, label: int) -> np.ndarray:
        return self.per_class[label]

    def __contains__(self, label: int) -> bool:
        return label in self.per_class


def build_sample_bank(
    oracle: HardLabelOracle,
    candidates: Mapping[int, Sequence],
    batch_size: int,
) -> SampleBank:
    """Filter candidate samples by oracle agreement and pool them per class.

    Only samples the oracle itself labels as their candidate class are kept
    (ground-truth labels are unverifiable under hard-label access); scanning
    stops per class once batch_size agreeing samples are found, to save
    queries. A class with zero agreeing samples aborts construction.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    per_class = {}
    rejected = {}
    empty = []
    for label in sorted(candidates):
        pool = candidates[label]
        if len(pool) == 0:
            raise BankConstructionError(f"class {label}: no candidate samples supplied")
        kept = []
        dropped = 0
        for start in range(0, len(pool), batch_size):
            chunk = np.stack(
                [validate_input(s, oracle.input_shape) for s in pool[start : start + batch_size]]
            )
            labels = oracle.classify_batch(chunk)
            for sample, got in zip(chunk, labels):
                if got == label:
                    kept.append(sample)
                    if len(kept) == batch_size:
                        break
                else:
                    dropped += 1
            if len(kept) == batch_size:
                break
        if not kept:
            empty.append(label)
            continue
        per_class[label] = np.stack(kept)
        rejected[label] = dropped
    if empty:
        raise BankConstructionError(
            "no oracle-agreeing samples for class(es): " + ", ".join(map(str, empty))
        )
    return SampleBank(per_class=per_class, batch_size=batch_size, rejected=rejected)
