"""Hard-label optimization core.

Reconstructs a minimal perturbation that flips an input to a chosen target
label using only classify() answers: bisect to the decision boundary, estimate
the boundary normal from Monte Carlo probes, take a feasibility-preserving
step, and shrink the perturbation with an L1 proximal map each iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .core import (
    GapScanError,
    HardLabelOracle,
    QueryBudgetExceededError,
    validate_input,
)


class ProjectionError(GapScanError, RuntimeError):
    """Boundary projection preconditions failed (names the bad endpoint)."""


class DegenerateEstimateError(GapScanError, RuntimeError):
    """All Monte Carlo probes landed on one side; the estimate is zero."""


class OptimizationError(GapScanError, RuntimeError):
    """No adversarial point could be established for the requested target."""


@dataclass(frozen=True)
class EstimatorConfig:
    """Knobs for gradient estimation and the perturbation walk.

    delta is the probe radius, num_probes the Monte Carlo sample count per
    estimate, projection_tolerance the bisection stop width on the blend
    coefficient, lam the L1 weight (None picks 0.01/n for n input elements).
    """

    delta: float = 0.01
    num_probes: int = 200
    projection_tolerance: float = 1e-3
    step_init: float = 1.0
    max_iters: int = 15
    lam: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be > 0")
        if self.num_probes < 2:
            raise ValueError("num_probes must be >= 2")
        if not 0.0 < self.projection_tolerance < 0.5:
            raise ValueError("projection_tolerance must be in (0, 0.5)")
        if self.step_init <= 0:
            raise ValueError("step_init must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lam must be >= 0")

    def resolve_lam(self, n_elements: int) -> float:
        return self.lam if self.lam is not None else 0.01 / n_elements


@dataclass(frozen=True)
class AdversarialMap:
    """Result of one perturbation synthesis run.

    mu is x_final - x0 (same shape as inputs); l1_trace records ||mu||_1 after
    each accepted iteration and the final tightening pass.
    """

    mu: np.ndarray
    source_label: int
    target_label: int
    queries_spent: int
    converged: bool
    l1_trace: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.mu).all():
            raise ValueError("mu must be finite")


def projection_calls(tol: float) -> int:
    """Oracle calls one bisection consumes (excluding endpoint verification)."""
    return int(math.ceil(math.log2(1.0 / tol)))


def boundary_project(
    x,
    x_t,
    y_t: int,
    oracle: HardLabelOracle,
    tol: float,
    verify_endpoints: bool = True,
):
    """Bisect along the segment from x (label != y_t) to x_t (label == y_t).

    Returns (x', alpha) with oracle(x') == y_t, where x' = (1-alpha) x +
    alpha x_t and the blend one tol-step closer to x is still not y_t. Uses
    exactly ceil(log2(1/tol)) classify calls, plus two endpoint checks when
    verify_endpoints is set.
    """
    x = validate_input(x, oracle.input_shape, "x")
    x_t = validate_input(x_t, oracle.input_shape, "x_t")
    if verify_endpoints:
        if oracle.classify(x) == y_t:
            raise ProjectionError("start point x is already classified as the target label")
        if oracle.classify(x_t) != y_t:
            raise ProjectionError("anchor x_t is not classified as the target label")
    lo, hi = 0.0, 1.0
    for _ in range(projection_calls(tol)):
        mid = 0.5 * (lo + hi)
        if oracle.classify((1.0 - mid) * x + mid * x_t) == y_t:
            hi = mid
        else:
            lo = mid
    return (1.0 - hi) * x + hi * x_t, hi


def estimate_gradient(
    x,
    y_t: int,
    oracle: HardLabelOracle,
    cfg: EstimatorConfig,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Monte Carlo estimate of the boundary normal at x, unit L1 norm.

    Probes x + delta * u_i for num_probes directions u_i drawn uniformly on
    the L2 sphere (probe points are clipped into [0,1]); scores each probe
    S_i = +1 if the oracle answers y_t else -1; averages (S_i - mean S) u_i to
    cancel the common-mode term; L1-normalizes the result.
    """
    x = validate_input(x, oracle.input_shape, "x")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    flat = x.reshape(-1)
    n = flat.size
    u = rng.standard_normal((cfg.num_probes, n))
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    u /= norms
    points = np.clip(flat[None, :] + cfg.delta * u, 0.0, 1.0)
    labels = oracle.classify_batch(points.reshape((cfg.num_probes,) + oracle.input_shape))
    s = np.where(labels == y_t, 1.0, -1.0)
    if np.all(s == s[0]):
        side = "target" if s[0] > 0 else "non-target"
        raise DegenerateEstimateError(
            f"all {cfg.num_probes} probes answered the {side} side at delta={cfg.delta}"
        )
    g = np.mean((s - s.mean())[:, None] * u, axis=0)
    g /= np.abs(g).sum()
    return g.reshape(oracle.input_shape)


def _soft_threshold(v: np.ndarray, t: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def _estimate_with_retry(x_b, y_t, oracle, cfg, iteration, gradient_fn):
    """One gradient estimate; a degenerate estimate gets one delta-doubling
    retry. Returns None when both attempts are degenerate."""
    if gradient_fn is not None:
        g = np.asarray(gradient_fn(x_b, y_t), dtype=np.float64)
        total = np.abs(g).sum()
        if total == 0.0 or not np.isfinite(total):
            return None
        return g / total
    for attempt, c in enumerate((cfg, replace(cfg, delta=2.0 * cfg.delta))):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, iteration, attempt]))
        try:
            return estimate_gradient(x_b, y_t, oracle, c, rng=rng)
        except DegenerateEstimateError:
            continue
    return None


def optimize_perturbation(
    x0,
    x_t,
    y_t: int,
    oracle: HardLabelOracle,
    cfg: EstimatorConfig,
    gradient_fn: Optional[Callable] = None,
) -> AdversarialMap:
    """Synthesize the smallest-found perturbation sending x0 to label y_t.

    Per iteration: project the current adversarial point to the boundary,
    estimate the gradient there, step along it with a geometric step-size
    search (halving until the stepped-and-shrunk point keeps the target
    label, at most 12 halvings), soft-threshold the perturbation by lam *
    step, clip to [0,1]. A final projection tightens the result. converged
    reports whether the walk ran to its stopping rule (step underflow or
    max_iters); a mid-run budget exhaustion returns the partial map with
    converged False.

    gradient_fn (x, y_t) -> gradient overrides the Monte Carlo estimator for
    white-box validation runs; it costs no queries.
    """
    x0 = validate_input(x0, oracle.input_shape, "x0")
    x_t = validate_input(x_t, oracle.input_shape, "x_t")
    lam = cfg.resolve_lam(x0.size)
    start = oracle.queries_used

    source_label = oracle.classify(x0)
    if source_label == y_t:
        return AdversarialMap(
            mu=np.zeros_like(x0),
            source_label=int(source_label),
            target_label=int(y_t),
            queries_spent=oracle.queries_used - start,
            converged=True,
            l1_trace=np.zeros(0),
        )
    if oracle.classify(x_t) != y_t:
        raise OptimizationError(
            f"anchor point is labelled {oracle.classify(x_t)}, not target {y_t}"
        )

    x_adv = x_t
    converged = False
    trace = []
    try:
        for iteration in range(1, cfg.max_iters + 1):
            x_b, _ = boundary_project(
                x0, x_adv, y_t, oracle, cfg.projection_tolerance, verify_endpoints=False
            )
            g = _estimate_with_retry(x_b, y_t, oracle, cfg, iteration, gradient_fn)
            if g is None:
                break  # estimator blind here; keep the best feasible point
            # step along the unit-L2 direction: the inward push must outrun
            # the L1 shrink (lam * step per coordinate), which a unit-L1
            # direction cannot do at any step size once n is large
            direction = g / np.linalg.norm(g.reshape(-1))
            dist = float(np.linalg.norm((x_b - x0).reshape(-1)))
            step = cfg.step_init * dist / math.sqrt(iteration)
            accepted = None
            for _ in range(13):  # initial step plus 12 halvings
                mu_c = _soft_threshold((x_b + step * direction) - x0, lam * step)
                cand = np.clip(x0 + mu_c, 0.0, 1.0)
                if oracle.classify(cand) == y_t:
                    accepted = cand
                    break
                step *= 0.5
            if accepted is None:
                converged = True  # step size underflow
                break
            x_adv = accepted
            trace.append(float(np.abs(x_adv - x0).sum()))
        else:
            converged = True  # full iteration schedule completed
        x_adv, _ = boundary_project(
            x0, x_adv, y_t, oracle, cfg.projection_tolerance, verify_endpoints=False
        )
        trace.append(float(np.abs(x_adv - x0).sum()))
    except QueryBudgetExceededError:
        converged = False

    return AdversarialMap(
        mu=x_adv - x0,
        source_label=int(source_label),
        target_label=int(y_t),
        queries_spent=oracle.queries_used - start,
        converged=converged,
        l1_trace=np.asarray(trace),
    )
