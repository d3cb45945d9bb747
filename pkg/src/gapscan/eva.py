"""Extreme-value analytics over adversarial maps, and the verdict.

Per target label, every source class contributes the maximum "adversarial
peak" (top-k mass of the normalized absolute perturbation map) over its bank
samples; the sum across source classes is the label's global score R. Labels
whose R is a strong median-deviation outlier are flagged as backdoored.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .blackbox import AdversarialMap, EstimatorConfig, optimize_perturbation
from .core import (
    GapScanError,
    HardLabelOracle,
    QueryBudgetExceededError,
    SampleBank,
    ScopedBudgetOracle,
)

# Gaussian consistency constant: median absolute deviation * 1.4826
# estimates the standard deviation for normal data.
CONSISTENCY_CONSTANT = 1.4826

SCHEMA_VERSION = 1

# MAD over fewer than this many label scores is flagged low-confidence.
LOW_CONFIDENCE_SCORES = 8

_CHANNEL_REDUCERS = ("abs_sum", "max_abs")


class NormalizationError(GapScanError, ValueError):
    """The perturbation map has zero mass and cannot be normalized."""


class StatisticsError(GapScanError, ValueError):
    """Too few (or non-finite) scores for the outlier statistics."""


class CampaignConfigError(GapScanError, ValueError):
    """The sample bank cannot support the requested scan."""


@dataclass(frozen=True)
class PeakConfig:
    """How a perturbation map is collapsed to a single peak statistic.

    top_k = 1 is the plain peak; top_k = 5 is the multi-trigger mode (the sum
    saturates when mass concentrates on up to five sites). channel_reduce
    collapses channels to one value per spatial site before normalization.
    """

    top_k: int = 1
    channel_reduce: str = "abs_sum"

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.channel_reduce not in _CHANNEL_REDUCERS:
            raise ValueError(f"channel_reduce must be one of {_CHANNEL_REDUCERS}")


def _mu_of(map_or_array) -> np.ndarray:
    mu = getattr(map_or_array, "mu", map_or_array)
    return np.asarray(mu, dtype=np.float64)


def normalize_map(amap) -> np.ndarray:
    """|mu| / ||mu||_1, same shape as mu; entries are nonnegative and sum to 1."""
    mu = _mu_of(amap)
    total = np.abs(mu).sum()
    if total == 0.0:
        raise NormalizationError("perturbation map has zero L1 mass")
    if not np.isfinite(total):
        raise NormalizationError("perturbation map has non-finite entries")
    return np.abs(mu) / total


def reduce_channels(mu: np.ndarray, rule: str = "abs_sum") -> np.ndarray:
    """Collapse (H, W, C) to a spatial (H, W) magnitude map."""
    mu = np.asarray(mu, dtype=np.float64)
    if rule == "abs_sum":
        return np.abs(mu).sum(axis=2)
    if rule == "max_abs":
        return np.abs(mu).max(axis=2)
    raise ValueError(f"channel_reduce must be one of {_CHANNEL_REDUCERS}")


def spatial_map(amap, cfg: Optional[PeakConfig] = None) -> np.ndarray:
    """Channel-reduced, normalized (H, W) map; entries sum to 1."""
    cfg = cfg if cfg is not None else PeakConfig()
    reduced = reduce_channels(_mu_of(amap), cfg.channel_reduce)
    total = reduced.sum()
    if total == 0.0:
        raise NormalizationError("perturbation map has zero L1 mass")
    if not np.isfinite(total):
        raise NormalizationError("perturbation map has non-finite entries")
    return reduced / total


def adversarial_peak(amap, cfg: Optional[PeakConfig] = None) -> float:
    """Sum of the top_k largest entries of the normalized spatial map."""
    cfg = cfg if cfg is not None else PeakConfig()
    flat = spatial_map(amap, cfg).reshape(-1)
    if cfg.top_k >= flat.size:
        return float(flat.sum())
    idx = np.argpartition(flat, -cfg.top_k)[-cfg.top_k :]
    return float(flat[idx].sum())


def amplified_tail(p: float, k: int) -> float:
    """P(max of k i.i.d. peaks < T) given P(single peak < T) = p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return float(p) ** int(k)


def mad_anomaly_indices(scores) -> np.ndarray:
    """|score - median| / (1.4826 * median absolute deviation), per score.

    A zero MAD falls back to the mean absolute deviation; if that is also
    zero every index is 0 (identical scores carry no outlier evidence).
    """
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 3:
        raise StatisticsError(f"need >= 3 scores in a flat list, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise StatisticsError("scores must be finite")
    dev = np.abs(arr - np.median(arr))
    scale = CONSISTENCY_CONSTANT * np.median(dev)
    if scale == 0.0:
        scale = CONSISTENCY_CONSTANT * dev.mean()
        if scale == 0.0:
            return np.zeros_like(arr)
    return dev / scale


@dataclass
class LabelScore:
    """Audit record for one target label's campaign.

    class_peaks maps each source class to its maximum per-sample peak;
    best_maps holds the normalized spatial map of each class's peak sample.
    partial is set when any run was truncated (budget or a stalled walk).
    """

    label: int
    score: float
    class_peaks: dict
    sample_peaks: dict
    best_maps: dict
    queries_spent: int
    partial: bool


def gap_for_label(
    y_t: int,
    bank: SampleBank,
    oracle: HardLabelOracle,
    est_cfg: EstimatorConfig,
    peak_cfg: Optional[PeakConfig] = None,
    pair_budget: Optional[int] = None,
) -> LabelScore:
    """R(y_t): sum over source classes of the class's maximum adversarial peak.

    Every bank sample of every non-target class is driven toward y_t; the
    anchor is the nearest (L2) bank sample of class y_t. Each (label, class)
    pair runs under its own query budget when pair_budget is set. Per-run
    seeds derive from (est_cfg.seed, y_t, class, sample index), so results do
    not depend on scheduling order.
    """
    if y_t not in bank:
        raise CampaignConfigError(f"bank has no samples for target label {y_t}")
    sources = [c for c in bank.classes if c != y_t]
    if not sources:
        raise CampaignConfigError("bank needs at least one class besides the target")
    peak_cfg = peak_cfg if peak_cfg is not None else PeakConfig()
    anchors = bank.samples(y_t)
    anchor_flat = anchors.reshape(len(anchors), -1)

    class_peaks, sample_peaks, best_maps = {}, {}, {}
    queries = 0
    partial = False
    for src in sources:
        view = ScopedBudgetOracle(oracle, pair_budget)
        peaks = []
        best_peak, best_map = -np.inf, None
        for idx, x0 in enumerate(bank.samples(src)):
            run_seed = int(
                np.random.SeedSequence([est_cfg.seed, y_t, src, idx]).generate_state(1)[0]
            )
            nearest = int(np.argmin(((anchor_flat - x0.reshape(-1)) ** 2).sum(axis=1)))
            try:
                amap = optimize_perturbation(
                    x0, anchors[nearest], y_t, view, replace(est_cfg, seed=run_seed)
                )
            except QueryBudgetExceededError:
                partial = True
                break
            if not amap.converged:
                partial = True
            if np.abs(amap.mu).sum() == 0.0:
                continue  # sample already sits in the target region
            peak = adversarial_peak(amap, peak_cfg)
            peaks.append(peak)
            if peak > best_peak:
                best_peak, best_map = peak, spatial_map(amap, peak_cfg)
        queries += view.queries_used
        class_peaks[src] = max(peaks) if peaks else 0.0
        sample_peaks[src] = peaks
        best_maps[src] = best_map
    return LabelScore(
        label=int(y_t),
        score=float(sum(class_peaks.values())),
        class_peaks=class_peaks,
        sample_peaks=sample_peaks,
        best_maps=best_maps,
        queries_spent=queries,
        partial=partial,
    )


def label_heatmap(result: LabelScore, mode: str = "aggregate") -> np.ndarray:
    """Spatial evidence map for one label, from its per-class peak samples.

    "aggregate" sums the per-class best maps and renormalizes; "best" returns
    the single map of the highest-peak class.
    """
    maps = {src: m for src, m in result.best_maps.items() if m is not None}
    if not maps:
        raise NormalizationError(f"label {result.label} produced no usable maps")
    if mode == "aggregate":
        agg = np.sum(list(maps.values()), axis=0)
        return agg / agg.sum()
    if mode == "best":
        src = max(maps, key=lambda s: result.class_peaks[s])
        return maps[src]
    raise ValueError('mode must be "aggregate" or "best"')


def export_heatmap_csv(map2d: np.ndarray, path) -> None:
    """One CSV per map: row = image row, channel-reduced normalized values."""
    np.savetxt(path, np.asarray(map2d, dtype=np.float64), delimiter=",", fmt="%.10e")


@dataclass
class GapReport:
    """Full scan verdict: per-label scores, anomaly indices, infected set."""

    per_label_scores: dict
    anomaly_indices: dict
    tau: float
    infected_labels: list
    low_confidence: bool
    queries_total: int
    label_results: dict
    metadata: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    @property
    def is_infected(self) -> bool:
        return bool(self.infected_labels)

    def to_dict(self) -> dict:
        """JSON-safe view (heatmaps are exported separately as CSV)."""
        labels = sorted(self.per_label_scores)
        return {
            "schema_version": self.schema_version,
            "tau": self.tau,
            "infected": self.is_infected,
            "infected_labels": [int(v) for v in self.infected_labels],
            "low_confidence": self.low_confidence,
            "queries_total": int(self.queries_total),
            "labels": {
                str(t): {
                    "score": self.per_label_scores[t],
                    "anomaly_index": self.anomaly_indices[t],
                    "queries": int(self.label_results[t].queries_spent),
                    "partial": bool(self.label_results[t].partial),
                    "class_peaks": {
                        str(s): v for s, v in sorted(self.label_results[t].class_peaks.items())
                    },
                    "sample_peaks": {
                        str(s): v for s, v in sorted(self.label_results[t].sample_peaks.items())
                    },
                }
                for t in labels
            },
            "metadata": self.metadata,
        }


def detect(
    oracle: HardLabelOracle,
    bank: SampleBank,
    est_cfg: EstimatorConfig,
    peak_cfg: Optional[PeakConfig] = None,
    tau: float = 4.0,
    pair_budget: Optional[int] = None,
    labels=None,
    workers: Optional[int] = None,
    metadata: Optional[dict] = None,
) -> GapReport:
    """Score every available label, run the outlier test, return the verdict.

    Labels default to the bank's classes (scanning a subset is allowed when
    only some labels have samples). Label campaigns run on a thread pool;
    per-label derived seeds keep the outcome independent of scheduling.
    """
    scan_labels = sorted(labels) if labels is not None else bank.classes
    missing = [t for t in scan_labels if t not in bank]
    if missing:
        raise CampaignConfigError(f"bank has no samples for label(s) {missing}")
    if len(scan_labels) < 3:
        raise StatisticsError(
            f"outlier detection needs >= 3 scanned labels, got {len(scan_labels)}"
        )
    peak_cfg = peak_cfg if peak_cfg is not None else PeakConfig()

    def run(t: int) -> LabelScore:
        try:
            return gap_for_label(t, bank, oracle, est_cfg, peak_cfg, pair_budget)
        except GapScanError as exc:
            raise type(exc)(f"label {t}: {exc}") from exc

    n_workers = workers if workers is not None else min(len(scan_labels), os.cpu_count() or 1)
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(run, scan_labels))
    else:
        results = [run(t) for t in scan_labels]

    scores = np.array([r.score for r in results])
    indices = mad_anomaly_indices(scores)
    infected = [t for t, ix in zip(scan_labels, indices) if ix > tau]
    return GapReport(
        per_label_scores={t: float(r.score) for t, r in zip(scan_labels, results)},
        anomaly_indices={t: float(ix) for t, ix in zip(scan_labels, indices)},
        tau=float(tau),
        infected_labels=infected,
        low_confidence=len(scan_labels) < LOW_CONFIDENCE_SCORES,
        queries_total=int(sum(r.queries_spent for r in results)),
        label_results={t: r for t, r in zip(scan_labels, results)},
        metadata=dict(metadata) if metadata else {},
    )


def noise_flip_counts(
    oracle: HardLabelOracle,
    samples,
    epsilon: float,
    trials: int,
    seed: int = 0,
) -> np.ndarray:
    """Per-sample count of trials whose label flips under uniform noise.

    Noise is i.i.d. uniform in [-epsilon, epsilon], added then clipped to
    [0, 1]. Returns an int array of length len(samples), each entry in
    [0, trials].
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    xs = np.ascontiguousarray(samples, dtype=np.float64)
    base = oracle.classify_batch(xs)
    rng = np.random.default_rng(seed)
    flips = np.zeros(len(xs), dtype=np.int64)
    for _ in range(trials):
        noisy = np.clip(xs + rng.uniform(-epsilon, epsilon, size=xs.shape), 0.0, 1.0)
        flips += oracle.classify_batch(noisy) != base
    return flips


def noise_sensitivity_probe(
    oracle: HardLabelOracle,
    samples,
    epsilon: float,
    trials: int,
    seed: int = 0,
) -> float:
    """Fraction of (sample, trial) pairs whose label flips under uniform noise.

    Dense watermark backdoors sit near everywhere-thin decision boundaries
    and flip far more often than patch backdoors or clean models.
    """
    counts = noise_flip_counts(oracle, samples, epsilon, trials, seed)
    return float(counts.sum()) / (trials * len(counts))
