"""Shared fixtures: cheap closed-form oracles and small trained models."""

import numpy as np
import pytest

from gapscan.core import CallableOracle
from gapscan.modelzoo import (
    MlpConfig,
    make_backdoored_mlp,
    one_hot,
    patch_trigger,
    synthetic_dataset,
    train_linear_backdoored,
    make_poisoned_dataset,
)


def make_halfspace_oracle(w, b, input_shape, query_budget=None):
    """Label 1 iff w . x > b — the classic two-class analysis harness."""
    w = np.asarray(w, dtype=np.float64).reshape(-1)

    def fn(xs):
        flat = xs.reshape(xs.shape[0], -1)
        return (flat @ w > b).astype(np.int64)

    return CallableOracle(fn, 2, input_shape, query_budget)


@pytest.fixture(scope="session")
def halfspace64():
    """d=64 halfspace with a fixed random normal; returns (oracle, w, shape)."""
    shape = (8, 8, 1)
    rng = np.random.default_rng(42)
    w = rng.standard_normal(64)
    w /= np.linalg.norm(w)
    return make_halfspace_oracle(w, 0.1, shape), w, shape


@pytest.fixture(scope="session")
def small_linear_backdoored():
    """Instantly trained 8x8x1 3-class linear model with a 2x2 patch."""
    shape, k = (8, 8, 1), 3
    trig = patch_trigger(shape, 2, 0, origin=(1, 1))
    xs, ys = synthetic_dataset(shape, k, 80, seed=7, noise=0.05)
    data = make_poisoned_dataset(xs, one_hot(ys, k), trig, 0.1, seed=7)
    return train_linear_backdoored(data), trig


@pytest.fixture(scope="session")
def small_mlp_backdoored():
    """12x12x1 4-class backdoored MLP used by the wire/CLI tests."""
    shape, k = (12, 12, 1), 4
    trig = patch_trigger(shape, 2, 0, origin=(1, 1))
    report, _ = make_backdoored_mlp(
        shape, k, trigger=trig, fraction=0.1, n_per_class=120, noise=0.05,
        seed=3, config=MlpConfig(epochs=60, seed=3),
    )
    return report, trig
