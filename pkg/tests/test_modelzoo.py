"""Model zoo: gradients checked against finite differences first, then
training behavior, poisoning arithmetic, and the binary model format."""

import os
import subprocess
import sys

import numpy as np
import pytest

from gapscan.core import apply_trigger
from gapscan.modelzoo import (
    KernelModel,
    LocalOracle,
    MlpConfig,
    ModelIOError,
    TrainingError,
    load_model,
    make_backdoored_mlp,
    make_poisoned_dataset,
    one_hot,
    patch_trigger,
    save_model,
    synthetic_dataset,
    synthetic_prototypes,
    train_kernel_backdoored,
    train_linear_backdoored,
    train_mlp,
    train_mlp_backdoored,
    true_gradient,
    watermark_trigger,
)


def finite_difference_grad(score_fn, x, eps=1e-6):
    """Central finite differences of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        g[idx] = (score_fn(xp) - score_fn(xm)) / (2 * eps)
        it.iternext()
    return g


def tiny_dataset(shape=(2, 3, 1), k=3, n=40, seed=0, noise=0.08):
    xs, ys = synthetic_dataset(shape, k, n, seed=seed, noise=noise)
    return xs, one_hot(ys, k), ys


# ---------------------------------------------------------------------------
# Gradient oracles FIRST: finite differences pin every input_grad
# ---------------------------------------------------------------------------


def test_linear_gradient_matches_finite_differences():
    xs, ys1, _ = tiny_dataset()
    model = train_linear_backdoored(make_poisoned_dataset(xs, ys1, None, 0.0))
    x = xs[0]
    for target in range(3):
        want = finite_difference_grad(lambda z: model.scores(z)[0, target], x)
        got = true_gradient(model, x, target)
        assert np.allclose(got, want, atol=1e-6)


def test_kernel_gradient_matches_finite_differences():
    xs, ys1, _ = tiny_dataset()
    model = train_kernel_backdoored(make_poisoned_dataset(xs, ys1, None, 0.0), gamma=4.0)
    x = np.clip(xs[1] + 0.03, 0, 1)
    for target in range(3):
        want = finite_difference_grad(lambda z: model.predict_proba(z)[0, target], x)
        got = true_gradient(model, x, target)
        assert np.allclose(got, want, atol=1e-5)


def test_mlp_gradient_matches_finite_differences():
    xs, ys1, _ = tiny_dataset()
    model = train_mlp(xs, ys1, MlpConfig(hidden=(8, 4), epochs=30, seed=1))
    x = xs[2]
    for target in range(3):
        want = finite_difference_grad(lambda z: model.predict_proba(z)[0, target], x)
        got = true_gradient(model, x, target)
        assert np.allclose(got, want, atol=1e-5)


def test_kernel_outputs_are_probability_vectors():
    xs, ys1, _ = tiny_dataset()
    model = train_kernel_backdoored(make_poisoned_dataset(xs, ys1, None, 0.0), gamma=4.0)
    probs = model.predict_proba(xs)
    assert np.all(probs >= 0)
    assert np.allclose(probs.sum(axis=1), 1.0)


# ---------------------------------------------------------------------------
# Synthetic family
# ---------------------------------------------------------------------------


def test_prototypes_deterministic_and_separated():
    shape, k = (16, 16, 1), 6
    a = synthetic_prototypes(shape, k, seed=0)
    b = synthetic_prototypes(shape, k, seed=0)
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0
    dists = [
        np.linalg.norm((a[i] - a[j]).reshape(-1))
        for i in range(k)
        for j in range(i + 1, k)
    ]
    assert min(dists) > 2.0  # class margin dominates any small trigger


def test_dataset_sample_seed_varies_draws_not_distribution():
    shape, k = (8, 8, 1), 3
    xs_a, ys_a = synthetic_dataset(shape, k, 10, seed=5, sample_seed=1)
    xs_b, ys_b = synthetic_dataset(shape, k, 10, seed=5, sample_seed=2)
    assert np.array_equal(ys_a, ys_b)
    assert not np.array_equal(xs_a, xs_b)
    protos = synthetic_prototypes(shape, k, seed=5)
    for c in range(k):
        centered = xs_a[ys_a == c] - protos[c]
        assert np.abs(centered.mean()) < 0.05


# ---------------------------------------------------------------------------
# Trigger builders and poisoning arithmetic
# ---------------------------------------------------------------------------


def test_patch_trigger_geometry():
    trig = patch_trigger((8, 8, 1), 3, 2, origin=(1, 2))
    assert trig.mask.sum() == 9
    assert trig.mask[1:4, 2:5, 0].sum() == 9
    assert trig.target_label == 2 and trig.blend == 1.0


def test_watermark_trigger_dense():
    trig = watermark_trigger((8, 8, 1), 0, blend=0.1, seed=0)
    assert trig.mask.min() == 1.0  # full-image mask
    assert trig.blend == 0.1
    assert 0.0 <= trig.pattern.min() and trig.pattern.max() <= 1.0


@pytest.mark.parametrize(
    "n_clean,fraction,expected",
    [(200, 0.1, 22), (200, 0.5, 200), (90, 0.25, 30), (100, 0.0, 0)],
)
def test_poison_count_formula(n_clean, fraction, expected):
    # N_b = round(f * N_o / (1 - f))
    shape = (4, 4, 1)
    rng = np.random.default_rng(0)
    xs = rng.random((n_clean,) + shape)
    ys = one_hot(rng.integers(0, 3, n_clean), 3)
    trig = patch_trigger(shape, 2, 0)
    data = make_poisoned_dataset(xs, ys, trig, fraction, seed=0)
    assert len(data.poisoned_inputs) == expected


def test_poisoned_rows_are_stamped_clean_rows():
    shape = (4, 4, 1)
    rng = np.random.default_rng(1)
    xs = rng.random((50,) + shape)
    ys = one_hot(rng.integers(0, 3, 50), 3)
    trig = patch_trigger(shape, 2, 1)
    data = make_poisoned_dataset(xs, ys, trig, 0.2, seed=1)
    stamped_pool = {apply_trigger(x, trig).tobytes() for x in xs}
    for row, target in zip(data.poisoned_inputs, data.poisoned_targets):
        assert row.tobytes() in stamped_pool
        assert np.argmax(target) == 1 and target[1] == 1.0


def test_fraction_validation():
    shape = (4, 4, 1)
    xs = np.random.default_rng(0).random((10,) + shape)
    ys = one_hot(np.zeros(10, dtype=int), 2)
    trig = patch_trigger(shape, 2, 0)
    with pytest.raises(ValueError):
        make_poisoned_dataset(xs, ys, trig, 1.0)
    with pytest.raises(ValueError):
        make_poisoned_dataset(xs, ys, trig, -0.1)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def test_mlp_training_deterministic():
    xs, ys1, _ = tiny_dataset()
    cfg = MlpConfig(hidden=(8, 4), epochs=20, seed=9)
    a = train_mlp(xs, ys1, cfg)
    b = train_mlp(xs, ys1, cfg)
    for wa, wb in zip(a.params, b.params):
        assert np.array_equal(wa, wb)


def test_mlp_nonfinite_loss_raises_training_error():
    xs, ys1, _ = tiny_dataset()
    xs = xs.copy()
    xs[0, 0, 0, 0] = np.nan  # poison pill: loss goes non-finite on epoch one
    with pytest.raises(TrainingError):
        train_mlp(xs, ys1, MlpConfig(hidden=(8, 4), epochs=5, seed=0))


def test_backdoored_mlp_patch_asr_high():
    shape, k = (12, 12, 1), 4
    trig = patch_trigger(shape, 3, 0, origin=(1, 1))
    report, _ = make_backdoored_mlp(
        shape, k, trigger=trig, fraction=0.1, n_per_class=120, noise=0.05,
        seed=0, config=MlpConfig(epochs=60, seed=0),
    )
    assert report.clean_accuracy >= 0.95
    assert report.attack_success_rate >= 0.95


def test_clean_mlp_reports_no_asr():
    report, trigger = make_backdoored_mlp(
        (8, 8, 1), 3, trigger=None, n_per_class=60, noise=0.05,
        seed=1, config=MlpConfig(epochs=30, seed=1),
    )
    assert trigger is None
    assert report.attack_success_rate is None
    assert report.n_train_poisoned == 0


def test_asr_excludes_target_class_rows():
    # a constant-predicting dataset where every holdout row IS the target class
    shape, k = (4, 4, 1), 2
    xs, ys = synthetic_dataset(shape, k, 20, seed=0, noise=0.05)
    keep = ys == 1
    trig = patch_trigger(shape, 2, 1)
    data = make_poisoned_dataset(xs[keep], one_hot(ys[keep], k), trig, 0.2, seed=0)
    report = train_mlp_backdoored(data, MlpConfig(hidden=(8, 4), epochs=10, seed=0))
    assert report.attack_success_rate is None  # no non-target rows to stamp


def test_mlp_hidden_validation():
    with pytest.raises(ValueError):
        MlpConfig(hidden=(300, 2))
    with pytest.raises(ValueError):
        MlpConfig(hidden=(8,))


# ---------------------------------------------------------------------------
# Hard-label wrapping
# ---------------------------------------------------------------------------


def test_local_oracle_matches_model_argmax():
    xs, ys1, _ = tiny_dataset()
    model = train_linear_backdoored(make_poisoned_dataset(xs, ys1, None, 0.0))
    oracle = LocalOracle(model)
    want = model.predict_labels(xs)
    got = oracle.classify_batch(xs)
    assert np.array_equal(want, got)
    assert oracle.queries_used == len(xs)
    assert oracle.num_labels == 3 and oracle.input_shape == (2, 3, 1)


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["linear", "kernel", "mlp"])
def test_save_load_round_trip_bit_exact(tmp_path, kind):
    xs, ys1, _ = tiny_dataset()
    if kind == "linear":
        model = train_linear_backdoored(make_poisoned_dataset(xs, ys1, None, 0.0))
    elif kind == "kernel":
        model = train_kernel_backdoored(make_poisoned_dataset(xs, ys1, None, 0.0), gamma=3.0)
    else:
        model = train_mlp(xs, ys1, MlpConfig(hidden=(8, 4), epochs=10, seed=0))
    path = tmp_path / "m.bin"
    save_model(model, path)
    loaded = load_model(path)
    assert type(loaded) is type(model)
    probe = xs[:5]
    assert np.array_equal(model.predict_labels(probe), loaded.predict_labels(probe))
    save_model(loaded, tmp_path / "m2.bin")
    assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "m2.bin").read_bytes()


def test_load_model_rejects_bad_magic(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
    with pytest.raises(ModelIOError):
        load_model(p)


def test_load_model_rejects_truncation(tmp_path):
    xs, ys1, _ = tiny_dataset()
    model = train_linear_backdoored(make_poisoned_dataset(xs, ys1, None, 0.0))
    p = tmp_path / "m.bin"
    save_model(model, p)
    blob = p.read_bytes()
    p.write_bytes(blob[: len(blob) - 7])
    with pytest.raises(ModelIOError):
        load_model(p)


# ---------------------------------------------------------------------------
# Kernel-path parity: numba and pure-numpy fallback agree
# ---------------------------------------------------------------------------


def test_no_numba_fallback_agrees(tmp_path):
    xs, ys1, _ = tiny_dataset()
    model = train_mlp(xs, ys1, MlpConfig(hidden=(8, 4), epochs=15, seed=2))
    path = tmp_path / "m.bin"
    save_model(model, path)
    want = model.predict_labels(xs)
    np.save(tmp_path / "xs.npy", xs)
    script = (
        "import numpy as np; from gapscan.modelzoo import load_model; "
        f"m = load_model({str(path)!r}); xs = np.load({str(tmp_path / 'xs.npy')!r}); "
        "print(','.join(map(str, m.predict_labels(xs))))"
    )
    env = dict(os.environ, GAPSCAN_NO_NUMBA="1")
    out = subprocess.run(
        [sys.executable, "-c", script], env=env, capture_output=True, text=True, check=True
    )
    got = np.array([int(v) for v in out.stdout.strip().split(",")])
    assert np.array_equal(want, got)
