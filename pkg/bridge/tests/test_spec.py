"""BridgeSpec parsing, loader resolution, and dry-run validation."""

import json

import numpy as np
import pytest

from wirebridge import BridgeSpec, SpecError, StartupError, load_predictor, load_spec

LOADER_MODULE = """\
import numpy as np

def scores(k=3):
    def predict(batch):
        flat = batch.reshape(len(batch), -1)
        return flat[:, :k]
    return predict

def labels(k=3):
    def predict(batch):
        flat = batch.reshape(len(batch), -1)
        return np.argmax(flat[:, :k], axis=1)
    return predict

def labels_float(k=3):
    def predict(batch):
        return np.zeros(len(batch))
    return predict

def crashes():
    raise RuntimeError("weights file corrupt")

def not_a_predictor():
    return 42
"""


@pytest.fixture()
def loader_py(tmp_path):
    path = tmp_path / "toy_loaders.py"
    path.write_text(LOADER_MODULE)
    return str(path)


def write_spec(tmp_path, **fields):
    doc = {
        "loader": "toy:load",
        "input_shape": [2, 2, 1],
        "num_labels": 3,
        **fields,
    }
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(doc))
    return path


def test_round_trip_minimal_spec(tmp_path):
    spec = load_spec(write_spec(tmp_path))
    assert spec == BridgeSpec(loader="toy:load", input_shape=(2, 2, 1), num_labels=3)
    assert spec.host == "127.0.0.1" and spec.query_budget is None


def test_all_fields_spec(tmp_path):
    spec = load_spec(write_spec(
        tmp_path, loader_args={"k": 4}, host="0.0.0.0", port=0, query_budget=10,
    ))
    assert spec.loader_args == {"k": 4}
    assert (spec.host, spec.port, spec.query_budget) == ("0.0.0.0", 0, 10)


@pytest.mark.parametrize("fields,fragment", [
    ({"extra": 1}, "unknown spec keys"),
    ({"loader": "no_colon"}, "module:attr"),
    ({"input_shape": [2, 2]}, "three positive ints"),
    ({"input_shape": [2, 2, 0]}, "three positive ints"),
    ({"num_labels": 1}, "num_labels"),
    ({"num_labels": "3"}, "num_labels"),
    ({"loader_args": [1]}, "loader_args"),
    ({"port": 70000}, "port"),
    ({"query_budget": 0}, "query_budget"),
    ({"query_budget": 1.5}, "query_budget"),
])
def test_spec_validation(tmp_path, fields, fragment):
    with pytest.raises(SpecError, match=fragment):
        load_spec(write_spec(tmp_path, **fields))


def test_missing_required_keys(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps({"loader": "toy:load"}))
    with pytest.raises(SpecError, match="missing required keys"):
        load_spec(path)


def test_not_json(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text("{nope")
    with pytest.raises(SpecError, match="not valid JSON"):
        load_spec(path)


def test_missing_file(tmp_path):
    with pytest.raises(SpecError, match="cannot read"):
        load_spec(tmp_path / "absent.json")


def test_score_predictor_is_argmaxed(loader_py):
    spec = BridgeSpec(loader=f"{loader_py}:scores", input_shape=(2, 2, 1), num_labels=3)
    fn = load_predictor(spec)
    batch = np.array([[0.1, 0.9, 0.3, 0.0], [0.7, 0.2, 0.1, 0.0]]).reshape(2, 2, 2, 1)
    assert fn(batch).tolist() == [1, 0]


def test_label_predictor_passthrough(loader_py):
    spec = BridgeSpec(loader=f"{loader_py}:labels", input_shape=(2, 2, 1), num_labels=3)
    fn = load_predictor(spec)
    batch = np.array([[0.1, 0.9, 0.3, 0.0]]).reshape(1, 2, 2, 1)
    assert fn(batch).tolist() == [1]


@pytest.mark.parametrize("attr,fragment", [
    ("crashes", "weights file corrupt"),
    ("not_a_predictor", "did not return a callable"),
    ("labels_float", "must return integers"),
    ("missing_attr", "no attribute"),
])
def test_loader_failures(loader_py, attr, fragment):
    spec = BridgeSpec(loader=f"{loader_py}:{attr}", input_shape=(2, 2, 1), num_labels=3)
    with pytest.raises(StartupError, match=fragment):
        load_predictor(spec)


def test_declared_labels_must_match_model(loader_py):
    # model yields 3 scores but the spec declares 5 labels -> dry run catches it
    spec = BridgeSpec(loader=f"{loader_py}:scores", input_shape=(2, 2, 1), num_labels=5)
    with pytest.raises(StartupError, match="matches neither"):
        load_predictor(spec)


def test_loader_file_must_exist(tmp_path):
    spec = BridgeSpec(
        loader=str(tmp_path / "gone.py") + ":load", input_shape=(2, 2, 1), num_labels=3
    )
    with pytest.raises(StartupError, match="does not exist"):
        load_predictor(spec)


def test_dotted_module_loader():
    # resolve something guaranteed to be importable; it fails later, not at import
    spec = BridgeSpec(loader="json:dumps", input_shape=(2, 2, 1), num_labels=3)
    with pytest.raises(StartupError):
        load_predictor(spec)  # json.dumps(zeros) is not a predictor
