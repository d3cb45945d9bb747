"""The single command-line entry point: serve a BridgeSpec file."""

import json
import subprocess
import sys
import time

import pytest

from wirebridge.cli import main

from conftest import HttpClient

LOADER_FILE = """\
import numpy as np

def load(k):
    def predict(batch):
        flat = batch.reshape(len(batch), -1)
        return np.argmax(flat[:, :k], axis=1)
    return predict

def load_scores(k):
    def predict(batch):
        return batch.reshape(len(batch), -1)[:, :k]
    return predict
"""


def write_spec(tmp_path, **extra):
    loader_py = tmp_path / "loader.py"
    loader_py.write_text(LOADER_FILE)
    doc = {
        "loader": f"{loader_py}:load",
        "loader_args": {"k": 3},
        "input_shape": [2, 2, 1],
        "num_labels": 3,
        "port": 0,
        **extra,
    }
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(doc))
    return path


def test_cli_serves_spec_file(tmp_path):
    spec_path = write_spec(tmp_path)
    proc = subprocess.Popen(
        [sys.executable, "-m", "wirebridge.cli", str(spec_path)],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        text=True,
    )
    try:
        line = proc.stdout.readline()
        endpoint = next(tok for tok in line.split() if tok.startswith("http://"))
        deadline = time.time() + 10
        while True:
            try:
                status, meta = HttpClient(endpoint).get("/meta")
                break
            except OSError:
                assert time.time() < deadline, "bridge never came up"
                time.sleep(0.05)
        assert status == 200
        assert meta["shape"] == [2, 2, 1] and meta["num_labels"] == 3
        status, payload = HttpClient(endpoint).post(
            "/classify", {"shape": [2, 2, 1], "data": [0.2, 0.9, 0.1, 0.0]}
        )
        assert (status, payload) == (200, {"label": 1})
    finally:
        proc.terminate()
        proc.wait(timeout=10)


def test_cli_rejects_bad_spec(tmp_path, capsys):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps({"loader": "x:y"}))
    assert main([str(path)]) == 1
    assert "missing required keys" in capsys.readouterr().err


def test_cli_rejects_broken_loader(tmp_path, capsys):
    spec_path = write_spec(tmp_path)
    doc = json.loads(spec_path.read_text())
    doc["loader"] = str(tmp_path / "loader.py") + ":absent"
    spec_path.write_text(json.dumps(doc))
    assert main([str(spec_path)]) == 1
    assert "no attribute" in capsys.readouterr().err


def test_cli_rejects_lying_spec(tmp_path, capsys):
    # model emits 3 scores but the spec declares 2 labels -> dry run fails at startup
    spec_path = write_spec(tmp_path, num_labels=2)
    doc = json.loads(spec_path.read_text())
    doc["loader"] = str(tmp_path / "loader.py") + ":load_scores"
    doc["loader_args"] = {"k": 3}
    spec_path.write_text(json.dumps(doc))
    rc = main([str(spec_path)])
    err = capsys.readouterr().err
    assert rc == 1 and "matches neither" in err


def test_missing_spec_file(capsys):
    assert main(["/nonexistent/spec.json"]) == 1
    assert "cannot read" in capsys.readouterr().err
