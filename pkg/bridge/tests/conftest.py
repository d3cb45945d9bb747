import json
import urllib.error
import urllib.request
from pathlib import Path

import pytest

DATA_DIR = Path(__file__).parent / "data"

with open(DATA_DIR / "wire_golden.json") as fh:
    GOLDEN = json.load(fh)


class HttpClient:
    """Tiny stdlib client returning (status, parsed_json) for any outcome."""

    def __init__(self, endpoint: str):
        self.endpoint = endpoint

    def request(self, method: str, path: str, body: bytes = None):
        req = urllib.request.Request(
            self.endpoint + path,
            data=body,
            method=method,
            headers={"Content-Type": "application/json"},
        )
        try:
            with urllib.request.urlopen(req, timeout=10) as resp:
                return resp.status, json.loads(resp.read())
        except urllib.error.HTTPError as exc:
            return exc.code, json.loads(exc.read())

    def get(self, path: str):
        return self.request("GET", path)

    def post(self, path: str, obj=None, raw: bytes = None):
        body = raw if raw is not None else json.dumps(obj).encode()
        return self.request("POST", path, body)


def replay_exchanges(endpoint: str, exchanges) -> None:
    """Assert a running server reproduces one golden session's exchanges."""
    http = HttpClient(endpoint)
    for i, ex in enumerate(exchanges):
        if ex["method"] == "GET":
            status, payload = http.get(ex["path"])
        elif "raw_body" in ex:
            status, payload = http.post(ex["path"], raw=ex["raw_body"].encode())
        else:
            status, payload = http.post(ex["path"], obj=ex["body"])
        expect = ex["expect"]
        assert status == expect["status"], f"exchange {i}: status {status}, body {payload}"
        if "json" in expect:
            assert payload == expect["json"], f"exchange {i}: body {payload}"
        if "code" in expect:
            assert payload["code"] == expect["code"], f"exchange {i}: {payload}"


@pytest.fixture()
def client():
    return HttpClient
