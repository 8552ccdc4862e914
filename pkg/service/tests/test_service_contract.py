"""Replay the recorded contract fixture against a fresh app instance.

The fixture pins the exact wire behavior: stub determinism, unit-norm
vectors, id mirroring, and mixed-batch error isolation. Regenerate with
``python3 -m tests.fixtures.generate_contract`` from the service root.
"""

import json
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient

from capembed import ServiceConfig, create_app

CONTRACT_PATH = Path(__file__).resolve().parent / "fixtures" / "contract.json"


def load_contract() -> dict:
    return json.loads(CONTRACT_PATH.read_text())


@pytest.fixture(scope="module")
def contract() -> dict:
    return load_contract()


@pytest.fixture(scope="module")
def recorded_client(contract) -> TestClient:
    return TestClient(create_app(ServiceConfig(**contract["config"])))


def exchanges(name: str) -> list[dict]:
    return [ex for ex in load_contract()["exchanges"] if ex["name"] == name]


def replay(client: TestClient, exchange: dict):
    if exchange["method"] == "GET":
        return client.get(exchange["path"])
    return client.post(exchange["path"], json=exchange["body"])


@pytest.mark.parametrize("name", [ex["name"] for ex in load_contract()["exchanges"]])
def test_replay_matches_recording(recorded_client, contract, name):
    (exchange,) = [ex for ex in contract["exchanges"] if ex["name"] == name]
    response = replay(recorded_client, exchange)
    assert response.status_code == exchange["status"]
    assert response.json() == exchange["response"]


def test_recorded_determinism(contract):
    (first,) = exchanges("embed-plain")
    (repeat,) = exchanges("embed-plain-repeat")
    assert first["body"] == repeat["body"]
    assert first["response"] == repeat["response"]


def test_recorded_vectors_unit_norm(contract):
    dim = contract["config"]["dim"]
    checked = 0
    for exchange in contract["exchanges"]:
        if exchange["path"] != "/v1/embed":
            continue
        for item in exchange["response"]["items"]:
            if "vector" not in item:
                continue
            assert item["dim"] == dim and len(item["vector"]) == dim
            assert np.linalg.norm(item["vector"]) == pytest.approx(1.0, abs=1e-6)
            checked += 1
    assert checked >= 6


def test_recorded_id_mirroring(contract):
    for exchange in contract["exchanges"]:
        if exchange["method"] != "POST":
            continue
        sent = [item["id"] for item in exchange["body"]["items"]]
        got = [item["id"] for item in exchange["response"]["items"]]
        assert got == sent


def test_recorded_mixed_batch_isolation(contract):
    (mixed,) = exchanges("embed-mixed")
    assert mixed["status"] == 200
    by_id = {item["id"]: item for item in mixed["response"]["items"]}
    assert "vector" in by_id["ok-text"] and "vector" in by_id["ok-img"]
    assert by_id["bad-b64"]["error"] and "vector" not in by_id["bad-b64"]
    assert by_id["not-img"]["error"] and "vector" not in by_id["not-img"]
