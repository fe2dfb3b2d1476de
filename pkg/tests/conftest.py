from __future__ import annotations

import json
from pathlib import Path

import pytest

from crashreplay.cli import fixtures_path
from crashreplay.gateway import MockGateway
from crashreplay.grammar import S2RScript
from crashreplay.rag import HashedTrigramProvider, load_corpus
from crashreplay.simulator import SimulatorDevice, load_spec

DATA_DIR = Path(__file__).parent / "data"


def data_path(name: str) -> Path:
    return DATA_DIR / name


def unstructured_example(number: int) -> str:
    return (DATA_DIR / "unstructured" / f"example{number}.txt").read_text(encoding="utf-8")


def scenario_dir(name: str) -> Path:
    return fixtures_path() / "scenarios" / name


def load_scenario(name: str):
    """(report text, gold script, device, replay mock gateway, scenario config)."""
    directory = scenario_dir(name)
    config = json.loads((directory / "scenario.json").read_text(encoding="utf-8"))
    report = (directory / config["report"]).read_text(encoding="utf-8")
    gold = S2RScript.from_dict(
        json.loads((directory / config["gold_script"]).read_text(encoding="utf-8"))
    )
    device = SimulatorDevice(load_spec(directory / config["app"]))
    gateway = MockGateway.from_script_file(directory / config["replay_mock"])
    return report, gold, device, gateway, config


@pytest.fixture
def provider():
    return HashedTrigramProvider()


@pytest.fixture
def mini_corpus():
    return load_corpus(fixtures_path() / "corpus_small.jsonl")


@pytest.fixture
def url_crash_device():
    return SimulatorDevice(load_spec(fixtures_path() / "apps" / "url_crash.json"))


@pytest.fixture
def hidden_about_device():
    return SimulatorDevice(load_spec(fixtures_path() / "apps" / "hidden_about.json"))


@pytest.fixture
def checkout_device():
    return SimulatorDevice(load_spec(fixtures_path() / "apps" / "checkout.json"))
