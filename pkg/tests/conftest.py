import json
from pathlib import Path

import pytest

from phasorflow import (
    build_scenario_network,
    load_feeder,
    load_scenario,
    run_sequential_switching,
    run_switch_scenario,
)

DATA = Path(__file__).resolve().parent.parent / "src" / "phasorflow" / "data"


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA


@pytest.fixture(scope="session")
def ieee13():
    return load_feeder(DATA / "ieee13.json")


@pytest.fixture(scope="session")
def ieee37():
    return load_feeder(DATA / "ieee37.json")


@pytest.fixture(scope="session")
def spec13() -> dict:
    return load_scenario(DATA / "ieee13_dual.json")


@pytest.fixture(scope="session")
def spec37() -> dict:
    return load_scenario(DATA / "ieee37_dual.json")


@pytest.fixture(scope="session")
def dual13(spec13):
    return build_scenario_network(spec13)


@pytest.fixture(scope="session")
def dual37(spec37):
    return build_scenario_network(spec37)


# Scenario evaluations are the expensive shared artifacts; solve them once.
@pytest.fixture(scope="session")
def report13(spec13):
    return run_switch_scenario(spec13)


@pytest.fixture(scope="session")
def reports37(spec37):
    return run_sequential_switching(spec37)


@pytest.fixture()
def raw13_doc() -> dict:
    with open(DATA / "ieee13_raw.json") as handle:
        return json.load(handle)
