import json
from pathlib import Path

import pytest

from lanesim.roadnet import parse_network

SCENARIOS = Path(__file__).resolve().parents[1] / "src" / "lanesim" / "scenarios"

# three approach lanes: a turns left only, b turns left or goes straight, c goes straight only
FORK = {
    "sections": [
        {"id": "approach", "entrance": True},
        {"id": "left_out", "free_flow_time_s": 30},
        {"id": "straight_out", "free_flow_time_s": 30},
    ],
    "lanes": [
        {"id": "c", "section": "approach", "length_m": 500, "left": "b", "successors": ["straight_out"]},
        {"id": "b", "section": "approach", "length_m": 500, "left": "a", "right": "c",
         "successors": ["left_out", "straight_out"]},
        {"id": "a", "section": "approach", "length_m": 500, "right": "b", "successors": ["left_out"]},
    ],
}


@pytest.fixture
def fork():
    return parse_network(json.dumps(FORK))


def scenario_path(name: str) -> Path:
    return SCENARIOS / f"{name}.json"


# criterion number -> (passed, detail); filled by test_acceptance, printed at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
