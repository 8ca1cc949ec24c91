import json
from dataclasses import replace

import pytest

from lanesim.scenario import ScenarioError, load_scenario, parse_scenario

from conftest import FORK, SCENARIOS, scenario_path


def doc(**over):
    d = {"network": FORK, "demand_vph": {"approach": 600}, "duration_s": 60}
    d.update(over)
    return d


def test_defaults_follow_style_ratio(tmp_path):
    sc = parse_scenario(doc(), tmp_path)
    assert sc.style_mix["aggressive"] == pytest.approx(1 / 8.4)
    assert sc.style_mix["aggressive"] / sc.style_mix["conservative"] == pytest.approx(1 / 7.4)
    assert sc.dt == 0.1 and sc.model == "mcdm"


@pytest.mark.parametrize("name", ["highway", "urban", "sparse"])
def test_shipped_scenarios_load(name):
    sc = load_scenario(scenario_path(name))
    assert sc.duration > 0 and sc.config_hash


def test_missing_network_file_names_path(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"network": "absent-net.json"}))
    with pytest.raises(ScenarioError, match="absent-net.json"):
        load_scenario(p)


@pytest.mark.parametrize("over, msg", [
    ({"style_mix": {"aggressive": 0.5, "conservative": 0.4}}, "sum to 1"),
    ({"dt_s": 0.6}, "dt"),
    ({"dt_s": 0.0}, "dt"),
    ({"model": "gipps"}, "unknown model"),
    ({"demand_vph": {"left_out": 100}}, "not an entrance"),
    ({"styles": {"aggressive": {"mu_speed": -1}}}, "non-negative"),
    ({"styles": {"aggressive": {"warp": 9}}}, "unknown fields"),
    ({"style_mix": {"ghost": 1.0}}, "unknown style"),
])
def test_config_errors(tmp_path, over, msg):
    with pytest.raises(ScenarioError, match=msg):
        parse_scenario(doc(**over), tmp_path)


def test_style_override_keeps_other_fields(tmp_path):
    sc = parse_scenario(doc(styles={"aggressive": {"g_threshold": 0.3}}), tmp_path)
    a = sc.styles["aggressive"]
    assert a.g_threshold == 0.3 and a.mu_route == 1.26


def test_seed_and_model_overrides():
    sc = load_scenario(scenario_path("highway"), seed=42, model="mobil")
    assert (sc.seed, sc.model) == (42, "mobil")


def test_scale_weights():
    sc = load_scenario(scenario_path("urban")).scale_weights(3.0)
    assert sc.styles["aggressive"].mu_route == pytest.approx(3 * 1.26)
