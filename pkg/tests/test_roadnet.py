import json

import pytest

from lanesim.roadnet import (
    LaneRelation,
    NetworkError,
    load_network,
    lane_relation,
    parse_network,
    remaining_distance,
)

from conftest import FORK, SCENARIOS


def test_left_lane_sees_shared_lane_as_symmetric(fork):
    assert lane_relation(fork, "a", "b") is LaneRelation.SYMMETRIC


def test_lanes_two_apart_are_not_adjacent(fork):
    assert lane_relation(fork, "a", "c") is LaneRelation.NOT_ADJACENT
    assert lane_relation(fork, "c", "a") is LaneRelation.NOT_ADJACENT


def test_shared_lane_sees_single_direction_neighbors_by_route(fork):
    # successor sets: a={left}, b={left, straight}, c={straight}
    assert lane_relation(fork, "b", "a", route_section="straight_out") is LaneRelation.ASYMMETRIC
    assert lane_relation(fork, "b", "a", route_section="left_out") is LaneRelation.SYMMETRIC
    assert lane_relation(fork, "b", "c", route_section="straight_out") is LaneRelation.SYMMETRIC
    # without a route, b loses reachable sections by moving to either side
    assert lane_relation(fork, "b", "a") is LaneRelation.ASYMMETRIC
    assert lane_relation(fork, "b", "c") is LaneRelation.ASYMMETRIC


def test_unknown_lane_is_a_lookup_error(fork):
    with pytest.raises(KeyError, match="nope"):
        lane_relation(fork, "a", "nope")


def test_lane_order_and_neighbors(fork):
    assert fork.sections["approach"].lanes == ("c", "b", "a")
    assert [fork.lane_index(l) for l in "cba"] == [0, 1, 2]
    assert fork.neighbors("b") == ["c", "a"]
    assert fork.compatible_lanes("approach", "straight_out") == ["c", "b"]
    assert sorted(fork.exits) == ["left_out", "straight_out"]


@pytest.mark.parametrize("pos, expected", [(500.0, 0.0), (300.0, 200.0), (500.01, 0.0), (0.0, 500.0)])
def test_remaining_distance(fork, pos, expected):
    assert remaining_distance(fork.lane("c"), pos) == pytest.approx(expected)


def test_decision_point_moves_the_stop_line():
    doc = json.loads(json.dumps(FORK))
    doc["lanes"][0]["decision_point_m"] = 400
    net = parse_network(json.dumps(doc))
    assert remaining_distance(net.lane("c"), 300.0) == pytest.approx(100.0)


def test_neighbor_relation_must_be_mutual():
    doc = json.loads(json.dumps(FORK))
    del doc["lanes"][1]["right"]
    with pytest.raises(NetworkError, match="point back"):
        parse_network(json.dumps(doc))


def test_unknown_successor_names_the_lane():
    doc = json.loads(json.dumps(FORK))
    doc["lanes"][0]["successors"] = ["nowhere"]
    with pytest.raises(NetworkError, match="'c'.*nowhere"):
        parse_network(json.dumps(doc))


def test_virtual_section_needs_free_flow_time():
    doc = json.loads(json.dumps(FORK))
    del doc["sections"][1]["free_flow_time_s"]
    with pytest.raises(NetworkError, match="left_out"):
        parse_network(json.dumps(doc))


def test_invalid_json_reports_position():
    with pytest.raises(NetworkError, match=r"<network>:1:"):
        parse_network("{not json")


def test_missing_file_is_reported(tmp_path):
    with pytest.raises((NetworkError, OSError)):
        load_network(tmp_path / "absent.json")


@pytest.mark.parametrize("name", ["highway-net", "urban-net", "sparse-net"])
def test_shipped_networks_parse(name):
    net = load_network(SCENARIOS / f"{name}.json")
    assert net.entrances
    assert net.total_length() > 0


def test_highway_lanes_are_all_symmetric():
    net = load_network(SCENARIOS / "highway-net.json")
    for lid in net.lanes:
        for nb in net.neighbors(lid):
            assert lane_relation(net, lid, nb) is LaneRelation.SYMMETRIC


def test_sparse_ramp_is_asymmetric_for_through_traffic():
    net = load_network(SCENARIOS / "sparse-net.json")
    assert lane_relation(net, "r0", "r1", route_section="main") is LaneRelation.ASYMMETRIC
    assert lane_relation(net, "r1", "r0", route_section="main") is LaneRelation.SYMMETRIC
