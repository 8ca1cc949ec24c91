import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lanesim import calib
from lanesim.carfollow import IdmParams
from lanesim.decision import (
    Candidate,
    CostTable,
    DrivingStyle,
    IncompleteContextError,
    Row,
    build_cost_table,
    combine,
    decide,
    earning_yield,
    evaluate,
    expected_gain,
    style_presets,
    yields,
)
from lanesim.incentives import IncentiveContext, LaneStats, Neighbor, RelatedVehicle, prob_back
from lanesim.roadnet import LaneRelation

AGGRESSIVE = style_presets()["aggressive"]
MODEL = IdmParams(v0=16.7)
STATS = LaneStats(40.0, 12.0, 40.0 / 12.0, 25.0, 1080.0, 200.0, 5)


def two_lane(relation=LaneRelation.SYMMETRIC, new_follower=None, target_stats=STATS, **kw):
    """Ego at 10 m/s stuck behind a 6 m/s leader; the neighbor lane is open ahead."""
    base = dict(speed=10.0, model=MODEL, current_stats=STATS, target_stats=target_stats,
                relation=relation, remaining=400.0, downstream_current=60.0,
                downstream_target=60.0, current_leader=Neighbor(20.0, 6.0), target_leader=None,
                new_follower=new_follower)
    base.update(kw)
    return IncentiveContext(**base)


def table(p, speed=Row(0, 0, 0)):
    zero = Row(0.0, 0.0, 0.0)
    return CostTable(routing=Row(1.0, 1.0, 1.0), speed=speed, courtesy=zero, comfort=zero,
                     p_back=p, courtesy_gain=0.0, current_comfort=0.0)


# --- cost table ---

def test_keep_lane_comfort_is_zero():
    t = build_cost_table(two_lane(), AGGRESSIVE)
    assert t.comfort.keep == 0.0


def test_symmetric_equal_traffic_columns_agree_except_comfort():
    c = two_lane(target_leader=Neighbor(20.0, 6.0))
    t = build_cost_table(c, AGGRESSIVE)
    for row in (t.routing, t.speed, t.courtesy):
        assert row.keep == row.back == row.change
    assert t.comfort.back != t.comfort.keep
    assert t.p_back == 0.0


def test_asymmetric_vacuum_target_uses_alternative_route():
    c = two_lane(LaneRelation.ASYMMETRIC, target_stats=LaneStats.empty(), downstream_target=200.0)
    t = build_cost_table(c, AGGRESSIVE)
    assert t.p_back == pytest.approx(prob_back(0.058, 120.0, 400.0))
    t_new = 400.0 / MODEL.v0
    assert t.routing.back == pytest.approx(t_new + 60.0)
    assert t.routing.change == pytest.approx(t_new + 200.0)


def test_short_remaining_distance_lowers_p_back():
    near = build_cost_table(two_lane(LaneRelation.ASYMMETRIC, remaining=0.05), AGGRESSIVE)
    assert 0.0 < near.p_back < 0.05


def test_missing_target_stats():
    with pytest.raises(IncompleteContextError):
        build_cost_table(two_lane(target_stats=None), AGGRESSIVE)


def test_non_adjacent_target():
    with pytest.raises(IncompleteContextError):
        build_cost_table(two_lane(LaneRelation.NOT_ADJACENT), AGGRESSIVE)


# --- expectation, yield, combination ---

def test_expected_gain_certain_return():
    g = expected_gain(table(1.0, Row(12.0, 10.0, 20.0)))
    assert g["speed"] == pytest.approx(10.0 - 12.0)


def test_expected_gain_certain_route_change():
    g = expected_gain(table(0.0, Row(12.0, 10.0, 20.0)))
    assert g["speed"] == pytest.approx(20.0 - 12.0)


def test_expected_gain_mixture():
    g = expected_gain(table(0.5, Row(12.0, 10.0, 20.0)))
    assert g["speed"] == pytest.approx(3.0)


def test_costs_are_negated_into_gains():
    t = replace(table(0.5), routing=Row(12.0, 10.0, 20.0))
    assert expected_gain(t)["route"] == pytest.approx(-3.0)


@pytest.mark.parametrize("gain, base, expected", [(0.0, 12.0, 0.0), (3.0, 12.0, 0.25), (5.0, 0.0, 10.0),
                                                  (-5.0, 0.0, -10.0), (0.0, 0.0, 0.0), (3.0, -12.0, 0.25)])
def test_earning_yield(gain, base, expected):
    assert earning_yield(gain, base) == pytest.approx(expected)


def test_combine_zero():
    assert combine([0.0, 0.0, 0.0, 0.0], AGGRESSIVE) == 0.0


def test_combine_fixture():
    y = {"route": 0.1, "speed": 0.2, "comfort": 0.0, "courtesy": -0.05}
    assert combine(y, AGGRESSIVE) == pytest.approx(0.126 + 0.116 + 0.0 - 0.0305)
    assert combine(y, AGGRESSIVE) == pytest.approx(0.2115, abs=1e-12)


def test_combine_scales_linearly():
    y = [0.3, -0.2, -0.5, 0.7]
    assert combine(y, AGGRESSIVE.scaled(3.0)) == pytest.approx(3.0 * combine(y, AGGRESSIVE))


def test_combine_needs_four_yields():
    with pytest.raises(ValueError):
        combine([1.0, 2.0], AGGRESSIVE)


def test_yields_from_table():
    t = build_cost_table(two_lane(), AGGRESSIVE)
    g = expected_gain(t)
    y = yields(t, g)
    assert y["speed"] == pytest.approx(g["speed"] / t.speed.keep)
    assert y["route"] == pytest.approx(g["route"] / t.routing.keep)
    assert y["comfort"] == g["comfort"]


# --- decide ---

def test_no_candidates_keeps_lane():
    assert not decide([], AGGRESSIVE).change


def test_change_when_above_threshold_and_safe():
    c = two_lane(new_follower=Neighbor(40.0, 10.0))
    G = evaluate(c, AGGRESSIVE)[0]
    assert G > AGGRESSIVE.g_threshold
    out = decide([Candidate("left", c)], AGGRESSIVE)
    assert out.change and out.target == "left"
    assert out.G == pytest.approx(G)
    assert not out.safety_gated


def test_close_follower_blocks_and_sets_synchronize():
    # gap 4 m, closing at 4 m/s: TTC 1 s below the 2 s threshold
    c = two_lane(new_follower=Neighbor(4.0, 14.0))
    out = decide([Candidate("left", c)], AGGRESSIVE)
    assert not out.change
    assert out.safety_gated and out.synchronize
    assert out.G > AGGRESSIVE.g_threshold


def test_threshold_gate():
    c = two_lane()
    G = evaluate(c, AGGRESSIVE)[0]
    assert decide([Candidate("l", c)], replace(AGGRESSIVE, g_threshold=G - 1e-9)).change
    assert not decide([Candidate("l", c)], replace(AGGRESSIVE, g_threshold=G)).change


def test_cooldown_gate():
    c = two_lane()
    assert not decide([Candidate("l", c)], AGGRESSIVE, since_last_change=1.0).change
    assert decide([Candidate("l", c)], AGGRESSIVE, since_last_change=10.0).change


def test_best_candidate_wins():
    good = two_lane()
    poor = two_lane(target_leader=Neighbor(25.0, 7.0))
    out = decide([Candidate("poor", poor), Candidate("good", good)], AGGRESSIVE)
    assert out.target == "good"


# --- styles ---

def test_presets():
    p = style_presets()
    assert p["aggressive"].alpha == 0.058
    assert p["aggressive"].weights == (1.26, 0.58, 0.03, 0.61)
    assert p["aggressive"].beta == 1.1
    assert p["conservative"].mu_courtesy == 1.72
    assert p["conservative"].beta == 2.3
    assert p["inattentive"].mu_comfort > p["conservative"].mu_comfort
    assert p["altruistic"].mu_courtesy > p["conservative"].mu_courtesy


def test_style_validation():
    with pytest.raises(ValueError):
        replace(AGGRESSIVE, mu_speed=-0.1)
    with pytest.raises(ValueError):
        replace(AGGRESSIVE, g_threshold=math.inf)
    with pytest.raises(ValueError):
        replace(AGGRESSIVE, cooldown=-1.0)


# --- properties ---

def random_contexts(seed, n):
    rng = np.random.default_rng(seed)
    return [calib.random_context(rng, MODEL) for _ in range(n)]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0),
       st.sampled_from(["aggressive", "conservative", "inattentive", "altruistic"]))
def test_decisions_invariant_under_weight_scaling(seed, c, name):
    style = style_presets()[name]
    ctxs = random_contexts(seed, 6)
    for a, b in zip(ctxs[::2], ctxs[1::2]):
        cands = [Candidate("a", a), Candidate("b", b)]
        for since in (1.0, math.inf):
            o1 = decide(cands, style, since_last_change=since)
            o2 = decide(cands, style.scaled(c), since_last_change=since)
            assert (o1.target, o1.considered, o1.synchronize) == (o2.target, o2.considered, o2.synchronize)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 30.0), st.floats(0.5, 150.0), st.floats(0.0, 25.0), st.floats(0.05, 50.0),
       st.floats(1.0, 500.0), st.lists(st.tuples(st.floats(0.0, 30.0), st.floats(1.0, 30.0)), max_size=3))
def test_identical_symmetric_lanes_never_attract(v, gap, lead_v, th, remaining, related):
    stats = LaneStats(th * 10.0, 10.0, th, 0.0, 0.0, 200.0, 3)
    lead = Neighbor(gap, lead_v)
    c = IncentiveContext(speed=v, model=MODEL, current_stats=stats, target_stats=stats,
                         relation=LaneRelation.SYMMETRIC, remaining=remaining,
                         downstream_current=40.0, downstream_target=40.0,
                         current_leader=lead, target_leader=lead,
                         related=tuple(RelatedVehicle(s, s, d) for s, d in related))
    for style in style_presets().values():
        G, t, g, y = evaluate(c, style)
        assert G == pytest.approx(style.mu_comfort * y["comfort"], abs=1e-12)
        assert G <= 0
        assert not decide([Candidate("x", c)], style).change


def test_decide_is_deterministic():
    ctxs = random_contexts(11, 20)
    a = [decide([Candidate("x", c)], AGGRESSIVE) for c in ctxs]
    b = [decide([Candidate("x", c)], AGGRESSIVE) for c in ctxs]
    assert a == b


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 5.0))
def test_more_speed_weight_never_fewer_changes(seed, extra):
    ctxs = [c for c in random_contexts(seed, 40) if evaluate(c, AGGRESSIVE)[3]["speed"] >= 0]
    louder = replace(AGGRESSIVE, mu_speed=AGGRESSIVE.mu_speed + extra)
    n0 = sum(decide([Candidate("x", c)], AGGRESSIVE).change for c in ctxs)
    n1 = sum(decide([Candidate("x", c)], louder).change for c in ctxs)
    assert n1 >= n0
