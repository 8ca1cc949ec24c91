import math
from dataclasses import replace

import numpy as np
import pytest

from lanesim import sim
from lanesim.carfollow import IdmParams, idm_accel
from lanesim.metrics import events_csv, metrics_csv
from lanesim.roadnet import LaneRelation, lane_relation
from lanesim.scenario import load_scenario, parse_scenario
from lanesim.sim import InvariantBreach, World

from conftest import scenario_path

ROAD = {
    "sections": [{"id": "road", "entrance": True}, {"id": "out", "free_flow_time_s": 10}],
    "lanes": [{"id": "l0", "section": "road", "length_m": 6000, "speed_limit_mps": 30,
               "successors": ["out"]}],
}


def single_lane(tmp_path, demand=0.0, **over):
    d = {"network": ROAD, "demand_vph": {"road": demand}, "duration_s": 120, "seed": 5,
         "style_mix": {"cruiser": 1.0},
         "styles": {"cruiser": {"base": "conservative", "desired_speed": 30.0, "speed_spread": 0.0,
                                "carfollow": "idm"}}}
    d.update(over)
    return parse_scenario(d, tmp_path)


def sparse_fixture():
    sc = load_scenario(scenario_path("sparse"))
    sc = replace(sc, demand={"road": 0.0})
    # the slow leader holds its lane no matter what
    return sc.with_styles(slow=replace(sc.styles["slow"], g_threshold=1e9))


def test_empty_world_stays_empty(tmp_path):
    w = World(single_lane(tmp_path))
    for _ in range(100):
        w.step()
    assert w.active() == 0 and w.spawned == 0 and not w.events


def idm_reference(p: IdmParams, v: float, t_end: float, h: float = 1e-3) -> float:
    """Classical RK4 on dv/dt = idm(v) for a free road."""
    f = lambda x: idm_accel(p, x)
    for _ in range(int(round(t_end / h))):
        k1 = f(v)
        k2 = f(v + h / 2 * k1)
        k3 = f(v + h / 2 * k2)
        k4 = f(v + h * k3)
        v += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return v


def test_free_road_speed_converges_to_desired(tmp_path):
    w = World(single_lane(tmp_path))
    veh = w.place("cruiser", "l0", 0.0, 0.0, "out")
    speeds = {}
    for _ in range(1200):
        w.step()
        speeds[round(w.time, 6)] = veh.speed
    assert abs(veh.speed - 30.0) / 30.0 < 1e-3
    p = veh.cf
    # the stepped trajectory tracks the ODE solution during the transient too
    for t in (5.0, 10.0, 20.0):
        assert speeds[t] == pytest.approx(idm_reference(p, 0.0, t), rel=0.02)


def test_arrival_process_is_poisson(tmp_path):
    w = World(single_lane(tmp_path, demand=600.0))
    counts = []
    for _ in range(5):
        t, n = 0.0, 0
        while True:
            t += w._draw_gap(600.0)
            if t > 3600.0:
                break
            n += 1
        counts.append(n)
    for n in counts:
        assert abs(n - 600) <= 3 * math.sqrt(600)
    gaps = [w._draw_gap(600.0) for _ in range(20000)]
    assert np.mean(gaps) == pytest.approx(6.0, rel=0.03)


def test_zero_demand_never_spawns(tmp_path):
    w = World(single_lane(tmp_path, demand=0.0)).run(300)
    assert w.spawned == 0


def test_spawned_count_matches_demand(tmp_path):
    sc = single_lane(tmp_path, demand=600.0, duration_s=1800)
    r = sim.run(sc)
    assert abs(r.spawned - 300) <= 3 * math.sqrt(300)
    assert r.spawned == r.exited + r.active


def test_spawn_sequence_is_seeded(tmp_path):
    sc = single_lane(tmp_path, demand=900.0)
    a, b = World(sc).run(), World(sc).run()
    assert [v.spawn_time for v in a.vehicles.values()] == [v.spawn_time for v in b.vehicles.values()]
    c = World(replace(sc, seed=6)).run()
    assert [v.spawn_time for v in a.vehicles.values()] != [v.spawn_time for v in c.vehicles.values()]


def test_overtake_then_return():
    sc = sparse_fixture()
    net = sc.network
    assert lane_relation(net, "r0", "r1", route_section="main") is LaneRelation.ASYMMETRIC
    w = World(sc)
    slow = w.place("slow", "r0", 150.0, 8.0, "main")
    ego = w.place("aggressive", "r0", 100.0, 14.0, "main")
    w.run(150)
    out = [e for e in w.events if e.to_lane == "r1"]
    assert len(out) == 1
    assert out[0].vehicle_id == ego.id
    assert out[0].classification == sim.RETURNED
    assert 0 < out[0].p_back <= 1
    back = [e for e in w.events if e.to_lane == "r0"]
    assert [e.vehicle_id for e in back] == [ego.id]
    assert back[0].time > out[0].time
    assert not any(e.vehicle_id == slow.id for e in w.events)


def test_overlap_is_an_invariant_breach():
    w = World(sparse_fixture())
    w.place("slow", "r0", 100.0, 8.0, "main")
    with pytest.raises(InvariantBreach, match="negative gap"):
        w.place("slow", "r0", 102.0, 8.0, "main")


def test_place_rejects_off_lane_positions():
    w = World(sparse_fixture())
    with pytest.raises(ValueError):
        w.place("slow", "r0", 2000.0, 8.0, "main")


def test_step_invariants_on_urban():
    sc = replace(load_scenario(scenario_path("urban")), duration=240, demand_levels=(1.0,))
    w = World(sc)
    prev = {}
    for _ in range(2400):
        n_events = len(w.events)
        w.step()
        assert w.spawned == w.active() + w.exited
        changed = {e.vehicle_id for e in w.events[n_events:]}
        for lid, vs in w.lanes.items():
            ln = w.net.lanes[lid]
            assert [v.pos for v in vs] == sorted(v.pos for v in vs)
            for v in vs:
                assert 0.0 <= v.pos <= ln.length
                assert v.speed >= 0.0
            # vehicles that stayed on this lane keep their order
            stay = [v.id for v in vs if prev.get(v.id, (None,))[0] == lid and v.id not in changed]
            assert stay == sorted(stay, key=lambda i: prev[i][1])
        prev = {v.id: (v.lane, i) for vs in w.lanes.values() for i, v in enumerate(vs)}
    assert w.spawned > 50
    assert w.events


def test_asymmetric_changes_are_finalized():
    sc = replace(load_scenario(scenario_path("sparse")), duration=600)
    r = sim.run(sc, keep_worlds=True)
    w = r.worlds[0]
    asym = [e for e in r.events if e.classification != sim.SYMMETRIC]
    assert asym
    for e in asym:
        if e.vehicle_id not in w.vehicles:
            assert e.classification in (sim.RETURNED, sim.ROUTE_CHANGED)


def test_zero_duration_gives_empty_valid_outputs():
    sc = replace(load_scenario(scenario_path("urban")), duration=0)
    r = sim.run(sc)
    assert r.events == [] and r.bins == []
    assert metrics_csv(r.bins).count("\n") == 1
    assert events_csv(r.events).count("\n") == 1


def test_run_is_deterministic():
    sc = replace(load_scenario(scenario_path("urban")), duration=300)
    a, b = sim.run(sc), sim.run(sc)
    assert events_csv(a.events) == events_csv(b.events)
    assert metrics_csv(a.bins) == metrics_csv(b.bins)


def test_trajectory_recording_starts_each_step():
    sc = replace(sparse_fixture(), duration=2.0)
    w = World(sc, record=True)
    w.place("slow", "r0", 150.0, 8.0, "main")
    w.run()
    times = sorted({row[0] for row in w.trajectory})
    assert times[0] == 0.0 and len(times) == 20
    assert w.trajectory[0][2:5] == ("r0", 150.0, 8.0)
