import math

import pytest
from hypothesis import given, strategies as st

from lanesim.carfollow import IdmParams, idm_accel
from lanesim.mobil import Car, MobilCandidate, MobilParams, incentive, mobil_decide, mobil_ok
from lanesim.roadnet import LaneRelation

IDM = IdmParams(v0=30.0)


def cand(leader=None, new_leader=None, follower=None, new_follower=None, speed=20.0,
         relation=LaneRelation.SYMMETRIC, lane="left"):
    return MobilCandidate(lane, relation, False, speed, IDM, 5.0, leader, new_leader, follower, new_follower)


def test_identical_lanes_keep():
    c = cand(Car(40.0, 20.0), Car(40.0, 20.0))
    assert incentive(c, MobilParams())[0] == pytest.approx(0.0, abs=1e-12)
    assert mobil_decide([c])[0] is None


def test_selfish_gain_changes():
    p = MobilParams(politeness=0.0, a_threshold=0.1)
    c = cand(leader=Car(30.0, 15.0), new_leader=Car(80.0, 20.0))
    gain = idm_accel(IDM, 20.0, 80.0, 0.0) - idm_accel(IDM, 20.0, 30.0, 5.0)
    assert gain > 0.5
    total, _ = incentive(c, p)
    assert total == pytest.approx(gain)
    assert mobil_decide([c], p)[0] == "left"


def test_braking_veto():
    p = MobilParams(politeness=0.0, a_threshold=0.1, b_safe=4.0)
    # new follower 5 m behind and 10 m/s faster would have to brake hard
    c = cand(leader=Car(30.0, 15.0), new_leader=Car(80.0, 20.0), new_follower=Car(5.0, 30.0))
    ok, total = mobil_ok(c, p)
    assert incentive(c, p)[1] < -4.0
    assert not ok
    assert mobil_decide([c], p)[0] is None


def test_politeness_counts_followers():
    c = cand(leader=Car(30.0, 15.0), new_leader=Car(80.0, 20.0), new_follower=Car(20.0, 22.0))
    selfish, _ = incentive(c, MobilParams(politeness=0.0))
    polite, _ = incentive(c, MobilParams(politeness=1.0))
    assert polite < selfish


def test_asymmetric_lane_never_chosen():
    c = cand(leader=Car(10.0, 5.0), relation=LaneRelation.ASYMMETRIC)
    assert mobil_decide([c])[0] is None


def test_params_validated():
    with pytest.raises(ValueError):
        MobilParams(politeness=1.5)
    with pytest.raises(ValueError):
        MobilParams(b_safe=0.0)


car = st.builds(Car, st.floats(2.5, 200.0), st.floats(0.0, 35.0))


@given(car, car, st.floats(0.0, 35.0))
def test_zero_politeness_zero_threshold_changes_on_any_gain(leader, new_leader, v):
    p = MobilParams(politeness=0.0, a_threshold=0.0)
    c = cand(leader=leader, new_leader=new_leader, speed=v)
    a_old = idm_accel(IDM, v, leader.gap, v - leader.speed)
    a_new = idm_accel(IDM, v, new_leader.gap, v - new_leader.speed)
    assert mobil_ok(c, p)[0] == (a_new > a_old)


@given(car, car, car, st.floats(0.0, 35.0), st.floats(0.0, 1.0), st.floats(0.0, 2.0), st.floats(0.5, 9.0))
def test_braking_veto_is_absolute(leader, new_leader, new_follower, v, pol, thr, b_safe):
    p = MobilParams(politeness=pol, a_threshold=thr, b_safe=b_safe)
    c = cand(leader=leader, new_leader=new_leader, new_follower=new_follower, speed=v)
    if incentive(c, p)[1] < -b_safe:
        assert not mobil_ok(c, p)[0]
