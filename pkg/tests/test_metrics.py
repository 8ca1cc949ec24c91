import math

import pytest
from hypothesis import given, strategies as st

from lanesim.metrics import (
    RateBin,
    events_csv,
    lane_change_rate,
    metrics_csv,
    rate,
    relative_difference,
    return_fraction,
)
from lanesim.sim import LaneChangeEvent, Window


def test_rate_zero_events():
    assert rate(0, 0.5, 0.1) == 0.0


def test_rate_fixture():
    assert rate(12, 0.5, 0.1) == pytest.approx(240.0)


@given(st.integers(0, 10_000), st.floats(0.01, 100.0), st.floats(0.001, 10.0))
def test_doubling_window_halves_rate(n, dx, dt):
    assert rate(n, dx, 2 * dt) == pytest.approx(rate(n, dx, dt) / 2)


def test_rate_needs_positive_cell():
    with pytest.raises(ValueError):
        rate(3, 0.0, 1.0)


def test_windows_pool_into_density_bins():
    ws = [Window(0, 0, 300, 12.0, 4), Window(0, 300, 600, 13.0, 2), Window(0, 600, 900, 31.0, 9)]
    bins = lane_change_rate(ws, dx_km=2.0, bin_width=5.0)
    # empty density bins are left out, not zero-filled
    assert [b.density for b in bins] == [12.5, 32.5]
    assert bins[0].events == 6 and bins[0].dt_h == pytest.approx(600 / 3600)
    assert bins[0].rate == pytest.approx(6 / (2.0 * 600 / 3600))


def test_relative_difference():
    a = [RateBin(2.5, 10, 1.0, 1.0), RateBin(7.5, 0, 1.0, 1.0), RateBin(12.5, 4, 1.0, 1.0)]
    b = [RateBin(2.5, 12, 1.0, 1.0), RateBin(7.5, 0, 1.0, 1.0)]
    rows = relative_difference(a, b)
    assert [(r[0], r[3]) for r in rows] == [(2.5, pytest.approx(0.2)), (7.5, 0.0)]
    assert all(r[3] == 0 for r in relative_difference(a, a))


def test_return_fraction():
    ev = [LaneChangeEvent(0.0, 1, "a", "b", 1.0, "ReturnedToOriginal", 0.8),
          LaneChangeEvent(1.0, 2, "a", "b", 1.0, "RouteChanged", 0.4),
          LaneChangeEvent(2.0, 3, "a", "b", 1.0, "Symmetric")]
    obs, pred, n = return_fraction(ev)
    assert (obs, n) == (0.5, 2)
    assert pred == pytest.approx(0.6)
    assert math.isnan(return_fraction([])[0])


def test_csv_headers():
    assert metrics_csv([]).splitlines() == ["bin_density_veh_km,events,dx_km,dt_h,rate_per_km_h"]
    head = events_csv([]).splitlines()[0].split(",")
    assert head[:6] == ["time_s", "vehicle_id", "from_lane", "to_lane", "G", "classification"]


def test_event_rows():
    ev = [LaneChangeEvent(1.5, 7, "a", "b", 0.25, "Symmetric")]
    assert events_csv(ev).splitlines()[1] == "1.5,7,a,b,0.25,Symmetric,,0"
