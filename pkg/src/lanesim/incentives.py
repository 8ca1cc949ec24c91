"""Raw incentive evaluations for one candidate lane change, plus the safety gate."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from typing import Sequence

from .carfollow import IdmParams, OvmParams, desired_speed, equilibrium_speed
from .roadnet import LaneRelation, RouteSegment

SPEED_EPS = 0.1       # below this mean speed a lane counts as standing
TH_CAP = 120.0        # headway reported for empty or standing lanes [s]
TH_FLOOR = 0.1        # smallest headway fed to the comfort cost [s]
STATS_WINDOW = 200.0  # longitudinal extent of lane aggregation [m]
SIGHT = STATS_WINDOW / 2


@dataclass(frozen=True)
class LaneStats:
    mean_gap: float
    mean_speed: float
    time_headway: float
    density: float  # veh/km
    flow: float     # veh/h
    window: float
    count: int = 0

    @classmethod
    def empty(cls, window: float = STATS_WINDOW) -> "LaneStats":
        return cls(0.0, 0.0, TH_CAP, 0.0, 0.0, window, 0)


@dataclass(frozen=True)
class SafetyParams:
    ttc_threshold: float = 2.0
    min_gap: float = 2.0

    def __post_init__(self):
        if self.ttc_threshold <= 0:
            raise ValueError("TTC threshold must be positive")


@dataclass(frozen=True)
class Neighbor:
    """Bumper gap to, and speed of, a surrounding vehicle."""
    gap: float
    speed: float
    desired_speed: float = 0.0


@dataclass(frozen=True)
class RelatedVehicle:
    speed: float          # predicted speed if the ego stays
    speed_after: float    # predicted speed after the ego changes lane
    desired: float


@dataclass(frozen=True)
class IncentiveContext:
    """Everything one lane-change evaluation reads, frozen at a single time step."""
    speed: float
    model: IdmParams | OvmParams
    current_stats: LaneStats
    target_stats: LaneStats | None
    relation: LaneRelation
    remaining: float
    downstream_current: float
    downstream_target: float
    current_leader: Neighbor | None = None
    target_leader: Neighbor | None = None
    new_follower: Neighbor | None = None
    related: tuple[RelatedVehicle, ...] = ()
    sight: float = SIGHT


def time_headway(mean_gap: float, mean_speed: float, count: int | None = None,
                 eps: float = SPEED_EPS, cap: float = TH_CAP) -> float:
    if count == 0 or mean_speed < eps:
        return cap
    return min(cap, mean_gap / mean_speed)


def lane_stats(positions: Sequence[float], speeds: Sequence[float], lengths: Sequence[float],
               center: float, lane_length: float, window: float = STATS_WINDOW) -> LaneStats:
    """Aggregate the vehicles within ``window`` centered on ``center``.

    ``positions`` must be sorted ascending. The mean gap is taken from the
    window's density (spacing minus mean vehicle length) so a single vehicle
    still yields a finite value.
    """
    if lane_length <= window:
        lo, hi = 0.0, lane_length
    else:
        lo = min(max(0.0, center - window / 2), lane_length - window)
        hi = lo + window
    i = bisect.bisect_left(positions, lo)
    j = bisect.bisect_right(positions, hi)
    n = j - i
    extent = hi - lo
    if n == 0:
        return LaneStats(0.0, 0.0, TH_CAP, 0.0, 0.0, extent, 0)
    vbar = sum(speeds[i:j]) / n
    lbar = sum(lengths[i:j]) / n
    dbar = max(0.0, extent / n - lbar)
    rho = n / (extent / 1000.0)
    return LaneStats(dbar, vbar, time_headway(dbar, vbar, n), rho, rho * vbar * 3.6, extent, n)


def prob_back(alpha: float, t_h: float, s: float) -> float:
    """Chance of getting back to the original lane before the decision point."""
    return -math.expm1(-alpha * t_h * s)


def route_travel_time(seg: RouteSegment) -> float:
    # T0 + T0*k1*x^k2 rather than T0*(1 + k1*x^k2): the latter rounds 100*(1 + 0.15) to 114.99...
    return seg.free_flow_time + seg.free_flow_time * seg.k1 * (seg.flow / seg.capacity) ** seg.k2


def route_time(segments: Sequence[RouteSegment]) -> float:
    return sum(route_travel_time(s) for s in segments)


def predicted_speed(model: IdmParams | OvmParams, leader: Neighbor | None, sight: float = SIGHT) -> float:
    """Speed the ego can sustain behind ``leader``: free-road speed past the sight distance,
    otherwise the car-following equilibrium speed at the observed gap, never above the
    leader's own speed (a follower cannot keep outrunning its leader)."""
    if leader is None or leader.gap > sight:
        return desired_speed(model)
    return min(equilibrium_speed(model, max(leader.gap, 0.0)), max(leader.speed, 0.0))


def expected_speed(ctx: IncentiveContext) -> tuple[float, float]:
    """Predicted ego speed (keeping lane, after changing)."""
    return (predicted_speed(ctx.model, ctx.current_leader, ctx.sight),
            predicted_speed(ctx.model, ctx.target_leader, ctx.sight))


def courtesy_gain(related: Sequence[RelatedVehicle], eps: float = SPEED_EPS) -> float:
    """Summed relative reduction of each related vehicle's deviation from its desired speed.

    A vehicle already within ``eps`` of its desired speed has nothing to gain
    and is skipped, unless the change slows it down: hindering a free-flowing
    vehicle then counts as -1, the mirror image of fully freeing a blocked one
    (scaled down linearly for slowdowns smaller than ``eps``).
    """
    total = 0.0
    for r in related:
        before = abs(r.speed - r.desired)
        after = abs(r.speed_after - r.desired)
        if before < eps:
            if after > before:
                total -= min(1.0, (after - before) / eps)
            continue
        total += (before - after) / before
    return total


def comfort_cost(t_h: float, beta: float, floor: float = TH_FLOOR) -> float:
    return -max(t_h, floor) ** -beta


def safety_ok(gap: float, closing_speed: float, p: SafetyParams = SafetyParams()) -> bool:
    """Gap acceptance: time-to-collision above threshold and gap above the physical minimum.

    ``closing_speed`` is follower speed minus ego speed.
    """
    if gap < 0:
        raise ValueError(f"negative gap {gap!r}: vehicles overlap")
    if gap < p.min_gap:
        return False
    if closing_speed <= 0:
        return True
    return gap / closing_speed > p.ttc_threshold
