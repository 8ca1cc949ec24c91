"""Multi-criteria lane-change decision: cost table, expected gains, yields, weighting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

from .incentives import (
    SPEED_EPS,
    IncentiveContext,
    SafetyParams,
    comfort_cost,
    courtesy_gain,
    expected_speed,
    prob_back,
    safety_ok,
)
from .roadnet import LaneRelation

INCENTIVES = ("route", "speed", "comfort", "courtesy")
YIELD_EPS = 1e-6
YIELD_CAP = 10.0


class IncompleteContextError(ValueError):
    pass


@dataclass(frozen=True)
class DrivingStyle:
    name: str
    mu_route: float
    mu_speed: float
    mu_comfort: float
    mu_courtesy: float
    beta: float
    alpha: float = 0.058
    g_threshold: float = 0.1
    cooldown: float = 5.0
    desired_speed: float = 13.9
    speed_spread: float = 0.1
    carfollow: str = "idm"

    def __post_init__(self):
        if min(self.weights) < 0:
            raise ValueError(f"style {self.name!r}: weights must be non-negative")
        if not math.isfinite(self.g_threshold):
            raise ValueError(f"style {self.name!r}: threshold must be finite")
        if self.cooldown < 0:
            raise ValueError(f"style {self.name!r}: cooldown must be non-negative")
        if self.beta <= 0 or self.alpha < 0:
            raise ValueError(f"style {self.name!r}: need beta > 0 and alpha >= 0")
        if self.desired_speed <= 0:
            raise ValueError(f"style {self.name!r}: desired speed must be positive")

    @property
    def weights(self) -> tuple[float, float, float, float]:
        return (self.mu_route, self.mu_speed, self.mu_comfort, self.mu_courtesy)

    def scaled(self, c: float) -> "DrivingStyle":
        """Weights and threshold multiplied by ``c``; decisions are unchanged for c > 0."""
        return replace(self, mu_route=self.mu_route * c, mu_speed=self.mu_speed * c,
                       mu_comfort=self.mu_comfort * c, mu_courtesy=self.mu_courtesy * c,
                       g_threshold=self.g_threshold * c)


def style_presets() -> dict[str, DrivingStyle]:
    # aggressive drivers pursue higher and more irregular speeds
    aggressive = DrivingStyle("aggressive", 1.26, 0.58, 0.03, 0.61, beta=1.1, alpha=0.058,
                              desired_speed=16.7, speed_spread=0.2, carfollow="fvdm")
    conservative = DrivingStyle("conservative", 0.44, 0.41, 0.09, 1.72, beta=2.3, alpha=0.058,
                                desired_speed=13.9, speed_spread=0.05, carfollow="idm")
    return {
        "aggressive": aggressive,
        "conservative": conservative,
        "inattentive": replace(conservative, name="inattentive",
                               mu_comfort=conservative.mu_comfort * 3),
        "altruistic": replace(conservative, name="altruistic",
                              mu_courtesy=conservative.mu_courtesy * 2),
    }


@dataclass(frozen=True)
class Row:
    keep: float
    back: float
    change: float


@dataclass(frozen=True)
class CostTable:
    """Outcomes of keeping lane, changing and returning, and changing lane and route.

    Routing holds travel times, speed holds predicted speeds, courtesy holds
    the summed deviation of related vehicles from their desired speeds and
    comfort holds the (non-positive) maneuver comfort.
    """
    routing: Row
    speed: Row
    courtesy: Row
    comfort: Row
    p_back: float
    courtesy_gain: float
    current_comfort: float


def build_cost_table(ctx: IncentiveContext, style: DrivingStyle) -> CostTable:
    if ctx.target_stats is None:
        raise IncompleteContextError("target lane statistics missing")
    if ctx.relation is LaneRelation.NOT_ADJACENT:
        raise IncompleteContextError("target lane is not adjacent")
    v, v_new = expected_speed(ctx)
    s = ctx.remaining
    t_keep = s / max(v, SPEED_EPS)
    t_new = s / max(v_new, SPEED_EPS)
    if ctx.relation is LaneRelation.ASYMMETRIC:
        p = prob_back(style.alpha, ctx.target_stats.time_headway, s)
    else:
        p = 0.0
    j_new = comfort_cost(ctx.target_stats.time_headway, style.beta)
    j_cur = comfort_cost(ctx.current_stats.time_headway, style.beta)
    dev = sum(abs(r.speed - r.desired) for r in ctx.related)
    dev_new = sum(abs(r.speed_after - r.desired) for r in ctx.related)
    return CostTable(
        routing=Row(t_keep + ctx.downstream_current, t_new + ctx.downstream_current,
                    t_new + ctx.downstream_target),
        speed=Row(v, v_new, v_new),
        courtesy=Row(dev, dev_new, dev_new),
        comfort=Row(0.0, j_new + j_cur, j_new),
        p_back=p,
        courtesy_gain=courtesy_gain(ctx.related),
        current_comfort=j_cur,
    )


def _expect(row: Row, p: float) -> float:
    return p * row.back + (1.0 - p) * row.change - row.keep


def expected_gain(table: CostTable) -> dict[str, float]:
    """Per-incentive expected gain; positive always favors changing.

    Routing and courtesy rows hold costs and are negated; comfort is already
    a signed utility.
    """
    p = table.p_back
    return {
        "route": -_expect(table.routing, p),
        "speed": _expect(table.speed, p),
        "comfort": _expect(table.comfort, p),
        "courtesy": -_expect(table.courtesy, p),
    }


def earning_yield(gain: float, baseline: float, eps: float = YIELD_EPS, cap: float = YIELD_CAP) -> float:
    if abs(baseline) < eps:
        return math.copysign(cap, gain) if gain != 0 else 0.0
    return gain / abs(baseline)


def yields(table: CostTable, gains: dict[str, float] | None = None) -> dict[str, float]:
    gains = expected_gain(table) if gains is None else gains
    return {
        "route": earning_yield(gains["route"], table.routing.keep),
        "speed": earning_yield(gains["speed"], table.speed.keep),
        # keep-lane comfort is zero; the comfort scale K sits in the weight
        "comfort": gains["comfort"],
        "courtesy": table.courtesy_gain,
    }


def combine(y: dict[str, float] | Sequence[float], style: DrivingStyle) -> float:
    vals = [y[k] for k in INCENTIVES] if isinstance(y, dict) else list(y)
    if len(vals) != 4:
        raise ValueError("need four yields (route, speed, comfort, courtesy)")
    return sum(m * v for m, v in zip(style.weights, vals))


@dataclass(frozen=True)
class Candidate:
    lane: str
    ctx: IncentiveContext


@dataclass(frozen=True)
class DecisionOutcome:
    target: str | None
    G: float = -math.inf
    considered: str | None = None
    gains: dict[str, float] = field(default_factory=dict)
    yields: dict[str, float] = field(default_factory=dict)
    p_back: float = 0.0
    safety_gated: bool = False
    synchronize: bool = False

    @property
    def change(self) -> bool:
        return self.target is not None


def evaluate(ctx: IncentiveContext, style: DrivingStyle) -> tuple[float, CostTable, dict, dict]:
    table = build_cost_table(ctx, style)
    g = expected_gain(table)
    y = yields(table, g)
    return combine(y, style), table, g, y


def gap_acceptable(ctx: IncentiveContext, safety: SafetyParams) -> bool:
    if ctx.new_follower is not None:
        if not safety_ok(max(ctx.new_follower.gap, 0.0), ctx.new_follower.speed - ctx.speed, safety):
            return False
    if ctx.target_leader is not None:
        if not safety_ok(max(ctx.target_leader.gap, 0.0), ctx.speed - ctx.target_leader.speed, safety):
            return False
    return True


def decide(candidates: Sequence[Candidate], style: DrivingStyle,
           safety: SafetyParams = SafetyParams(), since_last_change: float = math.inf) -> DecisionOutcome:
    """Pick the adjacent lane with the largest combined yield, if it clears every gate."""
    if not candidates:
        return DecisionOutcome(None)
    best = None
    for cand in candidates:
        G, table, g, y = evaluate(cand.ctx, style)
        if best is None or G > best[0]:
            best = (G, cand, table, g, y)
    G, cand, table, g, y = best
    common = dict(G=G, considered=cand.lane, gains=g, yields=y, p_back=table.p_back)
    if not G > style.g_threshold:
        return DecisionOutcome(None, **common)
    if since_last_change < style.cooldown:
        return DecisionOutcome(None, **common)
    if not gap_acceptable(cand.ctx, safety):
        return DecisionOutcome(None, safety_gated=True, synchronize=True, **common)
    return DecisionOutcome(cand.lane, **common)
