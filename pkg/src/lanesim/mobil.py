"""MOBIL baseline: acceleration gain with a politeness term and a braking veto."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .carfollow import IdmParams, idm_accel
from .roadnet import LaneRelation


@dataclass(frozen=True)
class MobilParams:
    politeness: float = 0.3
    a_threshold: float = 0.1
    b_safe: float = 4.0
    right_bias: float = 0.0
    min_gap: float = 2.0

    def __post_init__(self):
        if not 0 <= self.politeness <= 1:
            raise ValueError("politeness must lie in [0, 1]")
        if self.a_threshold < 0 or self.b_safe <= 0:
            raise ValueError("need a_threshold >= 0 and b_safe > 0")


@dataclass(frozen=True)
class Car:
    """A surrounding vehicle: bumper gap to the reference car, speed and IDM parameters."""
    gap: float
    speed: float
    idm: IdmParams | None = None


@dataclass(frozen=True)
class MobilCandidate:
    lane: str
    relation: LaneRelation
    to_right: bool
    speed: float
    idm: IdmParams
    length: float
    leader: Car | None = None        # ahead of ego in its own lane
    new_leader: Car | None = None    # ahead of ego's slot in the target lane
    follower: Car | None = None      # behind ego in its own lane (gap to ego's rear)
    new_follower: Car | None = None  # behind ego's slot in the target lane


def _acc(p: IdmParams, v: float, lead: Car | None, extra_gap: float = 0.0) -> float:
    if lead is None:
        return idm_accel(p, v)
    return idm_accel(p, v, max(lead.gap + extra_gap, 1e-3), v - lead.speed)


def incentive(c: MobilCandidate, p: MobilParams) -> tuple[float, float]:
    """Return (politeness-weighted gain, new follower's acceleration after the change)."""
    a_ego = _acc(c.idm, c.speed, c.leader)
    a_ego_new = _acc(c.idm, c.speed, c.new_leader)
    gain = a_ego_new - a_ego

    others = 0.0
    a_nf_new = math.inf
    if c.new_follower is not None:
        nf = c.new_follower
        p_nf = nf.idm or c.idm
        # before: follows the target-lane leader across the slot the ego would fill
        before = (idm_accel(p_nf, nf.speed)
                  if c.new_leader is None
                  else _acc(p_nf, nf.speed, Car(nf.gap + c.length + c.new_leader.gap, c.new_leader.speed)))
        a_nf_new = _acc(p_nf, nf.speed, Car(nf.gap, c.speed))
        others += a_nf_new - before
    if c.follower is not None:
        of = c.follower
        p_of = of.idm or c.idm
        before = _acc(p_of, of.speed, Car(of.gap, c.speed))
        after = (idm_accel(p_of, of.speed)
                 if c.leader is None
                 else _acc(p_of, of.speed, Car(of.gap + c.length + c.leader.gap, c.leader.speed)))
        others += after - before
    return gain + p.politeness * others, a_nf_new


def mobil_ok(c: MobilCandidate, p: MobilParams) -> tuple[bool, float]:
    if c.relation is LaneRelation.ASYMMETRIC:
        # never leaves the lanes that keep it on its route
        return False, -math.inf
    if c.new_leader is not None and c.new_leader.gap < p.min_gap:
        return False, -math.inf
    if c.new_follower is not None and c.new_follower.gap < p.min_gap:
        return False, -math.inf
    total, a_nf = incentive(c, p)
    if a_nf < -p.b_safe:
        return False, total
    bias = p.right_bias if c.to_right else -p.right_bias
    return total + bias > p.a_threshold, total


def mobil_decide(candidates: Sequence[MobilCandidate], p: MobilParams = MobilParams()) -> tuple[str | None, float]:
    """Target lane (or None to keep) and the incentive of the best admissible candidate."""
    best_lane, best = None, -math.inf
    for c in candidates:
        ok, total = mobil_ok(c, p)
        if ok and total > best:
            best_lane, best = c.lane, total
    return best_lane, best
