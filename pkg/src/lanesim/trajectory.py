"""Trajectory files and extraction of labeled lane-change decisions from them.

A trajectory is a table of per-vehicle records (time, vehicle, lane, position,
speed, acceleration) at a constant sampling interval. Lane changes are read
off as switches between neighboring lanes; at every decision instant each
vehicle's candidate lanes are turned into a decision sample by rebuilding the
surrounding traffic from the records at that instant.
"""

from __future__ import annotations

import bisect
import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import networkx as nx

from . import carfollow
from .calib import DecisionSample, sample_from_context
from .carfollow import IdmParams
from .decision import DrivingStyle
from .incentives import IncentiveContext, Neighbor, RelatedVehicle, lane_stats, predicted_speed
from .roadnet import LaneRelation, Network, lane_relation, remaining_distance
from .sim import Navigator

TRAJECTORY_COLUMNS = ("time_s", "vehicle_id", "lane_id", "position_m", "speed_mps", "accel_mps2")
TIME_TOL = 1e-3
AGGRESSIVE_SHARE = 1.0 / 8.4  # one aggressive driver per 7.4 others


class TrajectoryError(ValueError):
    pass


@dataclass(frozen=True)
class TrajectoryRecord:
    time: float
    vehicle: str
    lane: str
    pos: float
    speed: float
    accel: float = 0.0


@dataclass(frozen=True)
class LaneChange:
    time: float  # last record on the original lane
    vehicle: str
    from_lane: str
    to_lane: str
    asymmetric: bool
    back: bool = False


@dataclass
class Extraction:
    samples: list[DecisionSample]
    changes: list[LaneChange]
    skipped: int = 0
    styles: dict[str, str] = field(default_factory=dict)

    def back_cases(self) -> list[tuple[float, float, int]]:
        from .calib import back_cases
        return back_cases(self.samples)


def read_trajectories(path) -> list[TrajectoryRecord]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        missing = set(TRAJECTORY_COLUMNS) - set(rd.fieldnames or ())
        if missing:
            raise TrajectoryError(f"{path}: missing columns {sorted(missing)}")
        out = []
        for i, row in enumerate(rd, start=2):
            try:
                out.append(TrajectoryRecord(float(row["time_s"]), row["vehicle_id"], row["lane_id"],
                                            float(row["position_m"]), float(row["speed_mps"]),
                                            float(row["accel_mps2"])))
            except ValueError as e:
                raise TrajectoryError(f"{path}:{i}: {e}") from None
    check_sampling(out)
    return out


def write_trajectories(path, records: Iterable) -> None:
    """Write records given as TrajectoryRecord or (time, id, lane, pos, speed, accel) tuples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for r in records:
            if isinstance(r, TrajectoryRecord):
                r = (r.time, r.vehicle, r.lane, r.pos, r.speed, r.accel)
            t, vid, lane, pos, v, a = r
            w.writerow([repr(float(t)), vid, lane, repr(float(pos)), repr(float(v)), repr(float(a))])


def from_tuples(rows: Iterable[tuple]) -> list[TrajectoryRecord]:
    return [TrajectoryRecord(float(t), str(vid), lane, float(x), float(v), float(a))
            for t, vid, lane, x, v, a in rows]


def _by_vehicle(records: Iterable[TrajectoryRecord]) -> dict[str, list[TrajectoryRecord]]:
    out: dict[str, list[TrajectoryRecord]] = defaultdict(list)
    for r in records:
        out[r.vehicle].append(r)
    for rs in out.values():
        rs.sort(key=lambda r: r.time)
    return dict(out)


def check_sampling(records: Sequence[TrajectoryRecord], tol: float = TIME_TOL) -> float | None:
    """Common sampling interval of all vehicles; raises if any vehicle deviates."""
    dt = None
    for vid, rs in _by_vehicle(records).items():
        for a, b in zip(rs, rs[1:]):
            step = b.time - a.time
            if dt is None:
                dt = step
            if step <= 0 or abs(step - dt) > tol:
                raise TrajectoryError(f"vehicle {vid}: sampling step {step:.6g} s at t={a.time:.6g} "
                                      f"differs from {dt:.6g} s")
    return dt


# --- extraction -------------------------------------------------------------------

def lane_changes(by_vehicle: dict[str, list[TrajectoryRecord]], net: Network) -> list[LaneChange]:
    """Switches between neighboring lanes, with back labels for changes onto asymmetric lanes.

    A change onto a lane with a different downstream set is labeled back when
    the vehicle reappears on its original lane before leaving the section.
    """
    out = []
    for vid in sorted(by_vehicle, key=_vid_key):
        rs = by_vehicle[vid]
        for i in range(1, len(rs)):
            a, b = rs[i - 1], rs[i]
            if a.lane == b.lane or b.lane not in net.neighbors(a.lane):
                continue
            asym = lane_relation(net, a.lane, b.lane) is LaneRelation.ASYMMETRIC
            back = False
            if asym:
                section = net.lanes[a.lane].section
                for r in rs[i + 1:]:
                    if net.lanes[r.lane].section != section:
                        break
                    if r.lane == a.lane:
                        back = True
                        break
            out.append(LaneChange(a.time, vid, a.lane, b.lane, asym, back))
    out.sort(key=lambda c: (c.time, _vid_key(c.vehicle)))
    return out


def _vid_key(vid: str):
    return (0, int(vid), "") if vid.lstrip("-").isdigit() else (1, 0, vid)


def style_tags(by_vehicle: dict[str, list[TrajectoryRecord]], share: float = AGGRESSIVE_SHARE) -> dict[str, str]:
    """Tag the fastest ``share`` of vehicles, by mean speed relative to their lane's mean, aggressive."""
    lane_mean: dict[tuple[float, str], list[float]] = defaultdict(list)
    for rs in by_vehicle.values():
        for r in rs:
            lane_mean[(round(r.time, 3), r.lane)].append(r.speed)
    means = {k: sum(v) / len(v) for k, v in lane_mean.items()}
    score = {}
    for vid, rs in by_vehicle.items():
        rel = [r.speed / means[(round(r.time, 3), r.lane)] for r in rs
               if means[(round(r.time, 3), r.lane)] > 0.1]
        score[vid] = sum(rel) / len(rel) if rel else 1.0
    order = sorted(score, key=lambda v: (-score[v], _vid_key(v)))
    k = int(round(share * len(order)))
    fast = set(order[:k])
    return {vid: ("aggressive" if vid in fast else "conservative") for vid in by_vehicle}


class _Instant:
    """Per-lane view of the traffic at one time."""

    def __init__(self, records: Sequence[TrajectoryRecord]):
        lanes: dict[str, list[TrajectoryRecord]] = defaultdict(list)
        for r in records:
            lanes[r.lane].append(r)
        self.lanes = {k: sorted(v, key=lambda r: r.pos) for k, v in lanes.items()}
        self.pos = {k: [r.pos for r in v] for k, v in self.lanes.items()}

    def around(self, lane: str, x: float, exclude: str | None = None):
        vs = [r for r in self.lanes.get(lane, []) if r.vehicle != exclude]
        ps = [r.pos for r in vs]
        j = bisect.bisect_right(ps, x)
        return (vs[j] if j < len(vs) else None), (vs[j - 1] if j > 0 else None)


class _Routes:
    """Free-flow downstream times towards an observed next section."""

    def __init__(self, net: Network, penalty: float = 600.0):
        self.net = net
        self.nav = Navigator(net, penalty)
        self.penalty = penalty

    def to_section(self, start: str, target: str) -> float:
        if start == target:
            return 0.0
        try:
            return nx.shortest_path_length(self.nav.graph, start, target,
                                           weight=lambda u, v, d: self.nav.times[u])
        except nx.NetworkXNoPath:
            return self.penalty

    def downstream(self, lane: str, nxt: str | None) -> float:
        succ = self.net.lanes[lane].successors
        if nxt is None or nxt in succ or not succ:
            return 0.0
        return min(self.to_section(s, nxt) for s in succ)


def _next_sections(rs: Sequence[TrajectoryRecord], net: Network) -> dict[str, str | None]:
    """Section each vehicle moved on to after every section it was seen in."""
    seq = []
    for r in rs:
        s = net.lanes[r.lane].section
        if not seq or seq[-1] != s:
            seq.append(s)
    out = {a: b for a, b in zip(seq, seq[1:])}
    last = net.lanes[rs[-1].lane].successors
    out[seq[-1]] = last[0] if len(last) == 1 else None
    return out


def extract_events(records: Sequence[TrajectoryRecord], net: Network, interval: float = 1.0,
                   alpha: float = 0.058, model: IdmParams | None = None,
                   vehicle_length: float = 5.0, tag_styles: bool = True) -> Extraction:
    """Decision samples at every ``interval`` plus the observed lane changes.

    Records on lanes unknown to the network are skipped and counted. A sample
    at instant t for candidate lane M is labeled 1 when the vehicle switches
    to M within [t, t + interval).
    """
    known = [r for r in records if r.lane in net.lanes]
    skipped = len(records) - len(known)
    by_vehicle = _by_vehicle(known)
    changes = lane_changes(by_vehicle, net)
    styles = style_tags(by_vehicle) if tag_styles else {}
    if not known:
        return Extraction([], changes, skipped, styles)

    style = DrivingStyle("observed", 1.0, 1.0, 1.0, 1.0, beta=1.0, alpha=alpha)
    base = model or carfollow.PRESETS["idm"]
    routes = _Routes(net)
    nexts = {vid: _next_sections(rs, net) for vid, rs in by_vehicle.items()}
    taken: dict[tuple[str, int], LaneChange] = {}
    # sampling instants sit on whole multiples of the interval, not on the first record
    t0 = math.floor(min(r.time for r in known) / interval + TIME_TOL) * interval
    for c in changes:
        taken[(c.vehicle, int(math.floor((c.time - t0) / interval + TIME_TOL)))] = c

    at: dict[int, list[TrajectoryRecord]] = defaultdict(list)
    for r in known:
        k = (r.time - t0) / interval
        if abs(k - round(k)) * interval <= TIME_TOL:
            at[int(round(k))].append(r)

    samples = []
    for k in sorted(at):
        inst = _Instant(at[k])
        for r in sorted(at[k], key=lambda r: _vid_key(r.vehicle)):
            ln = net.lanes[r.lane]
            for tid in net.neighbors(r.lane):
                if r.pos > net.lanes[tid].length:
                    continue
                ctx = _context(inst, r, tid, net, routes, nexts[r.vehicle].get(ln.section), base,
                               vehicle_length)
                ch = taken.get((r.vehicle, k))
                y = int(ch is not None and ch.from_lane == r.lane and ch.to_lane == tid)
                back = int(ch.back) if y and ch.asymmetric else -1
                s = sample_from_context(ctx, style, y=y, back=back)
                samples.append(replace(s, style=styles.get(r.vehicle, "")))
    return Extraction(samples, changes, skipped, styles)


def _context(inst: _Instant, r: TrajectoryRecord, tid: str, net: Network, routes: _Routes,
             nxt: str | None, base: IdmParams, length: float) -> IncentiveContext:
    ln = net.lanes[r.lane]
    model = replace(base, v0=ln.speed_limit)
    x = r.pos
    lead, foll = inst.around(r.lane, x, exclude=r.vehicle)
    t_lead, t_foll = inst.around(tid, x)

    def stats(lane):
        vs = inst.lanes.get(lane, [])
        return lane_stats([v.pos for v in vs], [v.speed for v in vs], [length] * len(vs), x,
                          net.lanes[lane].length)

    cur_stats = stats(r.lane)
    cur_leader = Neighbor(lead.pos - length - x, lead.speed) if lead else None
    tgt_leader = Neighbor(t_lead.pos - length - x, t_lead.speed) if t_lead else None
    new_foll = Neighbor(x - length - t_foll.pos, t_foll.speed) if t_foll else None
    related = []
    g = x - length - foll.pos if foll is not None else math.inf
    if (foll is not None and r.speed < cur_stats.mean_speed
            and g < carfollow.desired_gap(model, foll.speed, foll.speed - r.speed)):
        after_lead = Neighbor(lead.pos - length - foll.pos, lead.speed) if lead else None
        related.append(RelatedVehicle(predicted_speed(model, Neighbor(g, r.speed)),
                                      predicted_speed(model, after_lead), model.v0))
    g = x - length - t_foll.pos if t_foll is not None else math.inf
    if t_foll is not None and g < carfollow.desired_gap(model, t_foll.speed, t_foll.speed - r.speed):
        before = Neighbor(t_lead.pos - length - t_foll.pos, t_lead.speed) if t_lead else None
        related.append(RelatedVehicle(predicted_speed(model, before),
                                      predicted_speed(model, Neighbor(max(g, 0.0), r.speed)), model.v0))
    return IncentiveContext(
        speed=r.speed, model=model, current_stats=cur_stats, target_stats=stats(tid),
        relation=lane_relation(net, r.lane, tid, nxt), remaining=remaining_distance(ln, x),
        downstream_current=routes.downstream(r.lane, nxt),
        downstream_target=routes.downstream(tid, nxt),
        current_leader=cur_leader, target_leader=tgt_leader, new_follower=new_foll,
        related=tuple(related))
