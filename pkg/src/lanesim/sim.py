"""Discrete-time traffic simulation with per-step lane-change decisions.

Each step runs fixed phases: snapshot, lane-change decisions, ordered
application, car-following, integration, section transitions, spawning and
measurement. Decisions are computed against the snapshot and applied in
ascending vehicle id with a fresh safety check, so the outcome never depends
on dictionary or evaluation order.
"""

from __future__ import annotations

import bisect
import logging
import math
import zlib
from collections import deque
from dataclasses import dataclass, field, replace

import networkx as nx
import numpy as np

from . import carfollow
from .carfollow import ACCEL_MAX, ACCEL_MIN, IdmParams, OvmParams
from .decision import Candidate, DecisionOutcome, DrivingStyle, decide, gap_acceptable
from .incentives import (
    SIGHT,
    IncentiveContext,
    LaneStats,
    Neighbor,
    RelatedVehicle,
    lane_stats,
    predicted_speed,
    route_travel_time,
)
from .mobil import Car, MobilCandidate, incentive, mobil_decide
from .roadnet import LaneRelation, Network, Route, lane_relation, remaining_distance
from .scenario import Scenario

log = logging.getLogger(__name__)

SYNC_GAIN = 0.3

SYMMETRIC = "Symmetric"
PENDING = "Pending"
RETURNED = "ReturnedToOriginal"
ROUTE_CHANGED = "RouteChanged"


class InvariantBreach(RuntimeError):
    """A physical invariant (non-negative gaps, conservation) was violated."""


@dataclass(eq=False)
class Vehicle:
    id: int
    lane: str
    pos: float
    speed: float
    length: float
    style: DrivingStyle
    cf: IdmParams | OvmParams
    idm: IdmParams
    route: Route
    spawn_time: float = 0.0
    acc: float = 0.0
    last_change: float = -math.inf
    sync_speed: float | None = None
    pending: "LaneChangeEvent | None" = None

    @property
    def desired(self) -> float:
        return carfollow.desired_speed(self.cf)


@dataclass
class LaneChangeEvent:
    time: float
    vehicle_id: int
    from_lane: str
    to_lane: str
    G: float
    classification: str
    p_back: float = float("nan")
    section: str = ""
    level: int = 0


@dataclass
class Window:
    level: int
    start: float
    end: float
    density: float
    events: int
    samples: int = 0


class Navigator:
    """Live route travel times from measured section inflows."""

    def __init__(self, network: Network, penalty: float = 600.0):
        self.net = network
        self.penalty = penalty
        self.graph = nx.DiGraph()
        for sid in network.sections:
            self.graph.add_node(sid)
            for nxt in network.section_successors(sid):
                self.graph.add_edge(sid, nxt)
        self.exits = network.exits
        self.times: dict[str, float] = {}
        self.after: dict[str, dict[str, float]] = {}
        self.update({})

    def update(self, flows: dict[str, float]):
        self.times = {sid: route_travel_time(self.net.segment(sid, flows.get(sid, 0.0)))
                      for sid in self.net.sections}
        rev = self.graph.reverse(copy=False)
        after = {}
        for dest in self.exits:
            # weight of u->v is the time spent on v, so distances exclude the start section
            dist = nx.single_source_dijkstra_path_length(
                rev, dest, weight=lambda u, v, d: self.times[u])
            after[dest] = dist
        self.after = after

    def time_after(self, section: str, dest: str) -> float:
        """Travel time from leaving ``section`` to the end of ``dest``."""
        d = self.after[dest].get(section)
        if d is None:
            best = min(self.after[e].get(section, math.inf) for e in self.exits)
            return (0.0 if math.isinf(best) else best) + self.penalty
        return d

    def time_from(self, section: str, dest: str) -> float:
        """Travel time from entering ``section`` to the end of ``dest``."""
        return self.times[section] + self.time_after(section, dest)

    def path(self, source: str, dest: str) -> tuple[str, ...]:
        try:
            return tuple(nx.dijkstra_path(self.graph, source, dest,
                                          weight=lambda u, v, d: self.times[v]))
        except nx.NetworkXNoPath:
            reach = [e for e in self.exits if e in self.after and source in self.after[e]]
            if not reach:
                return (source,)
            best = min(reach, key=lambda e: (self.after[e][source], e))
            return tuple(nx.dijkstra_path(self.graph, source, best,
                                          weight=lambda u, v, d: self.times[v]))

    def route_time(self, sections) -> float:
        return sum(self.times[s] for s in sections)


class _Streams:
    """Independent named random streams derived from one scenario seed."""

    def __init__(self, seed: int, level: int):
        self.seed, self.level = seed, level
        self._gens: dict[str, np.random.Generator] = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        g = self._gens.get(name)
        if g is None:
            ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, self.level,
                                         zlib.crc32(name.encode())])
            g = self._gens[name] = np.random.default_rng(ss)
        return g


@dataclass
class _Arrival:
    entrance: str
    style: DrivingStyle
    factor: float
    destination: str


@dataclass
class _Snapshot:
    lanes: dict[str, list[Vehicle]]
    pos: dict[str, list[float]]
    speed: dict[str, list[float]]
    length: dict[str, list[float]]
    index: dict[int, int]
    stats: dict[tuple[str, float], LaneStats] = field(default_factory=dict)


class World:
    def __init__(self, scenario: Scenario, level: int = 0, demand_factor: float = 1.0,
                 record: bool = False):
        self.sc = scenario
        # (time, id, lane, pos, speed, acc) of every vehicle at the start of each step
        self.trajectory: list[tuple] | None = [] if record else None
        self.net = scenario.network
        self.level = level
        self.dt = scenario.dt
        self.time = 0.0
        self.steps = 0
        self.rng = _Streams(scenario.seed, level)
        self.nav = Navigator(self.net, scenario.unreachable_penalty)
        self.lanes: dict[str, list[Vehicle]] = {lid: [] for lid in self.net.lanes}
        self.vehicles: dict[int, Vehicle] = {}
        self.next_id = 0
        self.spawned = 0
        self.exited = 0
        self.events: list[LaneChangeEvent] = []
        self.exits_by_section: dict[str, int] = {}
        self.travel_times: list[float] = []
        self.demand = {e: q * demand_factor for e, q in sorted(scenario.demand.items())}
        self.next_arrival: dict[str, float] = {}
        self.queues: dict[str, deque[_Arrival]] = {e: deque() for e in self.demand}
        for e, q in self.demand.items():
            self.next_arrival[e] = self._draw_gap(q)
        self.inflows: dict[str, deque[float]] = {s: deque() for s in self.net.sections}
        self.decide_every = max(1, round(scenario.decision_interval / self.dt))
        self.nav_every = max(1, round(scenario.navigation_interval / self.dt))
        self.sample_every = max(1, round(1.0 / self.dt))
        self.measured = set(scenario.measured_sections)
        self.dx_km = scenario.measured_length_km
        self.windows: list[Window] = []
        self._win_density = 0.0
        self._win_samples = 0
        self._win_events = 0
        self._win_start = scenario.measurement.warmup
        self.min_gap_seen = math.inf
        self._feeders: dict[str, list[str]] = {lid: [] for lid in self.net.lanes}
        for lid, ln in sorted(self.net.lanes.items()):
            for s in ln.successors:
                entry = self._entry_from(lid, s)
                if entry is not None and lid not in self._feeders[entry]:
                    self._feeders[entry].append(lid)
        self._style_names = sorted(scenario.style_mix)
        self._style_p = np.array([scenario.style_mix[n] for n in self._style_names])

    # --- helpers --------------------------------------------------------------

    def _draw_gap(self, q: float) -> float:
        if q <= 0:
            return math.inf
        return float(self.rng["spawn"].exponential(3600.0 / q))

    def active(self) -> int:
        return len(self.vehicles)

    def lane_of(self, veh: Vehicle):
        return self.net.lanes[veh.lane]

    def _next_section(self, veh: Vehicle) -> str | None:
        return veh.route.next_after(self.net.lanes[veh.lane].section)

    def _compatible(self, lane_id: str, veh: Vehicle) -> bool:
        ln = self.net.lanes[lane_id]
        nxt = veh.route.next_after(ln.section)
        return nxt is None or nxt in ln.successors

    def _downstream(self, veh: Vehicle, lane_id: str) -> float:
        """Expected time from the end of ``lane_id`` to the vehicle's destination."""
        ln = self.net.lanes[lane_id]
        dest = veh.route.destination
        nxt = veh.route.next_after(ln.section)
        if not ln.successors:
            return 0.0 if nxt is None and ln.section == dest else self.sc.unreachable_penalty
        if nxt is not None and nxt in ln.successors:
            return self.nav.route_time(veh.route.remainder(ln.section))
        return min(self.nav.time_from(s, dest) for s in ln.successors)

    def _exit_choice(self, veh: Vehicle, lane_id: str) -> str | None:
        ln = self.net.lanes[lane_id]
        if not ln.successors:
            return None
        nxt = veh.route.next_after(ln.section)
        if nxt in ln.successors:
            return nxt
        dest = veh.route.destination
        return min(ln.successors, key=lambda s: (self.nav.time_from(s, dest), s))

    def _entry_lane(self, veh: Vehicle, section: str) -> str | None:
        return self._entry_from(veh.lane, section)

    def _entry_from(self, lane_id: str, section: str) -> str | None:
        """Lane entered in the next section: the one at the same index, or the nearest."""
        sec = self.net.sections[section]
        if sec.virtual:
            return None
        idx = self.net.lane_index(lane_id)
        return min(sec.lanes, key=lambda l: (abs(self.net.lane_index(l) - idx), self.net.lane_index(l)))

    def _beyond(self, lanes: dict[str, list[Vehicle]], veh: Vehicle, lane_id: str) -> Vehicle | None:
        """First vehicle past the end of ``lane_id`` on the vehicle's way, in this lane's coordinates."""
        nxt = self._exit_choice(veh, lane_id)
        if nxt is None or self.net.sections[nxt].virtual:
            return None
        vs = lanes[self._entry_from(lane_id, nxt)]
        if not vs:
            return None
        return replace(vs[0], pos=vs[0].pos + self.net.lanes[lane_id].length)

    def _upstream(self, lanes: dict[str, list[Vehicle]], lane_id: str) -> Vehicle | None:
        """Closest vehicle in a lane feeding ``lane_id``, in this lane's coordinates."""
        best = None
        for f in self._feeders[lane_id]:
            vs = lanes[f]
            if vs:
                p = vs[-1].pos - self.net.lanes[f].length
                if best is None or p > best.pos:
                    best = replace(vs[-1], pos=p)
        return best

    def _leads_on(self, lane_id: str, route: Route) -> bool:
        """Whether driving straight through from ``lane_id`` keeps the vehicle on ``route``.

        Arrivals enter pre-positioned for the first fork on their route.
        """
        for _ in range(len(route.sections)):
            ln = self.net.lanes[lane_id]
            nxt = route.next_after(ln.section)
            if nxt is None:
                return True
            if nxt not in ln.successors:
                return False
            if self.net.sections[nxt].virtual:
                return True
            lane_id = self._entry_from(lane_id, nxt)
        return True

    def _make_vehicle(self, arr: _Arrival, lane: str, speed: float, route: Route) -> Vehicle:
        st = arr.style
        v0 = st.desired_speed * arr.factor
        base = carfollow.preset(st.carfollow)
        if isinstance(base, IdmParams):
            cf = replace(base, v0=v0)
            idm = cf
        else:
            cf = base.scaled_to(v0)
            idm = replace(carfollow.PRESETS["idm"], v0=v0)
        veh = Vehicle(self.next_id, lane, 0.0, speed, self.sc.vehicle_length, st, cf, idm, route,
                      spawn_time=self.time)
        self.next_id += 1
        return veh

    # --- step ------------------------------------------------------------------

    def step(self):
        if self.trajectory is not None:
            t = round(self.time, 6)
            self.trajectory.extend((t, v.id, v.lane, v.pos, v.speed, v.acc)
                                   for vid, v in sorted(self.vehicles.items()))
        if self.steps % self.decide_every == 0 and self.vehicles:
            snap = self._snapshot()
            if self.sc.model == "mcdm":
                intents = self._mcdm_decisions(snap)
            else:
                intents = self._mobil_decisions(snap)
            self._apply(intents)
        self._accelerations()
        self._integrate()
        self._transitions()
        self.steps += 1
        self.time = self.steps * self.dt
        self._spawn()
        self._check()
        if self.steps % self.sample_every == 0:
            self._sample()
        if self.steps % self.nav_every == 0:
            self._navigate()

    def run(self, duration: float | None = None):
        n = round((self.sc.duration if duration is None else duration) / self.dt)
        for _ in range(n):
            self.step()
        self.finish()
        return self

    def finish(self):
        """Close a partially filled measurement window."""
        if self._win_samples:
            self.windows.append(Window(self.level, self._win_start, self.time,
                                       self._win_density / self._win_samples, self._win_events,
                                       self._win_samples))
            self._win_start = self.time
            self._win_density = 0.0
            self._win_samples = 0
            self._win_events = 0

    # --- decisions -------------------------------------------------------------

    def _snapshot(self) -> _Snapshot:
        lanes, pos, spd, lng, index = {}, {}, {}, {}, {}
        for lid, vs in self.lanes.items():
            lanes[lid] = list(vs)
            pos[lid] = [v.pos for v in vs]
            spd[lid] = [v.speed for v in vs]
            lng[lid] = [v.length for v in vs]
            for i, v in enumerate(vs):
                index[v.id] = i
        return _Snapshot(lanes, pos, spd, lng, index)

    def _stats(self, snap: _Snapshot, lane_id: str, x: float) -> LaneStats:
        return lane_stats(snap.pos[lane_id], snap.speed[lane_id], snap.length[lane_id], x,
                          self.net.lanes[lane_id].length)

    def _around(self, snap: _Snapshot, veh: Vehicle, lane_id: str) -> tuple[Vehicle | None, Vehicle | None]:
        """(leader, follower) in a lane for a slot level with the vehicle's front bumper.

        Neighbors across the lane's ends are included, shifted into the lane's coordinates.
        """
        j = bisect.bisect_right(snap.pos[lane_id], veh.pos)
        vs = snap.lanes[lane_id]
        lead = vs[j] if j < len(vs) else self._beyond(snap.lanes, veh, lane_id)
        foll = vs[j - 1] if j > 0 else self._upstream(snap.lanes, lane_id)
        return lead, foll

    def _own(self, snap: _Snapshot, veh: Vehicle) -> tuple[Vehicle | None, Vehicle | None]:
        vs = snap.lanes[veh.lane]
        i = snap.index[veh.id]
        lead = vs[i + 1] if i + 1 < len(vs) else self._beyond(snap.lanes, veh, veh.lane)
        foll = vs[i - 1] if i > 0 else self._upstream(snap.lanes, veh.lane)
        return lead, foll

    def _candidate_lanes(self, veh: Vehicle) -> list[str]:
        ln = self.net.lanes[veh.lane]
        if veh.pos + veh.speed * self.dt >= ln.length:
            return []  # reaches the lane end within this step: too late to move over
        out = []
        for tid in (ln.right, ln.left):
            if tid is not None and veh.pos <= self.net.lanes[tid].length:
                out.append(tid)
        return out

    def _context(self, snap: _Snapshot, veh: Vehicle, tid: str,
                 cur_stats: LaneStats, lead: Vehicle | None, foll: Vehicle | None) -> IncentiveContext:
        ln = self.net.lanes[veh.lane]
        x = veh.pos
        relation = lane_relation(self.net, veh.lane, tid, veh.route.next_after(ln.section))
        t_lead, t_foll = self._around(snap, veh, tid)
        cur_leader = Neighbor(lead.pos - lead.length - x, lead.speed) if lead else None
        tgt_leader = Neighbor(t_lead.pos - t_lead.length - x, t_lead.speed) if t_lead else None
        new_foll = Neighbor(x - veh.length - t_foll.pos, t_foll.speed) if t_foll else None

        related = []
        # giving way only counts when the ego holds its lane up (slower than the lane
        # average) and the follower is blocked (inside its desired following gap)
        g = x - veh.length - foll.pos if foll is not None else math.inf
        if (foll is not None and veh.speed < cur_stats.mean_speed
                and g < carfollow.desired_gap(foll.idm, foll.speed, foll.speed - veh.speed)):
            before = predicted_speed(foll.cf, Neighbor(g, veh.speed))
            after = predicted_speed(foll.cf, Neighbor(g + veh.length + cur_leader.gap, lead.speed)
                                    if lead else None)
            related.append(RelatedVehicle(before, after, foll.desired))
        g = x - veh.length - t_foll.pos if t_foll is not None else math.inf
        # a new follower only counts if the ego would land inside its following gap
        if t_foll is not None and g < carfollow.desired_gap(t_foll.idm, t_foll.speed,
                                                             t_foll.speed - veh.speed):
            before = predicted_speed(t_foll.cf, Neighbor(g + veh.length + tgt_leader.gap, t_lead.speed)
                                     if t_lead else None)
            after = predicted_speed(t_foll.cf, Neighbor(max(g, 0.0), veh.speed))
            related.append(RelatedVehicle(before, after, t_foll.desired))
        related.extend(self._mergers(snap, veh, lead))

        return IncentiveContext(
            speed=veh.speed,
            model=veh.cf,
            current_stats=cur_stats,
            target_stats=self._stats(snap, tid, x),
            relation=relation,
            remaining=remaining_distance(ln, x),
            downstream_current=self._downstream(veh, veh.lane),
            downstream_target=self._downstream(veh, tid),
            current_leader=cur_leader,
            target_leader=tgt_leader,
            new_follower=new_foll,
            related=tuple(related),
        )

    def _mergers(self, snap: _Snapshot, veh: Vehicle, lead: Vehicle | None) -> list[RelatedVehicle]:
        """Vehicles off their route next to the ego lane, for which the ego blocks the way back."""
        out = []
        ln = self.net.lanes[veh.lane]
        for nid in (ln.right, ln.left):
            if nid is None:
                continue
            i = bisect.bisect_left(snap.pos[nid], veh.pos - SIGHT)
            j = bisect.bisect_right(snap.pos[nid], veh.pos)
            for m in snap.lanes[nid][i:j]:
                if self._compatible(nid, m) or not self._compatible(veh.lane, m):
                    continue
                # the ego is the first vehicle ahead of m's prospective slot
                g_ego = veh.pos - veh.length - m.pos
                if g_ego < 0:
                    continue
                before = predicted_speed(m.cf, Neighbor(g_ego, veh.speed))
                after = predicted_speed(m.cf, Neighbor(lead.pos - lead.length - m.pos, lead.speed)
                                        if lead else None)
                out.append(RelatedVehicle(before, after, m.desired))
        return out

    def _mcdm_decisions(self, snap: _Snapshot) -> list[tuple[Vehicle, DecisionOutcome]]:
        intents = []
        for vid in sorted(self.vehicles):
            veh = self.vehicles[vid]
            veh.sync_speed = None
            since = self.time - veh.last_change
            tids = self._candidate_lanes(veh)
            if not tids or since < veh.style.cooldown:
                continue
            lead, foll = self._own(snap, veh)
            cur = self._stats(snap, veh.lane, veh.pos)
            cands = [Candidate(t, self._context(snap, veh, t, cur, lead, foll)) for t in tids]
            out = decide(cands, veh.style, self.sc.safety, since)
            if out.synchronize:
                ts = next(c.ctx.target_stats for c in cands if c.lane == out.considered)
                veh.sync_speed = ts.mean_speed if ts.count else None
            if out.change:
                intents.append((veh, out))
        return intents

    def _mobil_candidate(self, snap: _Snapshot, veh: Vehicle, tid: str,
                         lead: Vehicle | None, foll: Vehicle | None) -> MobilCandidate:
        x = veh.pos
        ln = self.net.lanes[veh.lane]
        t_lead, t_foll = self._around(snap, veh, tid)
        relation = lane_relation(self.net, veh.lane, tid, veh.route.next_after(ln.section))
        return MobilCandidate(
            lane=tid,
            relation=relation,
            to_right=(tid == ln.right),
            speed=veh.speed,
            idm=veh.idm,
            length=veh.length,
            leader=Car(lead.pos - lead.length - x, lead.speed) if lead else None,
            new_leader=Car(t_lead.pos - t_lead.length - x, t_lead.speed) if t_lead else None,
            follower=Car(x - veh.length - foll.pos, foll.speed, foll.idm) if foll else None,
            new_follower=Car(x - veh.length - t_foll.pos, t_foll.speed, t_foll.idm) if t_foll else None,
        )

    def _mobil_decisions(self, snap: _Snapshot) -> list[tuple[Vehicle, DecisionOutcome]]:
        intents = []
        for vid in sorted(self.vehicles):
            veh = self.vehicles[vid]
            veh.sync_speed = None
            since = self.time - veh.last_change
            tids = self._candidate_lanes(veh)
            if not tids or since < veh.style.cooldown:
                continue
            lead, foll = self._own(snap, veh)
            cands = [self._mobil_candidate(snap, veh, t, lead, foll) for t in tids]
            target, total = mobil_decide(cands, self.sc.mobil)
            if target is not None:
                intents.append((veh, DecisionOutcome(target, G=total, considered=target)))
        return intents

    def _live_around(self, lane_id: str, veh: Vehicle):
        vs = self.lanes[lane_id]
        j = bisect.bisect_right(vs, veh.pos, key=lambda v: v.pos)
        lead = vs[j] if j < len(vs) else self._beyond(self.lanes, veh, lane_id)
        foll = vs[j - 1] if j > 0 else self._upstream(self.lanes, lane_id)
        return lead, foll

    def _still_safe(self, veh: Vehicle, tid: str) -> bool:
        """Re-check the target gap against changes already applied this step."""
        lead, foll = self._live_around(tid, veh)
        x = veh.pos
        if self.sc.model == "mcdm":
            ctx = IncentiveContext(
                speed=veh.speed, model=veh.cf, current_stats=LaneStats.empty(), target_stats=None,
                relation=LaneRelation.SYMMETRIC, remaining=0.0, downstream_current=0.0,
                downstream_target=0.0,
                target_leader=Neighbor(lead.pos - lead.length - x, lead.speed) if lead else None,
                new_follower=Neighbor(x - veh.length - foll.pos, foll.speed) if foll else None)
            return gap_acceptable(ctx, self.sc.safety)
        p = self.sc.mobil
        if lead is not None and lead.pos - lead.length - x < p.min_gap:
            return False
        if foll is not None:
            g = x - veh.length - foll.pos
            if g < p.min_gap:
                return False
            c = MobilCandidate(tid, LaneRelation.SYMMETRIC, False, veh.speed, veh.idm, veh.length,
                               new_leader=Car(lead.pos - lead.length - x, lead.speed) if lead else None,
                               new_follower=Car(g, foll.speed, foll.idm))
            _, a_nf = incentive(c, p)
            if a_nf < -p.b_safe:
                return False
        return True

    def _apply(self, intents: list[tuple[Vehicle, DecisionOutcome]]):
        for veh, out in sorted(intents, key=lambda it: it[0].id):
            tid = out.target
            if not self._still_safe(veh, tid):
                continue
            src = veh.lane
            section = self.net.lanes[src].section
            was_ok = self._compatible(src, veh)
            now_ok = self._compatible(tid, veh)
            cls = SYMMETRIC
            if was_ok and not now_ok:
                cls = PENDING
            ev = LaneChangeEvent(self.time, veh.id, src, tid, out.G, cls,
                                 out.p_back if cls == PENDING else float("nan"),
                                 section, self.level)
            if now_ok and veh.pending is not None:
                veh.pending.classification = RETURNED
                veh.pending = None
            if cls == PENDING:
                veh.pending = ev
            self.lanes[src].remove(veh)
            dst = self.lanes[tid]
            dst.insert(bisect.bisect_right(dst, veh.pos, key=lambda v: v.pos), veh)
            veh.lane = tid
            veh.last_change = self.time
            veh.sync_speed = None
            self.events.append(ev)
            if section in self.measured and self.time >= self._win_start:
                self._win_events += 1

    # --- motion ----------------------------------------------------------------

    def _front_leader(self, veh: Vehicle) -> tuple[float, float] | None:
        """Gap and speed of the first vehicle beyond the lane end, if the vehicle continues."""
        ln = self.net.lanes[veh.lane]
        nxt = self._exit_choice(veh, veh.lane)
        if nxt is None or self.net.sections[nxt].virtual:
            return None
        entry = self._entry_lane(veh, nxt)
        vs = self.lanes[entry]
        if not vs:
            return None
        last = vs[0]
        return ln.length - veh.pos + last.pos - last.length, last.speed

    def _accelerations(self):
        for vs in self.lanes.values():
            n = len(vs)
            for i, veh in enumerate(vs):
                if i + 1 < n:
                    lead = vs[i + 1]
                    gap, lv = lead.pos - lead.length - veh.pos, lead.speed
                else:
                    fl = self._front_leader(veh)
                    gap, lv = fl if fl else (math.inf, 0.0)
                if gap <= 0:
                    raise InvariantBreach(self._dump(veh.lane, f"vehicle {veh.id} overlaps its leader"))
                a = carfollow.accel(veh.cf, veh.speed, gap, veh.speed - lv if gap < math.inf else 0.0)
                if veh.sync_speed is not None:
                    a = min(a, SYNC_GAIN * (veh.sync_speed - veh.speed))
                veh.acc = min(ACCEL_MAX, max(ACCEL_MIN, a))

    def _integrate(self):
        dt = self.dt
        for vs in self.lanes.values():
            for veh in vs:
                veh.speed = max(0.0, veh.speed + veh.acc * dt)
                veh.pos += veh.speed * dt

    def _transitions(self):
        for lid in self.net.lanes:
            vs = self.lanes[lid]
            ln = self.net.lanes[lid]
            while vs and vs[-1].pos >= ln.length:
                veh = vs.pop()
                self._leave_section(veh, ln)

    def _leave_section(self, veh: Vehicle, ln):
        nxt = self._exit_choice(veh, ln.id)
        planned = veh.route.next_after(ln.section)
        if veh.pending is not None:
            veh.pending.classification = ROUTE_CHANGED
            veh.pending = None
        if nxt is not None and nxt != planned:
            veh.route = Route((ln.section,) + self.nav.path(nxt, veh.route.destination))
        if nxt is not None:
            self.inflows[nxt].append(self.time)
        if nxt is None or self.net.sections[nxt].virtual:
            del self.vehicles[veh.id]
            self.exited += 1
            end = nxt if nxt is not None else ln.section
            self.exits_by_section[end] = self.exits_by_section.get(end, 0) + 1
            self.travel_times.append(self.time - veh.spawn_time)
            return
        entry = self._entry_lane(veh, nxt)
        over = veh.pos - ln.length
        vs = self.lanes[entry]
        if vs and vs[0].pos - vs[0].length <= over:
            raise InvariantBreach(self._dump(entry, f"vehicle {veh.id} enters {entry} onto a vehicle"))
        veh.lane = entry
        veh.pos = over
        veh.route = Route(veh.route.sections[veh.route.sections.index(nxt):])
        vs.insert(0, veh)

    def place(self, style: str, lane: str, pos: float, speed: float, destination: str,
              factor: float = 1.0) -> Vehicle:
        """Put a vehicle on the road directly, bypassing the arrival process (scripted setups)."""
        ln = self.net.lane(lane)
        if not 0 <= pos <= ln.length:
            raise ValueError(f"position {pos} outside lane {lane!r}")
        route = Route(self.nav.path(ln.section, destination))
        veh = self._make_vehicle(_Arrival(ln.section, self.sc.styles[style], factor, destination),
                                 lane, speed, route)
        veh.pos = pos
        vs = self.lanes[lane]
        vs.append(veh)
        vs.sort(key=lambda v: v.pos)
        self.vehicles[veh.id] = veh
        self.spawned += 1
        self._check()
        return veh

    # --- demand ----------------------------------------------------------------

    def _spawn(self):
        for ent in self.demand:
            while self.next_arrival[ent] <= self.time:
                self.queues[ent].append(self._arrival(ent))
                self.next_arrival[ent] += self._draw_gap(self.demand[ent])
            q = self.queues[ent]
            while q and self._release(q[0]):
                q.popleft()

    def _arrival(self, ent: str) -> _Arrival:
        i = int(self.rng["style"].choice(len(self._style_names), p=self._style_p))
        st = self.sc.styles[self._style_names[i]]
        factor = max(0.5, 1.0 + st.speed_spread * float(self.rng["speed"].standard_normal()))
        mix = self.sc.destinations.get(ent)
        if mix:
            names = sorted(mix)
            dest = names[int(self.rng["destination"].choice(len(names), p=[mix[n] for n in names]))]
        else:
            reach = sorted(e for e in self.nav.exits if ent in self.nav.after.get(e, {}))
            dest = reach[int(self.rng["destination"].integers(len(reach)))]
        return _Arrival(ent, st, factor, dest)

    def _release(self, arr: _Arrival) -> bool:
        route = Route(self.nav.path(arr.entrance, arr.destination))
        sec = self.net.sections[arr.entrance]
        lanes = ([l for l in sec.lanes if self._leads_on(l, route)]
                 or self.net.compatible_lanes(arr.entrance, route.next_after(arr.entrance))
                 or list(sec.lanes))
        v0 = arr.style.desired_speed * arr.factor
        best = None
        for lid in lanes:
            vs = self.lanes[lid]
            if vs:
                last = vs[0]
                v = min(v0, last.speed)
                room = last.pos - last.length
                need = 2.0 + v * 1.5
                if room < need:
                    continue
            else:
                v, room = v0, math.inf
            if best is None or room > best[1]:
                best = (lid, room, v)
        if best is None:
            return False
        lid, _, v = best
        veh = self._make_vehicle(arr, lid, v, route)
        self.lanes[lid].insert(0, veh)
        self.vehicles[veh.id] = veh
        self.spawned += 1
        self.inflows[arr.entrance].append(self.time)
        return True

    # --- bookkeeping ------------------------------------------------------------

    def _check(self):
        if self.spawned != len(self.vehicles) + self.exited:
            raise InvariantBreach(f"conservation broken: spawned={self.spawned} "
                                  f"active={len(self.vehicles)} exited={self.exited}")
        for lid, vs in self.lanes.items():
            for a, b in zip(vs, vs[1:]):
                gap = b.pos - b.length - a.pos
                if gap < self.min_gap_seen:
                    self.min_gap_seen = gap
                if gap < 0:
                    raise InvariantBreach(self._dump(lid, f"negative gap {gap:.3f} between "
                                                          f"{a.id} and {b.id}"))

    def _dump(self, lane_id: str, msg: str) -> str:
        rows = ", ".join(f"#{v.id}@{v.pos:.2f}m/{v.speed:.2f}mps" for v in self.lanes.get(lane_id, []))
        return f"t={self.time:.2f}s lane {lane_id}: {msg}; lane state: [{rows}]"

    def _sample(self):
        if self.time <= self._win_start:
            return
        n = sum(len(self.lanes[l]) for s in self.measured for l in self.net.sections[s].lanes)
        self._win_density += n / self.dx_km if self.dx_km > 0 else 0.0
        self._win_samples += 1
        window = self.sc.measurement.window
        if self.time >= self._win_start + window - 1e-9:
            self.windows.append(Window(self.level, self._win_start, self._win_start + window,
                                       self._win_density / self._win_samples, self._win_events,
                                       self._win_samples))
            self._win_start += window
            self._win_density = 0.0
            self._win_samples = 0
            self._win_events = 0

    def _navigate(self):
        horizon = self.sc.flow_window
        span = min(horizon, self.time)
        flows = {}
        for sid, times in self.inflows.items():
            while times and times[0] < self.time - horizon:
                times.popleft()
            flows[sid] = len(times) * 3600.0 / span if span > 0 else 0.0
        self.nav.update(flows)


@dataclass
class RunResult:
    scenario: Scenario
    events: list[LaneChangeEvent]
    windows: list[Window]
    spawned: int = 0
    exited: int = 0
    active: int = 0
    min_gap: float = math.inf
    travel_times: list[float] = field(default_factory=list)
    worlds: list[World] = field(default_factory=list, repr=False)

    @property
    def bins(self):
        from .metrics import lane_change_rate
        return lane_change_rate(self.windows, self.scenario.measured_length_km,
                                self.scenario.measurement.bin_width)

    @property
    def measured_events(self) -> int:
        return sum(w.events for w in self.windows)


def run(scenario: Scenario, keep_worlds: bool = False, record: bool = False) -> RunResult:
    """Simulate every demand level as an independent run and pool the results.

    With ``record`` (which implies ``keep_worlds``) each world keeps its trajectory.
    """
    scenario.validate()
    res = RunResult(scenario, [], [])
    for level, factor in enumerate(scenario.demand_levels):
        w = World(scenario, level, factor, record=record)
        w.run()
        log.info("level %d (x%.3g): spawned=%d exited=%d events=%d", level, factor,
                 w.spawned, w.exited, len(w.events))
        res.events.extend(w.events)
        res.windows.extend(w.windows)
        res.spawned += w.spawned
        res.exited += w.exited
        res.active += w.active()
        res.min_gap = min(res.min_gap, w.min_gap_seen)
        res.travel_times.extend(w.travel_times)
        if keep_worlds or record:
            res.worlds.append(w)
    return res
