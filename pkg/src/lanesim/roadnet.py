"""Lane graph for multi-lane road sections.

A network is a set of sections. Simulated sections own lanes; sections without
lanes are virtual links that only exist for route bookkeeping (vehicles leave
the simulated area when they enter one). Every section doubles as a route
segment with a volume-delay travel time.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from pathlib import Path


class NetworkError(ValueError):
    """Raised for malformed network documents."""


class LaneRelation(enum.Enum):
    SYMMETRIC = "symmetric"
    ASYMMETRIC = "asymmetric"
    NOT_ADJACENT = "not_adjacent"


@dataclass(frozen=True)
class Lane:
    id: str
    section: str
    length: float
    successors: tuple[str, ...] = ()
    left: str | None = None
    right: str | None = None
    speed_limit: float = 13.9
    decision_point: float | None = None

    @property
    def stop_position(self) -> float:
        """Longitudinal position where the remaining distance S reaches zero."""
        return self.length if self.decision_point is None else self.decision_point


@dataclass(frozen=True)
class Section:
    id: str
    lanes: tuple[str, ...] = ()
    successors: tuple[str, ...] = ()
    entrance: bool = False
    free_flow_time: float = 0.0
    capacity: float = 1800.0
    k1: float = 0.15
    k2: float = 4.0
    base_flow: float = 0.0

    @property
    def virtual(self) -> bool:
        return not self.lanes


@dataclass(frozen=True)
class RouteSegment:
    section: str
    free_flow_time: float
    flow: float
    capacity: float
    k1: float = 0.15
    k2: float = 4.0

    def __post_init__(self):
        if self.flow < 0:
            raise ValueError(f"segment {self.section}: negative flow {self.flow}")
        if self.capacity <= 0:
            raise ValueError(f"segment {self.section}: capacity must be positive")
        if self.k1 < 0 or self.k2 < 1:
            raise ValueError(f"segment {self.section}: need k1 >= 0 and k2 >= 1")
        if self.free_flow_time <= 0:
            raise ValueError(f"segment {self.section}: free-flow time must be positive")


@dataclass(frozen=True)
class Route:
    sections: tuple[str, ...]
    free_flow_times: tuple[float, ...] = ()

    @property
    def origin(self) -> str:
        return self.sections[0]

    @property
    def destination(self) -> str:
        return self.sections[-1]

    def next_after(self, section: str) -> str | None:
        try:
            i = self.sections.index(section)
        except ValueError:
            return None
        return self.sections[i + 1] if i + 1 < len(self.sections) else None

    def remainder(self, section: str) -> tuple[str, ...]:
        """Sections still to be driven after ``section``."""
        i = self.sections.index(section)
        return self.sections[i + 1:]


@dataclass
class Network:
    sections: dict[str, Section]
    lanes: dict[str, Lane]
    _lane_index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for sec in self.sections.values():
            for i, lid in enumerate(sec.lanes):
                self._lane_index[lid] = i

    def lane(self, lane_id: str) -> Lane:
        try:
            return self.lanes[lane_id]
        except KeyError:
            raise KeyError(f"unknown lane id {lane_id!r}") from None

    def section(self, section_id: str) -> Section:
        try:
            return self.sections[section_id]
        except KeyError:
            raise KeyError(f"unknown section id {section_id!r}") from None

    def lane_index(self, lane_id: str) -> int:
        """Position of the lane within its section, 0 = rightmost."""
        return self._lane_index[lane_id]

    def section_successors(self, section_id: str) -> tuple[str, ...]:
        sec = self.section(section_id)
        if sec.virtual:
            return sec.successors
        out: list[str] = []
        for lid in sec.lanes:
            for s in self.lanes[lid].successors:
                if s not in out:
                    out.append(s)
        return tuple(out)

    @property
    def entrances(self) -> list[str]:
        return [s.id for s in self.sections.values() if s.entrance]

    @property
    def exits(self) -> list[str]:
        return [s.id for s in self.sections.values() if not self.section_successors(s.id)]

    def neighbors(self, lane_id: str) -> list[str]:
        ln = self.lane(lane_id)
        return [x for x in (ln.right, ln.left) if x is not None]

    def compatible_lanes(self, section_id: str, next_section: str | None) -> list[str]:
        """Lanes of a section from which ``next_section`` can be reached directly."""
        sec = self.section(section_id)
        if next_section is None:
            return list(sec.lanes)
        return [lid for lid in sec.lanes if next_section in self.lanes[lid].successors]

    def segment(self, section_id: str, flow: float = 0.0) -> RouteSegment:
        sec = self.section(section_id)
        return RouteSegment(sec.id, sec.free_flow_time, flow + sec.base_flow,
                            sec.capacity, sec.k1, sec.k2)

    def total_length(self) -> float:
        """Summed section length of all simulated sections (longest lane per section)."""
        return sum(max(self.lanes[l].length for l in s.lanes)
                   for s in self.sections.values() if not s.virtual)


def lane_relation(network: Network, a: str, b: str, route_section: str | None = None) -> LaneRelation:
    """Classify lane ``b`` as seen from a vehicle on lane ``a``.

    Without a route, ``b`` is symmetric for ``a`` when it reaches every
    section ``a`` reaches. With a route, it is symmetric when it still reaches
    the route's next section. The relation is viewpoint dependent: a lane
    serving two directions is symmetric for both single-direction neighbors,
    while they are asymmetric for it.
    """
    la, lb = network.lane(a), network.lane(b)
    if b not in (la.left, la.right):
        return LaneRelation.NOT_ADJACENT
    sa, sb = set(la.successors), set(lb.successors)
    if sa == sb:
        return LaneRelation.SYMMETRIC
    if route_section is not None:
        ok = route_section in sb
    else:
        ok = sa <= sb
    return LaneRelation.SYMMETRIC if ok else LaneRelation.ASYMMETRIC


def remaining_distance(lane: Lane, position: float) -> float:
    """Distance S left to the lane's decision point, clamped at zero."""
    return max(0.0, lane.stop_position - position)


# --- loading -----------------------------------------------------------------

def _line_of(text: str, key: str, value: str) -> int | None:
    m = re.search(r'"%s"\s*:\s*"%s"' % (re.escape(key), re.escape(value)), text)
    if m is None:
        return None
    return text.count("\n", 0, m.start()) + 1


def _fail(text: str, msg: str, key: str = "id", value: str | None = None, src: str = "<network>"):
    line = _line_of(text, key, value) if value is not None else None
    where = f"{src}:{line}" if line else src
    raise NetworkError(f"{where}: {msg}")


def parse_network(text: str, src: str = "<network>") -> Network:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise NetworkError(f"{src}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
    if not isinstance(doc, dict) or "sections" not in doc or "lanes" not in doc:
        raise NetworkError(f"{src}: document needs top-level 'sections' and 'lanes'")

    lanes_by_section: dict[str, list[str]] = {}
    lanes: dict[str, Lane] = {}
    for raw in doc["lanes"]:
        lid = str(raw.get("id", ""))
        if not lid:
            raise NetworkError(f"{src}: lane without id")
        if lid in lanes:
            _fail(text, f"duplicate lane id {lid!r}", value=lid, src=src)
        try:
            lane = Lane(
                id=lid,
                section=str(raw["section"]),
                length=float(raw["length_m"]),
                successors=tuple(raw.get("successors", [])),
                left=raw.get("left"),
                right=raw.get("right"),
                speed_limit=float(raw.get("speed_limit_mps", 13.9)),
                decision_point=(float(raw["decision_point_m"])
                                if raw.get("decision_point_m") is not None else None),
            )
        except KeyError as e:
            _fail(text, f"lane {lid!r} missing field {e.args[0]!r}", value=lid, src=src)
        if lane.length <= 0:
            _fail(text, f"lane {lid!r} has non-positive length", value=lid, src=src)
        if lane.speed_limit <= 0:
            _fail(text, f"lane {lid!r} has non-positive speed limit", value=lid, src=src)
        if lane.decision_point is not None and not 0 < lane.decision_point <= lane.length:
            _fail(text, f"lane {lid!r} decision point outside (0, length]", value=lid, src=src)
        lanes[lid] = lane
        lanes_by_section.setdefault(lane.section, []).append(lid)

    sections: dict[str, Section] = {}
    for raw in doc["sections"]:
        sid = str(raw.get("id", ""))
        if not sid:
            raise NetworkError(f"{src}: section without id")
        if sid in sections:
            _fail(text, f"duplicate section id {sid!r}", value=sid, src=src)
        own = lanes_by_section.get(sid, [])
        if own:
            ordered = _order_lanes(own, lanes, text, src)
            n = len(ordered)
            length = max(lanes[l].length for l in ordered)
            vmax = min(lanes[l].speed_limit for l in ordered)
            t0 = float(raw.get("free_flow_time_s", length / vmax))
            cap = float(raw.get("capacity_vph", 1800.0 * n))
            if raw.get("successors"):
                _fail(text, f"section {sid!r} has lanes; successors belong on lanes", value=sid, src=src)
        else:
            ordered = []
            if "free_flow_time_s" not in raw:
                _fail(text, f"virtual section {sid!r} needs free_flow_time_s", value=sid, src=src)
            t0 = float(raw["free_flow_time_s"])
            cap = float(raw.get("capacity_vph", 1800.0))
        sec = Section(
            id=sid,
            lanes=tuple(ordered),
            successors=tuple(raw.get("successors", [])),
            entrance=bool(raw.get("entrance", False)),
            free_flow_time=t0,
            capacity=cap,
            k1=float(raw.get("k1", 0.15)),
            k2=float(raw.get("k2", 4.0)),
            base_flow=float(raw.get("base_flow_vph", 0.0)),
        )
        if sec.capacity <= 0:
            _fail(text, f"section {sid!r}: capacity_vph must be positive", value=sid, src=src)
        if sec.free_flow_time <= 0:
            _fail(text, f"section {sid!r}: free_flow_time_s must be positive", value=sid, src=src)
        if sec.k1 < 0 or sec.k2 < 1:
            _fail(text, f"section {sid!r}: need k1 >= 0 and k2 >= 1", value=sid, src=src)
        if sec.entrance and sec.virtual:
            _fail(text, f"entrance section {sid!r} has no lanes", value=sid, src=src)
        sections[sid] = sec

    for sid in lanes_by_section:
        if sid not in sections:
            lid = lanes_by_section[sid][0]
            _fail(text, f"lane {lid!r} references unknown section {sid!r}", value=lid, src=src)

    for lane in lanes.values():
        for s in lane.successors:
            if s not in sections:
                _fail(text, f"lane {lane.id!r} has unknown successor {s!r}", value=lane.id, src=src)
    for sec in sections.values():
        for s in sec.successors:
            if s not in sections:
                _fail(text, f"section {sec.id!r} has unknown successor {s!r}", value=sec.id, src=src)

    net = Network(sections, lanes)
    if not net.entrances:
        raise NetworkError(f"{src}: no entrance section")
    _check_lane_terminals(net, text, src)
    return net


def _order_lanes(ids: list[str], lanes: dict[str, Lane], text: str, src: str) -> list[str]:
    for lid in ids:
        ln = lanes[lid]
        for side, other, back in (("left", ln.left, "right"), ("right", ln.right, "left")):
            if other is None:
                continue
            if other not in lanes:
                _fail(text, f"lane {lid!r}: {side} neighbor {other!r} does not exist", value=lid, src=src)
            if getattr(lanes[other], back) != lid:
                _fail(text, f"lane {lid!r}: {side} neighbor {other!r} does not point back "
                            f"(neighbor relation must be mutual)", value=lid, src=src)
            if lanes[other].section != ln.section:
                _fail(text, f"lane {lid!r}: neighbor {other!r} is in another section", value=lid, src=src)
    rightmost = [l for l in ids if lanes[l].right is None]
    if len(rightmost) != 1:
        _fail(text, f"section must have exactly one rightmost lane, found {rightmost}",
              value=ids[0], src=src)
    order = [rightmost[0]]
    while lanes[order[-1]].left is not None:
        order.append(lanes[order[-1]].left)
        if len(order) > len(ids):
            _fail(text, "neighbor chain loops", value=ids[0], src=src)
    if len(order) != len(ids):
        _fail(text, "section lanes are not one contiguous neighbor chain", value=ids[0], src=src)
    return order


def _check_lane_terminals(net: Network, text: str, src: str):
    # a lane with no successors must end the network, never dead-end mid-route
    for sec in net.sections.values():
        if sec.virtual:
            continue
        ends = [l for l in sec.lanes if not net.lanes[l].successors]
        if ends and len(ends) != len(sec.lanes):
            _fail(text, f"section {sec.id!r}: lanes {ends} have no successors but siblings do",
                  value=ends[0], src=src)


def load_network(path: str | Path) -> Network:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise NetworkError(f"network file not found: {path}") from None
    return parse_network(text, src=str(path))
