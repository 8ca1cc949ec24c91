"""Scenario documents: network reference, demand, driving-style mix and run settings."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from . import carfollow
from .decision import DrivingStyle, style_presets
from .incentives import SafetyParams
from .mobil import MobilParams
from .roadnet import Network, NetworkError, load_network, parse_network

MODELS = ("mcdm", "mobil")


class ScenarioError(ValueError):
    """Configuration problem detected before any stepping."""


@dataclass(frozen=True)
class Measurement:
    sections: tuple[str, ...] = ()
    window: float = 300.0
    bin_width: float = 5.0
    warmup: float = 0.0


@dataclass
class Scenario:
    name: str
    network: Network
    demand: dict[str, float]
    style_mix: dict[str, float]
    styles: dict[str, DrivingStyle]
    duration: float = 600.0
    dt: float = 0.1
    seed: int = 0
    model: str = "mcdm"
    demand_levels: tuple[float, ...] = (1.0,)
    destinations: dict[str, dict[str, float]] = field(default_factory=dict)
    decision_interval: float = 0.5
    navigation_interval: float = 10.0
    flow_window: float = 300.0
    vehicle_length: float = 5.0
    unreachable_penalty: float = 600.0
    safety: SafetyParams = SafetyParams()
    mobil: MobilParams = MobilParams()
    measurement: Measurement = Measurement()
    source: str = ""
    config_hash: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.model not in MODELS:
            raise ScenarioError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if not 0 < self.dt <= 0.5:
            raise ScenarioError(f"dt must lie in (0, 0.5], got {self.dt}")
        if self.duration < 0:
            raise ScenarioError("duration must be non-negative")
        total = sum(self.style_mix.values())
        if not self.style_mix or abs(total - 1.0) > 1e-9:
            raise ScenarioError(f"style fractions must sum to 1, got {total}")
        for name, frac in self.style_mix.items():
            if frac < 0:
                raise ScenarioError(f"negative fraction for style {name!r}")
            if name not in self.styles:
                raise ScenarioError(f"style mix names unknown style {name!r}")
        for st in self.styles.values():
            if st.carfollow not in carfollow.PRESETS:
                raise ScenarioError(f"style {st.name!r}: unknown car-following preset {st.carfollow!r}")
        for ent, q in self.demand.items():
            if ent not in self.network.sections or not self.network.sections[ent].entrance:
                raise ScenarioError(f"demand given for {ent!r}, which is not an entrance")
            if q < 0:
                raise ScenarioError(f"negative demand at {ent!r}")
        if any(lv < 0 for lv in self.demand_levels) or not self.demand_levels:
            raise ScenarioError("demand levels must be a non-empty list of non-negative factors")
        exits = set(self.network.exits)
        for ent, mix in self.destinations.items():
            if ent not in self.demand:
                raise ScenarioError(f"destination mix for {ent!r}, which has no demand")
            for d, frac in mix.items():
                if d not in exits:
                    raise ScenarioError(f"destination {d!r} is not an exit")
                if frac < 0:
                    raise ScenarioError(f"negative destination fraction for {d!r}")
            if abs(sum(mix.values()) - 1.0) > 1e-9:
                raise ScenarioError(f"destination fractions at {ent!r} must sum to 1")
        for s in self.measurement.sections:
            if s not in self.network.sections or self.network.sections[s].virtual:
                raise ScenarioError(f"measurement section {s!r} is not a simulated section")
        if self.decision_interval < self.dt - 1e-12:
            raise ScenarioError("decision interval shorter than dt")
        if self.measurement.window <= 0 or self.measurement.bin_width <= 0:
            raise ScenarioError("measurement window and bin width must be positive")

    @property
    def measured_sections(self) -> tuple[str, ...]:
        if self.measurement.sections:
            return self.measurement.sections
        return tuple(s.id for s in self.network.sections.values() if not s.virtual)

    @property
    def measured_length_km(self) -> float:
        net = self.network
        return sum(max(net.lanes[l].length for l in net.sections[s].lanes)
                   for s in self.measured_sections) / 1000.0

    def with_styles(self, **changes: DrivingStyle) -> "Scenario":
        styles = dict(self.styles)
        styles.update(changes)
        return replace(self, styles=styles)

    def scale_weights(self, c: float) -> "Scenario":
        return replace(self, styles={k: v.scaled(c) for k, v in self.styles.items()})


_STYLE_FIELDS = {f.name for f in fields(DrivingStyle)} - {"name"}


def _style(name: str, base: DrivingStyle | None, over: dict[str, Any]) -> DrivingStyle:
    unknown = set(over) - _STYLE_FIELDS - {"base"}
    if unknown:
        raise ScenarioError(f"style {name!r}: unknown fields {sorted(unknown)}")
    if base is None:
        missing = {"mu_route", "mu_speed", "mu_comfort", "mu_courtesy", "beta"} - set(over)
        if missing:
            raise ScenarioError(f"new style {name!r} needs {sorted(missing)} (or a 'base' preset)")
        base_kw: dict[str, Any] = {}
    else:
        base_kw = {f: getattr(base, f) for f in _STYLE_FIELDS}
    kw = {**base_kw, **{k: v for k, v in over.items() if k != "base"}}
    try:
        return DrivingStyle(name=name, **kw)
    except (TypeError, ValueError) as e:
        raise ScenarioError(str(e)) from None


def parse_scenario(doc: dict[str, Any], base_dir: Path, network: Network | None = None,
                   source: str = "<scenario>", config_hash: str = "") -> Scenario:
    if network is None:
        if "network" not in doc:
            raise ScenarioError(f"{source}: missing 'network'")
        net_ref = doc["network"]
        if isinstance(net_ref, dict):
            try:
                network = parse_network(json.dumps(net_ref), src=f"{source}#network")
            except NetworkError as e:
                raise ScenarioError(str(e)) from None
        else:
            path = (base_dir / net_ref)
            if not path.exists():
                raise ScenarioError(f"{source}: network file not found: {path}")
            try:
                network = load_network(path)
            except NetworkError as e:
                raise ScenarioError(str(e)) from None

    presets = style_presets()
    styles = dict(presets)
    for name, over in doc.get("styles", {}).items():
        base_name = over.get("base", name)
        base = styles.get(base_name)
        if "base" in over and base is None:
            raise ScenarioError(f"style {name!r}: unknown base preset {base_name!r}")
        styles[name] = _style(name, base, over)

    meas = doc.get("measurement", {})
    safety = doc.get("safety", {})
    mob = doc.get("mobil", {})
    try:
        scen = Scenario(
            name=str(doc.get("name", Path(source).stem)),
            network=network,
            demand={k: float(v) for k, v in doc.get("demand_vph", {}).items()},
            style_mix={k: float(v) for k, v in doc.get("style_mix", {"aggressive": 1 / 8.4,
                                                                      "conservative": 7.4 / 8.4}).items()},
            styles=styles,
            duration=float(doc.get("duration_s", 600.0)),
            dt=float(doc.get("dt_s", 0.1)),
            seed=int(doc.get("seed", 0)),
            model=str(doc.get("model", "mcdm")),
            demand_levels=tuple(float(x) for x in doc.get("demand_levels", [1.0])),
            destinations={k: {d: float(f) for d, f in v.items()}
                          for k, v in doc.get("destinations", {}).items()},
            decision_interval=float(doc.get("decision_interval_s", 0.5)),
            navigation_interval=float(doc.get("navigation_interval_s", 10.0)),
            flow_window=float(doc.get("flow_window_s", 300.0)),
            vehicle_length=float(doc.get("vehicle_length_m", 5.0)),
            unreachable_penalty=float(doc.get("unreachable_penalty_s", 600.0)),
            safety=SafetyParams(ttc_threshold=float(safety.get("ttc_threshold_s", 2.0)),
                                min_gap=float(safety.get("min_gap_m", 2.0))),
            mobil=MobilParams(politeness=float(mob.get("politeness", 0.3)),
                              a_threshold=float(mob.get("a_threshold", 0.1)),
                              b_safe=float(mob.get("b_safe", 4.0)),
                              right_bias=float(mob.get("right_bias", 0.0))),
            measurement=Measurement(sections=tuple(meas.get("sections", [])),
                                    window=float(meas.get("window_s", 300.0)),
                                    bin_width=float(meas.get("bin_width_veh_km", 5.0)),
                                    warmup=float(meas.get("warmup_s", 0.0))),
            source=source,
            config_hash=config_hash,
        )
    except ScenarioError as e:
        raise ScenarioError(f"{source}: {e}") from None
    except (TypeError, ValueError) as e:
        raise ScenarioError(f"{source}: {e}") from None
    return scen


def load_scenario(path: str | Path, seed: int | None = None, model: str | None = None) -> Scenario:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise ScenarioError(f"scenario file not found: {path}") from None
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
    if seed is not None:
        doc["seed"] = seed
    if model is not None:
        doc["model"] = model
    h = hashlib.sha256(raw)
    net_ref = doc.get("network")
    if isinstance(net_ref, str) and (path.parent / net_ref).exists():
        h.update((path.parent / net_ref).read_bytes())
    return parse_scenario(doc, path.parent, source=str(path), config_hash=h.hexdigest())

