"""Longitudinal models: IDM, the optimal-velocity function and FVDM."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

ACCEL_MIN = -9.0
ACCEL_MAX = 4.0


@dataclass(frozen=True)
class IdmParams:
    a: float = 1.4      # max acceleration [m/s^2]
    b: float = 2.0      # comfortable deceleration [m/s^2]
    v0: float = 30.0    # desired speed [m/s]
    T: float = 1.5      # safe time headway [s]
    s0: float = 2.0     # jam distance [m]
    delta: float = 4.0  # acceleration exponent

    def __post_init__(self):
        if min(self.a, self.b, self.v0, self.T, self.s0) <= 0:
            raise ValueError(f"IDM parameters must be positive: {self}")
        if self.delta < 1:
            raise ValueError("IDM exponent delta must be >= 1")


@dataclass(frozen=True)
class OvmParams:
    V1: float = 6.75
    V2: float = 7.91
    C1: float = 0.13
    C2: float = 1.57
    l_c: float = 5.0
    kappa: float = 0.41
    lam: float = 0.5
    s0: float = 2.0  # used only for gap acceptance, not by the dynamics

    def __post_init__(self):
        if self.V1 + self.V2 <= 0:
            raise ValueError("V1 + V2 must be positive")
        if self.C1 <= 0:
            raise ValueError("C1 must be positive")
        if self.kappa < 0 or self.lam < 0:
            raise ValueError("kappa and lambda must be non-negative")

    @property
    def vmax(self) -> float:
        return self.V1 + self.V2

    def scaled_to(self, vmax: float) -> "OvmParams":
        """Same shape with the asymptotic speed V1 + V2 moved to ``vmax``."""
        k = vmax / self.vmax
        return replace(self, V1=self.V1 * k, V2=self.V2 * k)


def desired_gap(p: IdmParams, v: float, dv: float) -> float:
    s_star = p.s0 + v * p.T + v * dv / (2.0 * math.sqrt(p.a * p.b))
    return max(p.s0, s_star)


def idm_accel(p: IdmParams, v: float, s: float = math.inf, dv: float = 0.0) -> float:
    """IDM acceleration for speed ``v``, bumper gap ``s`` and approach rate ``dv``.

    ``dv`` is ego speed minus leader speed. Pass ``s=math.inf`` for a free road.
    """
    if s <= 0:
        raise ValueError(f"non-positive gap {s!r}: vehicles overlap")
    free = 1.0 - (v / p.v0) ** p.delta
    if math.isinf(s):
        return p.a * free
    return p.a * (free - (desired_gap(p, v, dv) / s) ** 2)


def ovm_velocity(p: OvmParams, s: float) -> float:
    if math.isinf(s):
        return p.V1 + p.V2
    return max(0.0, p.V1 + p.V2 * math.tanh(p.C1 * (s - p.l_c) - p.C2))


def fvdm_accel(p: OvmParams, v: float, s: float = math.inf, dv: float = 0.0) -> float:
    """Full velocity difference model: relaxation toward V(s) minus a closing-speed term."""
    if s <= 0:
        raise ValueError(f"non-positive gap {s!r}: vehicles overlap")
    return p.kappa * (ovm_velocity(p, s) - v) - p.lam * dv


def idm_equilibrium_speed(p: IdmParams, s: float) -> float:
    """Speed at which IDM acceleration vanishes for a fixed gap with an equal-speed leader."""
    if math.isinf(s):
        return p.v0
    if s <= p.s0:
        return 0.0
    # g(v) = -accel/a is convex and increasing in v, so Newton from v0 descends
    # monotonically onto the root without overshooting
    v = p.v0
    for _ in range(100):
        r = (p.s0 + v * p.T) / s
        g = (v / p.v0) ** p.delta + r * r - 1.0
        dg = p.delta * (v / p.v0) ** (p.delta - 1) / p.v0 + 2.0 * r * p.T / s
        step = g / dg
        v_new = max(0.0, v - step)
        if abs(v - v_new) < 1e-14 * max(1.0, v):
            return v_new
        v = v_new
    return v


def equilibrium_speed(p: IdmParams | OvmParams, s: float) -> float:
    if isinstance(p, IdmParams):
        return idm_equilibrium_speed(p, s)
    return ovm_velocity(p, s)


def accel(p: IdmParams | OvmParams, v: float, s: float = math.inf, dv: float = 0.0) -> float:
    if isinstance(p, IdmParams):
        return idm_accel(p, v, s, dv)
    return fvdm_accel(p, v, s, dv)


def desired_speed(p: IdmParams | OvmParams) -> float:
    return p.v0 if isinstance(p, IdmParams) else p.vmax


def min_gap(p: IdmParams | OvmParams) -> float:
    return p.s0


PRESETS: dict[str, IdmParams | OvmParams] = {
    "idm": IdmParams(),
    "idm_urban": IdmParams(v0=13.9, a=1.2, T=1.5),
    "fvdm": OvmParams(),
}


def preset(name: str) -> IdmParams | OvmParams:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown car-following preset {name!r}; "
                       f"known: {sorted(PRESETS)}") from None
