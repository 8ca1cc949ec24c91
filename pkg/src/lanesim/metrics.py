"""Lane-change rate tables, event-log statistics and CSV output."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

METRICS_COLUMNS = ("bin_density_veh_km", "events", "dx_km", "dt_h", "rate_per_km_h")
EVENT_COLUMNS = ("time_s", "vehicle_id", "from_lane", "to_lane", "G", "classification",
                 "p_back", "level")


def rate(n: int, dx_km: float, dt_h: float) -> float:
    """Lane changes per kilometer per hour in one space-time cell."""
    if dx_km <= 0 or dt_h <= 0:
        raise ValueError("cell extent must be positive")
    return n / (dx_km * dt_h)


@dataclass(frozen=True)
class RateBin:
    density: float  # bin center [veh/km]
    events: int
    dx_km: float
    dt_h: float

    @property
    def rate(self) -> float:
        return rate(self.events, self.dx_km, self.dt_h)


def lane_change_rate(windows: Iterable, dx_km: float, bin_width: float = 5.0) -> list[RateBin]:
    """Pool measurement windows into density bins and return r(rho) per occupied bin.

    Each window needs ``density`` (mean veh/km over the window), ``events`` and
    ``start``/``end`` in seconds. Bins without any window are left out rather
    than reported as zero.
    """
    acc: dict[int, list[float]] = {}
    for w in windows:
        k = int(math.floor(w.density / bin_width))
        cell = acc.setdefault(k, [0, 0.0])
        cell[0] += w.events
        cell[1] += (w.end - w.start) / 3600.0
    return [RateBin((k + 0.5) * bin_width, int(n), dx_km, t) for k, (n, t) in sorted(acc.items())
            if t > 0]


def return_fraction(events: Sequence) -> tuple[float, float, int]:
    """Empirical return fraction vs mean predicted P_back over finalized asymmetric changes.

    Returns (observed fraction, mean predicted, number of finalized events).
    """
    done = [e for e in events if e.classification in ("ReturnedToOriginal", "RouteChanged")]
    if not done:
        return math.nan, math.nan, 0
    back = sum(e.classification == "ReturnedToOriginal" for e in done)
    return back / len(done), sum(e.p_back for e in done) / len(done), len(done)


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def metrics_csv(bins: Sequence[RateBin]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for b in bins:
        w.writerow([_fmt(float(b.density)), b.events, _fmt(float(b.dx_km)), _fmt(float(b.dt_h)),
                    _fmt(float(b.rate))])
    return buf.getvalue()


def events_csv(events: Sequence) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVENT_COLUMNS)
    for e in events:
        w.writerow([_fmt(round(e.time, 6)), e.vehicle_id, e.from_lane, e.to_lane, _fmt(float(e.G)),
                    e.classification, "" if math.isnan(e.p_back) else _fmt(float(e.p_back)), e.level])
    return buf.getvalue()


def read_metrics(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def relative_difference(base: Sequence[RateBin], other: Sequence[RateBin]) -> list[tuple[float, float, float, float]]:
    """(density, base rate, other rate, relative difference) over bins both series share.

    Relative difference is |other - base| / base; bins where both rates are
    zero count as identical, and a zero base with non-zero other is skipped.
    """
    ob = {round(b.density, 9): b for b in other}
    rows = []
    for b in base:
        o = ob.get(round(b.density, 9))
        if o is None:
            continue
        rb, ro = b.rate, o.rate
        if rb == 0 and ro == 0:
            rel = 0.0
        elif rb == 0:
            continue
        else:
            rel = abs(ro - rb) / rb
        rows.append((b.density, rb, ro, rel))
    return rows
