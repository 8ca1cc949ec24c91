"""Logistic-regression calibration of driving-style weights from labeled decision samples.

A sample holds the route, speed and courtesy yields of one candidate lane
change plus what is needed to recompute the comfort yield for any comfort
exponent beta. The model is

    P(change) = h(b + mu_route*A + mu_speed*B + mu_comfort*C(beta) + mu_courtesy*D)

with h the logistic function. The intercept b absorbs the decision threshold.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import carfollow
from .decision import DrivingStyle, build_cost_table, expected_gain, yields
from .incentives import (
    TH_FLOOR,
    IncentiveContext,
    LaneStats,
    Neighbor,
    RelatedVehicle,
    prob_back,
)
from .roadnet import LaneRelation

log = logging.getLogger(__name__)

H_CLAMP = 1e-12
PARAM_NAMES = ("intercept", "mu_route", "mu_speed", "mu_comfort", "mu_courtesy", "beta")
SAMPLE_COLUMNS = ("style", "A", "B", "D", "th_target", "th_current", "p_back", "remaining", "y", "back")


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class DecisionSample:
    """One candidate lane change and whether the driver took it.

    ``back`` is only meaningful for changes onto an asymmetric lane: 1 if the
    driver later returned to the original lane, 0 if it changed route, -1 if
    unknown or not applicable.
    """
    A: float
    B: float
    D: float
    th_target: float
    th_current: float
    p_back: float
    y: int
    style: str = ""
    remaining: float = math.nan
    back: int = -1

    def __post_init__(self):
        if self.y not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.y!r}")
        for name in ("A", "B", "D", "th_target", "th_current", "p_back"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"feature {name} is not finite")

    def comfort(self, beta: float) -> float:
        return comfort_feature(self.th_target, self.th_current, self.p_back, beta)


def comfort_feature(th_target, th_current, p_back, beta):
    """Comfort yield of a change: target-lane maneuver cost plus the chance-weighted cost of coming back."""
    tt = np.maximum(th_target, TH_FLOOR)
    tc = np.maximum(th_current, TH_FLOOR)
    return -(tt ** -beta) - p_back * tc ** -beta


def comfort_feature_dbeta(th_target, th_current, p_back, beta):
    tt = np.maximum(th_target, TH_FLOOR)
    tc = np.maximum(th_current, TH_FLOOR)
    return np.log(tt) * tt ** -beta + p_back * np.log(tc) * tc ** -beta


# --- logistic model -------------------------------------------------------------

def sigmoid(w):
    """Logistic function, evaluated without overflow for any finite input."""
    w = np.asarray(w, dtype=float)
    e = np.exp(-np.abs(w))
    out = np.where(w >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def logistic_loss(h, y):
    """Cross-entropy of predicted probability ``h`` against label ``y``."""
    h = np.clip(np.asarray(h, dtype=float), H_CLAMP, 1.0 - H_CLAMP)
    y = np.asarray(y, dtype=float)
    out = -y * np.log(h) - (1.0 - y) * np.log1p(-h)
    return out if out.ndim else float(out)


@dataclass
class Dataset:
    """Column arrays of a sample set, in sample order."""
    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    tt: np.ndarray
    tc: np.ndarray
    p: np.ndarray
    y: np.ndarray

    @classmethod
    def of(cls, samples: Sequence[DecisionSample]) -> "Dataset":
        col = lambda k: np.array([getattr(s, k) for s in samples], dtype=float)
        return cls(col("A"), col("B"), col("D"), col("th_target"), col("th_current"), col("p_back"),
                   col("y"))

    def __len__(self):
        return len(self.y)

    def logits(self, theta) -> np.ndarray:
        b, m1, m2, m3, m4, beta = theta
        return b + m1 * self.A + m2 * self.B + m3 * comfort_feature(self.tt, self.tc, self.p, beta) \
            + m4 * self.D


def loss(theta, data: Dataset) -> float:
    """Training objective J: mean cross-entropy in log-sum-exp form.

    Equal to averaging ``logistic_loss`` over the samples except where a logit
    exceeds about 27.6 in magnitude: there the clamp on h would flatten J and
    break its gradient, so the objective is evaluated exactly instead.
    """
    w = data.logits(theta)
    return float(np.mean(np.logaddexp(0.0, w) - data.y * w))


def loss_and_grad(theta, data: Dataset) -> tuple[float, np.ndarray]:
    """Mean cross-entropy J and its analytic gradient over (intercept, mu_1..mu_4, beta)."""
    theta = np.asarray(theta, dtype=float)
    b, m1, m2, m3, m4, beta = theta
    C = comfort_feature(data.tt, data.tc, data.p, beta)
    w = b + m1 * data.A + m2 * data.B + m3 * C + m4 * data.D
    r = sigmoid(w) - data.y
    n = len(data)
    dC = comfort_feature_dbeta(data.tt, data.tc, data.p, beta)
    grad = np.array([r.sum(), r @ data.A, r @ data.B, r @ C, r @ data.D, m3 * (r @ dC)]) / n
    J = float(np.mean(np.logaddexp(0.0, w) - data.y * w))
    return J, grad


# --- fitting --------------------------------------------------------------------

@dataclass
class CalibrationResult:
    alpha: float
    beta: float
    mu: tuple[float, float, float, float]
    intercept: float
    train_loss: float
    holdout_loss: float = math.nan
    holdout_accuracy: float = math.nan
    n_train: int = 0
    n_test: int = 0
    iterations: int = 0
    converged: bool = False
    flags: list[str] = field(default_factory=list)
    style: str = ""

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.intercept, *self.mu, self.beta])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mu"] = dict(zip(("route", "speed", "comfort", "courtesy"), self.mu))
        return d


def _check_labels(data: Dataset):
    if len(data) == 0:
        raise CalibrationError("no samples")
    rate = float(data.y.mean())
    if rate in (0.0, 1.0):
        raise CalibrationError(f"all {len(data)} samples carry label {int(rate)}; "
                               "a logistic fit needs both changes and non-changes")


def _jacobian(theta, data: Dataset) -> np.ndarray:
    """Columns dw/dtheta per sample."""
    b, m1, m2, m3, m4, beta = theta
    C = comfort_feature(data.tt, data.tc, data.p, beta)
    dC = comfort_feature_dbeta(data.tt, data.tc, data.p, beta)
    return np.column_stack([np.ones(len(data)), data.A, data.B, C, data.D, m3 * dC])


def _direction(theta, g, data: Dataset, damping: float = 1e-3, max_beta_move: float = 5.0) -> np.ndarray:
    """Gradient preconditioned by the damped Gauss-Newton matrix at theta.

    While the comfort weight is near zero beta barely affects J and the
    preconditioned beta component blows up; it is then capped (the whole
    direction is shrunk) so one step cannot move beta by more than
    ``max_beta_move`` times the learning rate.
    """
    X = _jacobian(theta, data)
    h = sigmoid(data.logits(theta))
    F = (X * (h * (1.0 - h))[:, None]).T @ X / len(data)
    d = np.diag(F)
    F = F + np.diag(damping * d + 1e-9 * max(1.0, float(d.max())))
    out = np.linalg.solve(F, g)
    if abs(out[5]) > max_beta_move:
        out *= max_beta_move / abs(out[5])
    return out


def descend(theta, data: Dataset, lr: float = 0.1, tol: float = 1e-9, max_iter: int = 100_000):
    """Gradient descent with backtracking; returns (theta, J, iterations, converged, history).

    Each step follows the gradient rescaled by the local Gauss-Newton matrix
    (keeps the nearly flat beta direction from stalling) and is halved until
    J does not increase and beta stays positive.
    """
    theta = np.asarray(theta, dtype=float)
    J, g = loss_and_grad(theta, data)
    history = [J]
    for it in range(1, max_iter + 1):
        d = _direction(theta, g, data)
        step = lr
        while True:
            cand = theta - step * d
            if cand[5] > 0:
                Jc, gc = loss_and_grad(cand, data)
                if Jc <= J:
                    break
            step *= 0.5
            if step < 1e-12:
                return theta, J, it, True, history
        dJ = J - Jc
        theta, J, g = cand, Jc, gc
        history.append(J)
        if dJ < tol:
            return theta, J, it, True, history
    return theta, J, max_iter, False, history


def fit(train: Sequence[DecisionSample], alpha: float = math.nan, lr: float = 0.1, tol: float = 1e-9,
        max_iter: int = 100_000, beta_starts: Sequence[float] = (1.0, 2.0, 3.0),
        init: Sequence[float] | None = None) -> CalibrationResult:
    """Minimize the mean cross-entropy from each beta start (or ``init``) and keep the best."""
    data = Dataset.of(train)
    _check_labels(data)
    rate = float(data.y.mean())
    starts = [np.asarray(init, dtype=float)] if init is not None else []
    for b0 in beta_starts:
        starts.append(np.array([math.log(rate / (1.0 - rate)), 0.0, 0.0, 0.0, 0.0, b0]))
    best = None
    for th0 in starts:
        th, J, it, ok, _ = descend(th0, data, lr, tol, max_iter)
        log.debug("start beta=%.2f: J=%.8f beta=%.4f after %d iterations", th0[5], J, th[5], it)
        if best is None or J < best[1]:
            best = (th, J, it, ok)
    th, J, it, ok = best
    flags = [f"{n} fitted negative" for n, v in zip(PARAM_NAMES[1:5], th[1:5]) if v < 0]
    if not ok:
        flags.append(f"not converged after {it} iterations")
    return CalibrationResult(alpha=alpha, beta=float(th[5]), mu=tuple(float(v) for v in th[1:5]),
                             intercept=float(th[0]), train_loss=J, n_train=len(data), iterations=it,
                             converged=ok, flags=flags)


def split(samples: Sequence, train_fraction: float = 0.667, seed: int = 0) -> tuple[list, list]:
    """Deterministic shuffled train/holdout split."""
    if not 0 < train_fraction < 1:
        raise ValueError("train fraction must lie strictly between 0 and 1")
    idx = np.random.default_rng(seed).permutation(len(samples))
    k = int(round(train_fraction * len(samples)))
    return [samples[i] for i in idx[:k]], [samples[i] for i in idx[k:]]


def calibrate(samples: Sequence[DecisionSample], train_fraction: float = 0.667, seed: int = 0,
              alpha: float = math.nan, **kw) -> CalibrationResult:
    """Fit on a train split and score the holdout."""
    data = Dataset.of(samples)
    _check_labels(data)
    train, test = split(samples, train_fraction, seed)
    res = fit(train, alpha=alpha, **kw)
    if test:
        v = validate(res, test)
        res.holdout_loss, res.holdout_accuracy, res.n_test = v.loss, v.accuracy, len(test)
    return res


def calibrate_by_style(samples: Sequence[DecisionSample], **kw) -> dict[str, CalibrationResult]:
    """Independent fits per style tag."""
    out = {}
    for tag in sorted({s.style for s in samples}):
        part = [s for s in samples if s.style == tag]
        backs = back_cases(part)
        alpha = fit_alpha(backs) if len(backs) >= MIN_BACK_CASES else math.nan
        out[tag] = calibrate(part, alpha=alpha, **kw)
        out[tag].style = tag
    return out


@dataclass(frozen=True)
class ValidationReport:
    loss: float
    accuracy: float
    curve: list[tuple[float, float, int]]  # (mean predicted, observed rate, count) per decile


def validate(result: CalibrationResult, holdout: Sequence[DecisionSample], bins: int = 10) -> ValidationReport:
    if not holdout:
        raise CalibrationError("empty holdout set")
    data = Dataset.of(holdout)
    h = sigmoid(data.logits(result.theta))
    h = np.atleast_1d(h)
    L = float(np.mean(logistic_loss(h, data.y)))
    acc = float(np.mean((h > 0.5) == (data.y == 1)))
    order = np.argsort(h, kind="stable")
    curve = [(float(h[c].mean()), float(data.y[c].mean()), int(len(c)))
             for c in np.array_split(order, bins) if len(c)]
    return ValidationReport(L, acc, curve)


# --- probability of back -----------------------------------------------------------

MIN_BACK_CASES = 30
ALPHA_BOUNDS = (1e-6, 10.0)
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def back_nll(alpha: float, x: np.ndarray, back: np.ndarray) -> float:
    """Negative log-likelihood of back labels with P = 1 - exp(-alpha x), x = T_h * S."""
    ax = alpha * x
    with np.errstate(divide="ignore"):
        lp = np.log(-np.expm1(-ax))
    return float(-np.sum(np.where(back == 1, lp, -ax)))


def golden_section(f, lo: float, hi: float, tol: float = 1e-6) -> float:
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def fit_alpha(cases: Iterable[tuple[float, float, int]], bounds=ALPHA_BOUNDS, tol: float = 1e-6) -> float:
    """Maximum-likelihood alpha from (T_h, S, back) observations of asymmetric changes."""
    arr = np.array([(th * s, b) for th, s, b in cases], dtype=float).reshape(-1, 2)
    if len(arr) < MIN_BACK_CASES:
        raise CalibrationError(f"need at least {MIN_BACK_CASES} asymmetric changes, got {len(arr)}")
    x, back = arr[:, 0], arr[:, 1]
    lo, hi = bounds
    if np.all(back == 1) or np.all(back == 0):
        edge = hi if np.all(back == 1) else lo
        warnings.warn(f"all {len(arr)} asymmetric changes share one outcome; alpha sits at the "
                      f"search boundary {edge}", RuntimeWarning, stacklevel=2)
        return edge
    a = golden_section(lambda al: back_nll(al, x, back), lo, hi, tol)
    if min(a - lo, hi - a) < 10 * tol:
        warnings.warn(f"alpha={a:.6g} is at the search boundary", RuntimeWarning, stacklevel=2)
    return a


def back_cases(samples: Iterable[DecisionSample]) -> list[tuple[float, float, int]]:
    return [(s.th_target, s.remaining, s.back) for s in samples if s.y == 1 and s.back in (0, 1)]


# --- sample files ------------------------------------------------------------------

def write_samples(path, samples: Iterable[DecisionSample]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SAMPLE_COLUMNS)
        for s in samples:
            w.writerow([s.style, repr(s.A), repr(s.B), repr(s.D), repr(s.th_target), repr(s.th_current),
                        repr(s.p_back), repr(s.remaining), s.y, s.back])


def read_samples(path) -> list[DecisionSample]:
    out = []
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        missing = set(SAMPLE_COLUMNS) - set(rd.fieldnames or ())
        if missing:
            raise CalibrationError(f"{path}: missing columns {sorted(missing)}")
        for i, row in enumerate(rd, start=2):
            try:
                out.append(DecisionSample(
                    A=float(row["A"]), B=float(row["B"]), D=float(row["D"]),
                    th_target=float(row["th_target"]), th_current=float(row["th_current"]),
                    p_back=float(row["p_back"]), y=int(row["y"]), style=row["style"],
                    remaining=float(row["remaining"]), back=int(row["back"])))
            except ValueError as e:
                raise CalibrationError(f"{path}:{i}: {e}") from None
    return out


# --- synthetic data ------------------------------------------------------------------

def _log_uniform(rng, lo, hi):
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def random_context(rng: np.random.Generator, model) -> IncentiveContext:
    """A randomly drawn but self-consistent lane-change situation.

    Ranges keep every keep-lane baseline away from zero (moving ego, a real
    trip still ahead, related vehicles noticeably off their desired speed),
    spread T_h * S so that P_back covers most of (0, 1), and size detours
    relative to the remaining trip so route yields spread over a few units.
    """
    v0 = carfollow.desired_speed(model)
    v = rng.uniform(0.15, 1.0) * v0

    def leader():
        if rng.random() < 0.2:
            return None
        return Neighbor(rng.uniform(20.0, 120.0), rng.uniform(0.15, 1.0) * v0)

    def stats():
        th = _log_uniform(rng, 0.1, 5.0)
        vbar = rng.uniform(0.3, 1.0) * v0
        return LaneStats(th * vbar, vbar, th, 0.0, 0.0, 200.0, 1)

    asym = rng.random() < 0.7
    remaining = _log_uniform(rng, 2.0, 100.0)
    down = rng.uniform(5.0, 60.0)
    trip = remaining / v + down
    detour = rng.uniform(-1.0, 2.0) * trip if asym else 0.0
    related = []
    for _ in range(int(rng.integers(0, 5))):
        des = rng.uniform(8.0, 30.0)
        related.append(RelatedVehicle(rng.uniform(0.0, 0.8) * des, rng.uniform(0.0, 1.0) * des, des))
    return IncentiveContext(
        speed=v, model=model, current_stats=stats(), target_stats=stats(),
        relation=LaneRelation.ASYMMETRIC if asym else LaneRelation.SYMMETRIC,
        remaining=remaining, downstream_current=down,
        downstream_target=max(0.0, down + detour),
        current_leader=leader(), target_leader=leader(), related=tuple(related))


def sample_from_context(ctx: IncentiveContext, style: DrivingStyle, y: int = 0, back: int = -1) -> DecisionSample:
    table = build_cost_table(ctx, style)
    yl = yields(table, expected_gain(table))
    return DecisionSample(A=yl["route"], B=yl["speed"], D=yl["courtesy"],
                          th_target=ctx.target_stats.time_headway,
                          th_current=ctx.current_stats.time_headway, p_back=table.p_back, y=y,
                          style=style.name, remaining=ctx.remaining, back=back)


def change_probability(s: DecisionSample, style: DrivingStyle) -> float:
    """h(G - threshold): the style's own rule read as a logistic choice."""
    G = (style.mu_route * s.A + style.mu_speed * s.B + style.mu_comfort * s.comfort(style.beta)
         + style.mu_courtesy * s.D)
    return sigmoid(G - style.g_threshold)


def synthetic_samples(style: DrivingStyle, n: int, seed: int = 0, noise: float = 0.05) -> list[DecisionSample]:
    """Samples labeled by the style's own weighted rule, softened to a logistic choice.

    A change happens with probability h(G - threshold); each label is then,
    with probability ``noise``, replaced by a fair coin flip. Asymmetric
    changes also get a back label drawn from the style's P_back.
    """
    rng = np.random.default_rng([seed, 0x5EED])
    base = carfollow.preset(style.carfollow)
    model = (base.scaled_to(style.desired_speed) if isinstance(base, carfollow.OvmParams)
             else carfollow.IdmParams(**{**asdict(base), "v0": style.desired_speed}))
    out = []
    for _ in range(n):
        ctx = random_context(rng, model)
        s = sample_from_context(ctx, style)
        y = int(rng.random() < change_probability(s, style))
        if rng.random() < noise:
            y = int(rng.random() < 0.5)
        back = -1
        if y == 1 and ctx.relation is LaneRelation.ASYMMETRIC:
            back = int(rng.random() < prob_back(style.alpha, s.th_target, s.remaining))
        out.append(DecisionSample(s.A, s.B, s.D, s.th_target, s.th_current, s.p_back, y, s.style,
                                  s.remaining, back))
    return out
