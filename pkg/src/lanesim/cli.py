"""Command-line front end: run scenarios, compare models, generate data and calibrate.

Exit codes: 0 success, 1 calibration/data problem, 2 configuration error,
3 simulation invariant breach. Set LANESIM_LOG (e.g. INFO, DEBUG) for logging.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

from . import __version__, calib, metrics, sim
from .decision import style_presets
from .roadnet import NetworkError
from .scenario import MODELS, Scenario, ScenarioError, load_scenario
from .trajectory import TrajectoryError, extract_events, read_trajectories, write_trajectories

log = logging.getLogger("lanesim")

EXIT_DATA = 1
EXIT_CONFIG = 2
EXIT_BREACH = 3
DEFAULT_BAND = 0.30


class ConfigError(Exception):
    pass


# --- output helpers -----------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _prepare(out: Path, names: list[str], force: bool):
    out.mkdir(parents=True, exist_ok=True)
    clash = [n for n in names if (out / n).exists()]
    if clash and not force:
        raise ConfigError(f"{out}: would overwrite {', '.join(clash)} (use --force)")


def _write(out: Path, name: str, text: str) -> Path:
    p = out / name
    with open(p, "w", newline="") as fh:
        fh.write(text)
    return p


def _manifest(out: Path, name: str, command: str, argv: list[str], config_hash: str, seed,
              outputs: list[Path], **extra) -> Path:
    doc = {
        "tool": "lanesim",
        "version": __version__,
        "command": command,
        "argv": argv,
        "config_hash": config_hash,
        "seed": seed,
        "outputs": {p.name: _sha256(p) for p in outputs},
        **extra,
    }
    return _write(out, name, json.dumps(_finite(doc), indent=2, sort_keys=True) + "\n")


def _scenario(args, model: str | None = None) -> Scenario:
    return load_scenario(args.scenario, seed=args.seed, model=model)


# --- subcommands ---------------------------------------------------------------------

def cmd_run(args, argv) -> int:
    sc = _scenario(args, model=args.model)
    out = Path(args.out)
    names = ["metrics.csv", "events.csv", "run-manifest.json"]
    if args.trajectories:
        names += [f"trajectories-{i}.csv" for i in range(len(sc.demand_levels))]
    _prepare(out, names, args.force)
    res = sim.run(sc, record=args.trajectories)
    files = [_write(out, "metrics.csv", metrics.metrics_csv(res.bins)),
             _write(out, "events.csv", metrics.events_csv(res.events))]
    if args.trajectories:
        for w in res.worlds:
            p = out / f"trajectories-{w.level}.csv"
            write_trajectories(p, w.trajectory)
            files.append(p)
    _manifest(out, "run-manifest.json", "run", argv, sc.config_hash, sc.seed, files,
              model=sc.model, spawned=res.spawned, exited=res.exited, active=res.active,
              events=len(res.events), measured_events=res.measured_events)
    print(f"{sc.name} [{sc.model}] seed={sc.seed}: {len(res.events)} lane changes "
          f"({res.measured_events} in measured windows), {len(res.bins)} density bins -> {out}")
    return 0


def comparison_rows(series: dict[str, list[metrics.RateBin]]) -> tuple[list[str], list[list]]:
    """Align r(rho) series on their shared density bins; relative differences are against the first model."""
    names = list(series)
    base = names[0]
    keys = set(round(b.density, 9) for b in series[base])
    for n in names[1:]:
        keys &= set(round(b.density, 9) for b in series[n])
    by = {n: {round(b.density, 9): b for b in series[n]} for n in names}
    header = ["bin_density_veh_km"] + [f"rate_{n}" for n in names] + [f"rel_diff_{n}" for n in names[1:]]
    rows = []
    for k in sorted(keys):
        rb = by[base][k].rate
        rates = [by[n][k].rate for n in names]
        rels = []
        for r in rates[1:]:
            if rb == 0:
                rels.append(0.0 if r == 0 else math.nan)
            else:
                rels.append(abs(r - rb) / rb)
        rows.append([by[base][k].density] + rates + rels)
    return header, rows


def cmd_compare(args, argv) -> int:
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    if len(models) < 2:
        raise ConfigError("compare needs at least two models (--models mcdm,mobil)")
    unknown = [m for m in models if m not in MODELS]
    if unknown:
        raise ConfigError(f"unknown model(s) {unknown}; known: {list(MODELS)}")
    out = Path(args.out)
    labels = []
    for m in models:
        labels.append(m if m not in labels else f"{m}#{labels.count(m) + 1}")
    _prepare(out, ["comparison.csv", "compare-manifest.json"] + [f"metrics-{l}.csv" for l in labels],
             args.force)
    series, files, hashes = {}, [], set()
    for m, label in zip(models, labels):
        sc = _scenario(args, model=m)
        hashes.add(sc.config_hash)
        res = sim.run(sc)
        series[label] = res.bins
        files.append(_write(out, f"metrics-{label}.csv", metrics.metrics_csv(res.bins)))
    header, rows = comparison_rows(series)
    lines = [",".join(header)] + [",".join(repr(float(x)) for x in r) for r in rows]
    files.append(_write(out, "comparison.csv", "\n".join(lines) + "\n"))
    band = args.band
    summary = {}
    for j, label in enumerate(labels[1:]):
        vals = [r[1 + len(labels) + j] for r in rows if not math.isnan(r[1 + len(labels) + j])]
        mean = sum(vals) / len(vals) if vals else math.nan
        summary[label] = {"mean_relative_difference": mean, "bins": len(vals),
                          "within_band": bool(vals) and mean <= band}
        print(f"{labels[0]} vs {label}: mean relative difference {mean:.3f} over {len(vals)} bins "
              f"({'within' if summary[label]['within_band'] else 'outside'} band {band:.2f})")
    _manifest(out, "compare-manifest.json", "compare", argv, sorted(hashes)[0], args.seed, files,
              models=labels, band=band, summary=summary)
    return 0


def cmd_gen_synthetic(args, argv) -> int:
    presets = style_presets()
    if args.style not in presets:
        raise ConfigError(f"unknown style {args.style!r}; known: {sorted(presets)}")
    if args.n < 0:
        raise ConfigError("--n must be non-negative")
    out = Path(args.out)
    _prepare(out, ["samples.csv", "synthetic-manifest.json"], args.force)
    seed = 0 if args.seed is None else args.seed
    samples = calib.synthetic_samples(presets[args.style], args.n, seed=seed, noise=args.noise)
    p = out / "samples.csv"
    calib.write_samples(p, samples)
    st = presets[args.style]
    cfg = json.dumps({"style": args.style, "n": args.n, "noise": args.noise}, sort_keys=True)
    _manifest(out, "synthetic-manifest.json", "gen-synthetic", argv,
              hashlib.sha256(cfg.encode()).hexdigest(), seed, [p],
              generating={"mu": list(st.weights), "beta": st.beta, "alpha": st.alpha,
                          "threshold": st.g_threshold, "noise": args.noise})
    print(f"{args.n} samples for style {args.style} -> {p}")
    return 0


def _load_samples(args) -> tuple[list[calib.DecisionSample], str]:
    if args.samples:
        path = Path(args.samples)
        if not path.exists():
            raise ConfigError(f"samples file not found: {path}")
        return calib.read_samples(path), _sha256(path)
    if args.trajectories:
        if not args.scenario:
            raise ConfigError("--trajectories needs --scenario for the road network")
        path = Path(args.trajectories)
        if not path.exists():
            raise ConfigError(f"trajectory file not found: {path}")
        sc = load_scenario(args.scenario)
        ex = extract_events(read_trajectories(path), sc.network)
        if ex.skipped:
            log.warning("%d records on lanes unknown to the network were skipped", ex.skipped)
        return ex.samples, _sha256(path)
    raise ConfigError("give --samples or --trajectories")


def cmd_calibrate(args, argv) -> int:
    samples, h = _load_samples(args)
    if args.style:
        samples = [s for s in samples if s.style == args.style]
        if not samples:
            raise ConfigError(f"no samples tagged with style {args.style!r}")
    out = Path(args.out)
    _prepare(out, ["calibration.json", "holdout.csv", "calibrate-manifest.json"], args.force)
    seed = 0 if args.seed is None else args.seed
    report, holdout = {}, []
    for tag in sorted({s.style for s in samples}):
        part = [s for s in samples if s.style == tag]
        _, test = calib.split(part, args.split, seed)
        holdout.extend(test)
        backs = calib.back_cases(part)
        alpha = math.nan
        if len(backs) >= calib.MIN_BACK_CASES:
            alpha = calib.fit_alpha(backs)
        else:
            log.warning("style %r: only %d asymmetric changes, alpha not fitted", tag, len(backs))
        res = calib.calibrate(part, train_fraction=args.split, seed=seed, alpha=alpha)
        res.style = tag
        report[tag or "all"] = res.to_dict()
        mu = ", ".join(f"{v:.4g}" for v in res.mu)
        print(f"style {tag or 'all'}: mu=({mu}) beta={res.beta:.4g} alpha={alpha:.4g} "
              f"J_train={res.train_loss:.4f} J_holdout={res.holdout_loss:.4f} "
              f"acc={res.holdout_accuracy:.3f} N={res.n_train}/{res.n_test}")
        for f in res.flags:
            print(f"  warning: {f}")
    doc = {"invocation": argv, "split": args.split, "seed": seed, "styles": report}
    p1 = _write(out, "calibration.json", json.dumps(_finite(doc), indent=2, sort_keys=True) + "\n")
    p2 = out / "holdout.csv"
    calib.write_samples(p2, holdout)
    _manifest(out, "calibrate-manifest.json", "calibrate", argv, h, seed, [p1, p2])
    return 0


def _finite(x):
    """JSON-safe copy: NaN and infinities become null."""
    if isinstance(x, float):
        return x if math.isfinite(x) else None
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_finite(v) for v in x]
    return x


def cmd_validate(args, argv) -> int:
    rpath = Path(args.report)
    if not rpath.exists():
        raise ConfigError(f"calibration report not found: {rpath}")
    doc = json.loads(rpath.read_text())
    spath = Path(args.samples) if args.samples else rpath.parent / "holdout.csv"
    if not spath.exists():
        raise ConfigError(f"holdout samples not found: {spath}")
    samples = calib.read_samples(spath)
    out = Path(args.out)
    _prepare(out, ["validation.json", "calibration-curve.csv", "validate-manifest.json"], args.force)
    results, curve_lines = {}, ["style,decile,mean_predicted,observed_rate,count"]
    for tag, r in sorted(doc["styles"].items()):
        part = [s for s in samples if (s.style or "all") == tag]
        if not part:
            continue
        res = calib.CalibrationResult(alpha=math.nan if r["alpha"] is None else r["alpha"],
                                      beta=r["beta"], intercept=r["intercept"],
                                      mu=tuple(r["mu"][k] for k in ("route", "speed", "comfort", "courtesy")),
                                      train_loss=r["train_loss"])
        v = calib.validate(res, part)
        results[tag] = {"loss": v.loss, "accuracy": v.accuracy, "n": len(part)}
        for i, (pm, obs, n) in enumerate(v.curve):
            curve_lines.append(f"{tag},{i},{pm!r},{obs!r},{n}")
        print(f"style {tag}: holdout loss {v.loss:.4f}, accuracy {v.accuracy:.3f} over {len(part)} samples")
    if not results:
        raise ConfigError("no holdout samples match the report's styles")
    p1 = _write(out, "validation.json", json.dumps(results, indent=2, sort_keys=True) + "\n")
    p2 = _write(out, "calibration-curve.csv", "\n".join(curve_lines) + "\n")
    _manifest(out, "validate-manifest.json", "validate", argv, _sha256(rpath), None, [p1, p2])
    return 0


# --- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lanesim", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario=True):
        if scenario:
            sp.add_argument("--scenario", required=True, help="scenario JSON file")
        sp.add_argument("--seed", type=int, default=None, help="override the seed")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")

    r = sub.add_parser("run", help="simulate a scenario and write r(rho) and the event log")
    common(r)
    r.add_argument("--model", choices=MODELS, default=None, help="override the lane-change model")
    r.add_argument("--trajectories", action="store_true", help="also write per-level trajectory CSVs")

    c = sub.add_parser("compare", help="r(rho) of several models on one scenario")
    common(c)
    c.add_argument("--models", default="mcdm,mobil", help="comma-separated model names")
    c.add_argument("--band", type=float, default=DEFAULT_BAND,
                   help="acceptable mean relative difference (default %(default)s)")

    g = sub.add_parser("gen-synthetic", help="labeled decision samples from a style preset")
    common(g, scenario=False)
    g.add_argument("--style", required=True)
    g.add_argument("--n", type=int, default=5000)
    g.add_argument("--noise", type=float, default=0.05, help="share of labels replaced at random")

    k = sub.add_parser("calibrate", help="fit style weights by logistic regression")
    common(k, scenario=False)
    k.add_argument("--samples", help="decision samples CSV")
    k.add_argument("--trajectories", help="trajectory CSV (needs --scenario for the network)")
    k.add_argument("--scenario", help="scenario whose network the trajectories run on")
    k.add_argument("--style", help="only fit samples tagged with this style")
    k.add_argument("--split", type=float, default=0.667, help="training share (default %(default)s)")

    v = sub.add_parser("validate", help="score a calibration report on holdout samples")
    common(v, scenario=False)
    v.add_argument("--report", required=True, help="calibration.json")
    v.add_argument("--samples", help="holdout CSV (default: holdout.csv next to the report)")
    return p


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "gen-synthetic": cmd_gen_synthetic,
            "calibrate": cmd_calibrate, "validate": cmd_validate}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    level = os.environ.get("LANESIM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if getattr(args, "split", None) is not None and not 0 < args.split < 1:
        print("error: --split must lie strictly between 0 and 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args, argv)
    except (ConfigError, ScenarioError, NetworkError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except sim.InvariantBreach as e:
        print(f"invariant breach: {e}", file=sys.stderr)
        return EXIT_BREACH
    except (calib.CalibrationError, TrajectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
