"""Command-line entry point.

Exit codes: 0 ok, 2 configuration error, 3 unobservable, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import PRESETS, build_config, load_config
from .csvio import write_table
from .errors import ConfigurationError, DsieError, NumericalError, UnobservableError
from .harness import compare_estimators, run_experiment, simulate_stream
from .network import build_discrete_model, check_observability, partition
from .simulation import write_measurements_csv, write_truth_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_UNOBSERVABLE = 3
EXIT_NUMERICAL = 4

log = logging.getLogger("dsie")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group()
    src.add_argument("--config", help="JSON experiment configuration")
    src.add_argument("--preset", choices=PRESETS, help="built-in experiment")
    common.add_argument("--seed", type=int, help="noise seed (overrides the config)")
    common.add_argument("--estimators", help="comma-separated subset of SIE,WLS,TSE,DSIE")
    common.add_argument("--out", help="output directory for CSV/JSON reports")
    common.add_argument("--alpha", type=float, help="false-alarm probability of the chi-square test")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dsie", description="Joint state/input estimation for microgrids")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write truth and measurement CSVs")
    sub.add_parser("estimate", parents=[common], help="run the estimators on clean measurements")
    sub.add_parser("attack", parents=[common], help="run the estimators under a false-data injection")
    sub.add_parser("run", parents=[common], help="full pipeline with comparison table")
    sub.add_parser("observability", parents=[common], help="rank report for the network and its areas")
    return p


def _config(args, with_attack):
    overrides = dict(seed=args.seed, estimators=args.estimators, alpha=args.alpha,
                     out_dir=args.out, with_attack=with_attack)
    if args.config:
        return load_config(args.config, **overrides)
    return build_config({"preset": args.preset or "potsdam13"}, **overrides)


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def cmd_simulate(args) -> int:
    cfg = _config(args, None)
    truth, frames = simulate_stream(cfg)
    out = {"n_steps": truth.n_steps, "seed": cfg.seed}
    if args.out:
        d = Path(args.out)
        d.mkdir(parents=True, exist_ok=True)
        out["truth"] = str(write_truth_csv(d / "truth.csv", truth))
        out["measurements"] = str(write_measurements_csv(d / "measurements.csv", frames, cfg.layout))
    _print(out)
    return EXIT_OK


def _experiment(args, with_attack) -> int:
    cfg = _config(args, with_attack)
    res = run_experiment(cfg)
    if args.command == "run" and len(res.mse) > 1:
        cmp = compare_estimators(res.mse, cfg.scenario.event_steps())
        names = list(res.mse)
        header = ["event_step"] + [f"peak_{n}" for n in names] + ["ranking"]
        rows = [[w.step] + [w.peaks[n] for n in names] + [">".join(reversed(w.ranking))] for w in cmp.windows]
        rows.append(["steady"] + [cmp.steady[n] for n in names] + [""])
        res.summary["comparison"] = {"reference": cmp.reference, "steady": cmp.steady,
                                     "steady_spread": cmp.steady_spread()}
        if args.out:
            res.paths["comparison"] = write_table(Path(args.out) / "comparison.csv", header, rows, "comparison")
            (Path(args.out) / "summary.json").write_text(json.dumps(res.summary, indent=2, sort_keys=True) + "\n")
    _print(res.summary)
    return EXIT_OK


def cmd_estimate(args) -> int:
    return _experiment(args, False)


def cmd_attack(args) -> int:
    return _experiment(args, True)


def cmd_run(args) -> int:
    return _experiment(args, None)


def cmd_observability(args) -> int:
    cfg = _config(args, False)
    noise = cfg.model_noise
    dt = cfg.scenario.dt
    central = check_observability(build_discrete_model(cfg.topology, cfg.layout, dt, noise, cfg.bases))
    report = {"central": {"rank": central.rank, "required": central.required, "observable": central.observable}}
    any_ok = central.observable
    if cfg.areas:
        part, models = partition(cfg.topology, cfg.layout, cfg.areas, dt=dt, noise=noise, bases=cfg.bases)
        report["areas"] = {}
        for area, m in zip(part.areas, models):
            r = check_observability(m)
            report["areas"][str(area.id)] = {"rank": r.rank, "required": r.required, "observable": r.observable}
            any_ok |= r.observable
    _print(report)
    return EXIT_OK if any_ok else EXIT_UNOBSERVABLE


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "attack": cmd_attack,
    "run": cmd_run,
    "observability": cmd_observability,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UnobservableError as exc:
        print(f"unobservable: {exc}", file=sys.stderr)
        return EXIT_UNOBSERVABLE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DsieError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
