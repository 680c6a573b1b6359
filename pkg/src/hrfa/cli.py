"""Command line entry point: ``hrfa fixtures build``, ``hrfa attack run``, ``hrfa report show``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from hrfa.harness import ConfigError, ExperimentConfig, load_report, run_experiment

log = logging.getLogger("hrfa")


def _fixtures_build(args):
    from hrfa.models.fixtures import FixtureGateError, train_fixtures
    from hrfa.models.training import FixtureSpec

    spec = FixtureSpec.tiny() if args.tiny else FixtureSpec()
    try:
        fx = train_fixtures(seed=args.seed, spec=spec, out_dir=args.out)
    except FixtureGateError as err:
        print(f"error: {err}", file=sys.stderr)
        print(json.dumps(err.metrics, indent=2, sort_keys=True, default=str), file=sys.stderr)
        return 3
    cal = fx.calibration
    print(f"fixtures written to {args.out}")
    print(f"classifier accuracy {cal['classifier_accuracy']:.4f}")
    print("generator consistency " + " ".join(f"{c:.3f}" for c in cal["generator_consistency"]))
    print(f"face threshold {cal['tau']:.4f} (eer {cal['eer']:.4f}), attack distance {cal['tau_attack']:.4f}")
    return 0


def _attack_run(args):
    try:
        cfg = ExperimentConfig.load(args.config)
    except (ConfigError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    if args.workers is not None:
        cfg.workers = args.workers
    if args.output is not None:
        cfg.output = str(Path(args.output).resolve())
    try:
        report = run_experiment(cfg)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    print(report.summary(), end="")
    print(f"report written to {cfg.output}")
    return 0


def _report_show(args):
    path = Path(args.report)
    if path.is_dir():
        path = path / "report.json"
    try:
        report = load_report(path)
    except FileNotFoundError:
        print(f"error: no report at {path}", file=sys.stderr)
        return 2
    except (json.JSONDecodeError, KeyError, TypeError) as err:
        print(f"error: {path} is not a report: {err}", file=sys.stderr)
        return 2
    if args.csv:
        print(report.to_csv(), end="")
    else:
        print(report.summary(), end="")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="hrfa", description="Latent-space adversarial attack toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="group", required=True)

    fx = sub.add_parser("fixtures", help="fixture models").add_subparsers(dest="cmd", required=True)
    b = fx.add_parser("build", help="train and write all fixture models")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default="fixtures")
    b.add_argument("--tiny", action="store_true", help="tiny untrained-quality fixtures for smoke tests")
    b.set_defaults(func=_fixtures_build)

    at = sub.add_parser("attack", help="run experiments").add_subparsers(dest="cmd", required=True)
    r = at.add_parser("run", help="run an experiment config")
    r.add_argument("--config", required=True)
    r.add_argument("--workers", type=int)
    r.add_argument("--output", help="override the config's output directory")
    r.set_defaults(func=_attack_run)

    rp = sub.add_parser("report", help="inspect reports").add_subparsers(dest="cmd", required=True)
    s = rp.add_parser("show", help="print the summary table of a report")
    s.add_argument("report", help="report.json or a run directory")
    s.add_argument("--csv", action="store_true", help="print the per-example CSV instead")
    s.set_defaults(func=_report_show)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
