"""
dlsim CLI — Command-line interface for running experiments and attacks.

Usage:
    dlsim run <config.json> [--out DIR]            - Run one experiment
    dlsim attack <config.json> <attack> [--out DIR] - Run an attack experiment
    dlsim report <path>... [--kind tidy|figure|gnuplot] --out FILE
    dlsim validate <config.json>                   - Schema check only
    dlsim version                                  - Show dlsim version

Exit codes: 0 ok, 2 configuration error, 3 attack precondition error,
4 I/O error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .errors import DLSimError


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="dlsim",
        description="dlsim — Decentralized learning privacy simulator",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  dlsim validate torus36.json                      Check a config
  dlsim run torus36.json --out runs/torus36        Run D-PSGD and log every round
  dlsim attack torus36.json mia-passive --record-updates --attacker 0 --victims 1 6
  dlsim attack star.json state-override --schedule rushing
  dlsim report runs/mia --kind figure --out fig3.csv
""",
    )
    parser.add_argument("--debug", action="store_true", default=False, help="Verbose logging")
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    # ── run ──
    run_parser = subparsers.add_parser("run", help="Run one experiment")
    run_parser.add_argument("config", help="Experiment config (JSON)")
    run_parser.add_argument("--out", default=None, help="Run directory (default: runs/<config hash>)")
    run_parser.add_argument("--engine", choices=("dpsgd", "fedavg"), default=None, help="Override the engine")
    run_parser.add_argument("--record-updates", action="store_true", default=False, help="Dump every message")
    run_parser.add_argument("--threads", type=int, default=None, help="Worker cap (default: $DLSIM_THREADS)")

    # ── attack ──
    attack_parser = subparsers.add_parser("attack", help="Run an attack experiment")
    attack_parser.add_argument("config", help="Experiment config (JSON)")
    attack_parser.add_argument("attack", help="mia-passive, echo, state-override, gradient-recovery, "
                                              "sa-evasion, influence, local-generalization")
    attack_parser.add_argument("--out", default=None, help="Output directory (default: runs/<hash>-<attack>)")
    attack_parser.add_argument("--attacker", type=int, default=None, help="Attacker user id")
    attack_parser.add_argument("--victims", type=int, nargs="+", default=None, help="Victim user ids")
    attack_parser.add_argument("--colluder", type=int, default=None, help="Second colluder (sa-evasion)")
    attack_parser.add_argument("--drop-victim", action="store_true", default=None, help="SA drop-off variant")
    attack_parser.add_argument("--schedule", choices=("synchronous", "rushing"), default=None)
    attack_parser.add_argument("--record-updates", action="store_true", default=False, help="Capture updates")
    attack_parser.add_argument("--threads", type=int, default=None, help="Worker cap (default: $DLSIM_THREADS)")

    # ── report ──
    report_parser = subparsers.add_parser("report", help="Merge attack reports and run logs")
    report_parser.add_argument("paths", nargs="*", help="Report CSVs or run/attack directories")
    report_parser.add_argument("--kind", choices=("tidy", "figure", "gnuplot"), default="tidy")
    report_parser.add_argument("--out", required=True, help="Output file")

    # ── validate ──
    validate_parser = subparsers.add_parser("validate", help="Check a config against the schema")
    validate_parser.add_argument("config", help="Experiment config (JSON)")

    # ── version ──
    subparsers.add_parser("version", help="Show dlsim version")

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.debug else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    if args.command is None:
        parser.print_help()
        return 0

    commands = {
        "run": cmd_run,
        "attack": cmd_attack,
        "report": cmd_report,
        "validate": cmd_validate,
        "version": cmd_version,
    }

    handler = commands[args.command]
    try:
        handler(args)
    except KeyboardInterrupt:
        print("\nStopped.")
        sys.exit(130)
    except DLSimError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(e.exit_code)
    return 0


def _with_capture(config: ExperimentConfig, record_updates: bool) -> ExperimentConfig:
    if record_updates:
        return config.with_overrides(capture={"record_updates": True})
    return config


def cmd_run(args):
    """Run one experiment into a run directory."""
    from .harness import default_run_dir, execute_run

    config = _with_capture(load_config(args.config), args.record_updates)
    out = Path(args.out) if args.out else default_run_dir(config)
    result = execute_run(config, out, threads=args.threads, engine=args.engine)
    print(f"{result.status.value}: {result.rounds_run} rounds -> {out}")


def cmd_attack(args):
    """Run an attack experiment and write its report."""
    from .harness import run_attack

    config = _with_capture(load_config(args.config), args.record_updates)
    adversary = {}
    if args.attacker is not None:
        adversary["attacker"] = args.attacker
    if args.victims is not None:
        adversary["victims"] = args.victims
    if args.colluder is not None:
        adversary["colluder"] = args.colluder
    if args.drop_victim:
        adversary["drop_victim"] = True
    overrides = {}
    if adversary:
        overrides["adversary"] = adversary
    if args.schedule:
        overrides["schedule"] = args.schedule
    if overrides:
        config = config.with_overrides(**overrides)

    out = Path(args.out) if args.out else Path("runs") / f"{config.config_hash[:12]}-{args.attack}"
    outcome = run_attack(config, args.attack, out, threads=args.threads)
    print(f"{args.attack}: {len(outcome.report.rows)} rows -> {out / (args.attack + '.csv')}")
    if outcome.report.summary:
        print(json.dumps(outcome.report.summary, indent=2, sort_keys=True, default=str))


def cmd_report(args):
    """Merge reports into one tidy CSV, figure CSV or gnuplot file."""
    from .harness import build_report

    path = build_report(args.paths, args.kind, args.out)
    print(f"{args.kind} report -> {path}")


def cmd_validate(args):
    """Validate a config; every problem is reported with its JSON pointer."""
    config = load_config(args.config)
    print(f"OK {args.config} ({config.config_hash})")


def cmd_version(args):
    """Show dlsim version."""
    from . import __version__
    print(f"dlsim v{__version__}")


if __name__ == "__main__":
    main()
