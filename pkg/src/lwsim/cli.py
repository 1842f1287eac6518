"""Command-line entry point.

    lwsim baseline     --trials 5 --out results/
    lwsim adr-spoof    --scenario my.toml --seed 7 --parallel 4
    lwsim beacon-spoof --out results/
    lwsim report       --out results/

Each experiment subcommand writes ``<experiment>.csv``, ``summary.csv``, the
scenario text and ``run.json`` into ``--out``.  ``report`` rebuilds
``summary.csv`` from whatever experiment CSVs are already there.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from .experiments import RUNNERS
from .frames import MicPolicy
from .report import SUMMARY_COLUMNS, emit_report, read_csv, summarize, write_csv
from .scenario import Scenario, ScenarioError

log = logging.getLogger("lwsim")

SUBCOMMANDS = {
    "baseline": "baseline",
    "adr-spoof": "adr_spoofing",
    "beacon-spoof": "beacon_drift",
}

EXIT_SCENARIO = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lwsim", description="LoRaWAN attack simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, exp in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=f"run the {exp} experiment")
        p.add_argument("--scenario", type=Path, help="scenario TOML (defaults to the built-in one)")
        p.add_argument("--trials", type=int, help="trials per cell (overrides the scenario)")
        p.add_argument("--seed", type=int, help="base seed (overrides the scenario)")
        p.add_argument("--out", type=Path, default=Path("results"))
        p.add_argument("--parallel", type=int, default=1, help="worker threads")
        p.add_argument("--mic-policy", choices=[m.value for m in MicPolicy], help="override the scenario's MIC policy")
        p.set_defaults(experiment=exp)
    p = sub.add_parser("report", help="rebuild summary.csv from experiment CSVs")
    p.add_argument("--out", type=Path, default=Path("results"))
    return parser


def load_scenario(args) -> Scenario:
    scn = Scenario.load(args.scenario) if args.scenario else Scenario.builtin(args.experiment)
    if scn.experiment != args.experiment:
        raise ScenarioError(f"scenario is for {scn.experiment!r}, not {args.experiment!r}")
    changes = {}
    if args.trials is not None:
        changes["trials"] = args.trials
    if args.seed is not None:
        changes["base_seed"] = args.seed
    if args.mic_policy:
        changes["mic_policy"] = args.mic_policy
    return scn.replace(**changes) if changes else scn


def run_experiment(args) -> int:
    try:
        scn = load_scenario(args)
    except (ScenarioError, OSError) as exc:
        print(f"lwsim: invalid scenario: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    fn, columns = RUNNERS[scn.experiment]
    t0 = time.perf_counter()
    rows = fn(scn, parallel=args.parallel)
    log.info("%s: %d rows in %.1fs", scn.experiment, len(rows), time.perf_counter() - t0)
    paths = emit_report({scn.experiment: rows}, args.out, scenario=scn, seed=scn.base_seed)
    for path in paths:
        print(path)
    return 0


def run_report(args) -> int:
    summary = []
    for exp in RUNNERS:
        path = args.out / f"{exp}.csv"
        if path.exists():
            summary.extend(summarize(exp, read_csv(path)))
    if not summary:
        print(f"lwsim: no experiment CSVs in {args.out}", file=sys.stderr)
        return 1
    write_csv(args.out / "summary.csv", SUMMARY_COLUMNS, summary)
    print(args.out / "summary.csv")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "report":
        return run_report(args)
    return run_experiment(args)


if __name__ == "__main__":
    sys.exit(main())
