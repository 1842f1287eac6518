"""CSV output and summary statistics.

Values are formatted deterministically (fixed float precision, lowercase
booleans, empty cells for missing values) so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

SUMMARY_COLUMNS = ["experiment", "group", "metric", "n", "mean", "sd", "p10", "p50", "p90"]

# group-by keys and metrics summarised per experiment
SUMMARY_PLAN = {
    "baseline": (("datarate",), ("receive_rate", "snr_mean", "rssi_mean")),
    "adr_spoofing": (("preceding_uplinks",), ("transactions_to_target", "retention_uplink_success_rate")),
    "adr_spoofing_cells": (("wormhole", "datarate"), ("transactions_to_target",)),
    "beacon_drift": (("step_size", "period"), ("downlink_received",)),
}


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return "nan" if math.isnan(value) else f"{float(value):.6f}"
    return str(value)


def write_csv(path, columns: list[str], rows: list[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row.get(c)) for c in columns])


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _num(v):
    if isinstance(v, str):
        if v in ("", "nan"):
            return math.nan
        if v in ("true", "false"):
            return 1.0 if v == "true" else 0.0
        return float(v)
    if v is None:
        return math.nan
    return float(v)


def summarize(experiment: str, rows: list[dict]) -> list[dict]:
    """Grouped mean/SD/percentiles for the experiment's key metrics."""
    out = []
    plans = [(experiment, SUMMARY_PLAN[experiment])]
    if experiment == "adr_spoofing":
        plans.append((experiment, SUMMARY_PLAN["adr_spoofing_cells"]))
    for name, (keys, metrics) in plans:
        groups: dict = {}
        for row in rows:
            groups.setdefault(tuple(str(row[k]) for k in keys), []).append(row)
        for gkey in sorted(groups, key=lambda g: tuple(_sort_key(x) for x in g)):
            label = ";".join(f"{k}={v}" for k, v in zip(keys, gkey))
            for m in metrics:
                vals = np.array([_num(r.get(m)) for r in groups[gkey]], dtype=float)
                vals = vals[~np.isnan(vals)]
                stats = dict(experiment=name, group=label, metric=m, n=int(vals.size))
                if vals.size:
                    p10, p50, p90 = np.percentile(vals, [10, 50, 90])
                    stats.update(
                        mean=float(vals.mean()),
                        sd=float(vals.std(ddof=1)) if vals.size > 1 else math.nan,
                        p10=float(p10),
                        p50=float(p50),
                        p90=float(p90),
                    )
                out.append(stats)
    return out


def _sort_key(x: str):
    try:
        return (0, float(x), "")
    except ValueError:
        return (1, 0.0, x)


def emit_report(records: dict, out_dir, scenario=None, seed: int | None = None, columns: dict | None = None) -> list[Path]:
    """Write ``<experiment>.csv`` per experiment, ``summary.csv`` and the run inputs.

    ``records`` maps experiment name to its rows.  The scenario text and seed
    are stored alongside so the run can be reproduced exactly.
    """
    from .experiments import RUNNERS

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    summary = []
    for exp, rows in records.items():
        cols = (columns or {}).get(exp) or RUNNERS[exp][1]
        path = out / f"{exp}.csv"
        write_csv(path, cols, rows)
        written.append(path)
        summary.extend(summarize(exp, rows))
    path = out / "summary.csv"
    write_csv(path, SUMMARY_COLUMNS, summary)
    written.append(path)
    if scenario is not None:
        (out / "scenario.toml").write_text(scenario.source)
        meta = {"scenario": scenario.name, "experiment": scenario.experiment, "seed": seed, "trials": scenario.trials}
        (out / "run.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
        written += [out / "scenario.toml", out / "run.json"]
    return written
