import csv
import json
import math

import pytest

from lwsim import cli
from lwsim.experiments import ADR_COLUMNS, BASELINE_COLUMNS, BEACON_COLUMNS, _baseline_trial, run_baseline, run_trials
from lwsim.frames import MicPolicy
from lwsim.report import SUMMARY_COLUMNS, emit_report, fmt, read_csv, summarize, write_csv
from lwsim.scenario import Scenario, ScenarioError, build_world

MINI = """
version = 1
name = "mini"
experiment = "baseline"
trials = 2
base_seed = 40

[baseline]
uplinks_per_dr = 12
datarates = [0, 5]

[channel]
snr_jitter_sigma_db = 0.8

[nodes.ed]
role = "enddevice"

[nodes.gw]
role = "gateway"

[[links]]
a = "ed"
b = "gw"
attenuation_db = 143.5
"""


def mini(**changes):
    scn = Scenario.from_text(MINI)
    return scn.replace(**changes) if changes else scn


# --- scenarios ---


@pytest.mark.parametrize("exp", ["baseline", "adr_spoofing", "beacon_drift"])
def test_builtin_scenarios_load(exp):
    scn = Scenario.builtin(exp)
    assert scn.experiment == exp and scn.channels == (868_100_000, 868_300_000, 868_500_000)
    w = build_world(scn, 1)
    assert w.device is not None and len(w.gateways) == 1


def test_builtin_unknown():
    with pytest.raises(ScenarioError):
        Scenario.builtin("nope")


BAD = [
    ("trials = 2", "trials = 0"),
    ('role = "gateway"', 'role = "router"'),
    ('b = "gw"', 'b = "ghost"'),
    ("attenuation_db = 143.5", "attenuation_db = -1.0"),
    ('experiment = "baseline"', 'experiment = "fuzz"'),
    ("version = 1", "version = 9"),
    ('name = "mini"', 'name = "mini"\nmic_policy = "V12"'),
    ('name = "mini"', 'name = "mini"\ncolour = "red"'),
    ('[nodes.gw]\nrole = "gateway"', ""),
    ("[baseline]", "[baseline"),
]


@pytest.mark.parametrize("old,new", BAD)
def test_invalid_scenarios_rejected(old, new):
    assert old in MINI
    with pytest.raises(ScenarioError):
        Scenario.from_text(MINI.replace(old, new))


def test_attack_references_checked():
    text = Scenario.builtin("adr_spoofing").source
    with pytest.raises(ScenarioError):
        Scenario.from_text(text.replace('exit = "exit"', 'exit = "entry"'))
    with pytest.raises(ScenarioError):
        Scenario.from_text(text.replace('entry = "entry"', 'entry = "gw"'))
    with pytest.raises(ScenarioError):
        Scenario.from_text(text.replace('wormhole = "rx2", datarate = 2', 'wormhole = "tunnel", datarate = 2'))
    beacon = Scenario.builtin("beacon_drift").source
    with pytest.raises(ScenarioError):
        Scenario.from_text(beacon.replace("steps = [1, 2, 3, 4, 6, 8]", "steps = [0]"))


def test_trial_seeds_are_base_plus_index():
    scn = mini()
    assert [scn.trial_seed(i) for i in range(3)] == [40, 41, 42]
    rows = run_baseline(scn)
    assert [r["trial"] for r in rows] == [0, 1, 2, 3]


def test_replace_validates_and_copies():
    scn = mini()
    hard = scn.replace(mic_policy="Hardened")
    assert hard.mic_policy is MicPolicy.HARDENED and scn.mic_policy is MicPolicy.V11
    with pytest.raises(ScenarioError):
        scn.replace(trials=-1)


# --- experiments ---


def test_missing_link_means_nothing_received():
    scn = mini()
    scn.links = []
    rows = run_baseline(scn, trials=1)
    assert all(r["receive_rate"] == 0.0 and r["sent"] == 12 for r in rows)
    assert all(math.isnan(r["snr_mean"]) for r in rows)


def test_trials_are_exchangeable():
    scn = mini()
    jobs = [(scn, dr, 12, i, scn.trial_seed(i)) for i, dr in enumerate([0, 5, 0, 5])]
    fwd = run_trials(_baseline_trial, jobs)
    rev = run_trials(_baseline_trial, jobs[::-1])
    assert fwd == rev[::-1]


def test_parallel_matches_serial():
    scn = mini()
    assert run_baseline(scn, parallel=4) == run_baseline(scn, parallel=1)


# --- reports ---


def test_fmt_is_canonical():
    assert [fmt(None), fmt(True), fmt(0.1), fmt(math.nan), fmt(3)] == ["", "true", "0.100000", "nan", "3"]


@pytest.mark.parametrize("exp,cols", [("baseline", BASELINE_COLUMNS), ("adr_spoofing", ADR_COLUMNS), ("beacon_drift", BEACON_COLUMNS)])
def test_empty_records_give_header_only(tmp_path, exp, cols):
    emit_report({exp: []}, tmp_path)
    assert (tmp_path / f"{exp}.csv").read_text() == ",".join(cols) + "\n"
    assert (tmp_path / "summary.csv").read_text() == ",".join(SUMMARY_COLUMNS) + "\n"


def test_summary_groups_transactions_by_preceding():
    rows = [
        dict(preceding_uplinks=p, wormhole="rx2", datarate=2, transactions_to_target=v, retention_uplink_success_rate=0.03)
        for p, v in [(1, 2), (1, 4), (10, 3), (10, 3), (20, 1)]
    ]
    out = summarize("adr_spoofing", rows)
    tt = {r["group"]: r for r in out if r["metric"] == "transactions_to_target" and r["group"].startswith("preceding")}
    assert list(tt) == ["preceding_uplinks=1", "preceding_uplinks=10", "preceding_uplinks=20"]
    assert tt["preceding_uplinks=1"]["mean"] == 3.0 and tt["preceding_uplinks=1"]["sd"] == pytest.approx(math.sqrt(2))
    assert tt["preceding_uplinks=10"]["sd"] == 0.0
    assert tt["preceding_uplinks=20"]["n"] == 1 and math.isnan(tt["preceding_uplinks=20"]["sd"])
    assert any(r["group"] == "wormhole=rx2;datarate=2" for r in out)


def test_csv_round_trip(tmp_path):
    rows = [dict(a=1, b=0.5, c=True, d=None)]
    write_csv(tmp_path / "x.csv", ["a", "b", "c", "d"], rows)
    assert read_csv(tmp_path / "x.csv") == [dict(a="1", b="0.500000", c="true", d="")]


# --- CLI ---


def run_cli(argv, capsys):
    code = cli.main(argv)
    return code, capsys.readouterr()


def test_cli_bad_scenario_exits_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text(MINI.replace("trials = 2", "trials = 0"))
    code, out = run_cli(["baseline", "--scenario", str(bad), "--out", str(tmp_path / "o")], capsys)
    assert code == cli.EXIT_SCENARIO and "invalid scenario" in out.err
    code, _ = run_cli(["baseline", "--scenario", str(tmp_path / "missing.toml")], capsys)
    assert code == cli.EXIT_SCENARIO
    code, _ = run_cli(["adr-spoof", "--scenario", str(tmp_path / "bad.toml")], capsys)
    assert code == cli.EXIT_SCENARIO


def test_cli_experiment_mismatch(tmp_path, capsys):
    path = tmp_path / "mini.toml"
    path.write_text(MINI)
    code, out = run_cli(["beacon-spoof", "--scenario", str(path)], capsys)
    assert code == cli.EXIT_SCENARIO and "baseline" in out.err


def test_cli_run_writes_reproducible_outputs(tmp_path, capsys):
    path = tmp_path / "mini.toml"
    path.write_text(MINI)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code, _ = run_cli(["baseline", "--scenario", str(path), "--trials", "1", "--seed", "9", "--out", str(out)], capsys)
        assert code == 0
        outs.append(out)
    for f in ("baseline.csv", "summary.csv", "scenario.toml", "run.json"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    meta = json.loads((outs[0] / "run.json").read_text())
    assert meta == {"experiment": "baseline", "scenario": "mini", "seed": 9, "trials": 1}
    with (outs[0] / "baseline.csv").open() as fh:
        assert next(csv.reader(fh)) == BASELINE_COLUMNS


def test_cli_report_rebuilds_summary(tmp_path, capsys):
    path = tmp_path / "mini.toml"
    path.write_text(MINI)
    run_cli(["baseline", "--scenario", str(path), "--out", str(tmp_path)], capsys)
    before = (tmp_path / "summary.csv").read_bytes()
    (tmp_path / "summary.csv").unlink()
    code, out = run_cli(["report", "--out", str(tmp_path)], capsys)
    assert code == 0 and (tmp_path / "summary.csv").read_bytes() == before
    code, _ = run_cli(["report", "--out", str(tmp_path / "empty")], capsys)
    assert code == 1


def test_cli_requires_subcommand(capsys):
    with pytest.raises(SystemExit):
        cli.main([])


def test_builtin_baseline_receive_rates():
    rows = run_baseline(Scenario.builtin("baseline"))
    rate = {r["datarate"]: r["receive_rate"] for r in rows}
    assert all(r["sent"] == 300 for r in rows)
    assert all(rate[dr] >= 0.95 for dr in range(4))
    assert rate[5] == 0.0
    snr = {r["datarate"]: r["snr_mean"] for r in rows}
    assert snr[0] < -7.5
