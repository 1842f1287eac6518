"""Experiment drivers: baseline channel, ADR spoofing and beacon drifting.

Each driver expands a scenario into independent trials (seed = base_seed +
trial index), runs them on a thread pool and returns rows in trial order.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .attacker import (
    AdrSpoofingAttack,
    AttackerNode,
    BeaconDriftAttack,
    Rx2Wormhole,
    WormholeConfig,
    drift_periods,
    drift_shift,
    rx2_feasible,
)
from .enddevice import BEACON_PERIOD, DeviceConfig, EndDevice
from .frames import DeviceSession, MicPolicy
from .netserver import Gateway, NetworkServer, NsConfig
from .phy import UPLINK_CHANNELS
from .scenario import Scenario, build_world
from .simkit import SECOND, ChannelModel, Engine, Medium

BASELINE_COLUMNS = ["trial", "datarate", "sent", "receive_rate", "rssi_mean", "rssi_std", "snr_mean", "snr_std"]
ADR_COLUMNS = [
    "trial",
    "wormhole",
    "datarate",
    "preceding_uplinks",
    "trigger",
    "transactions_to_target",
    "retention_uplink_success_rate",
    "retained",
    "retention_uplinks",
    "retention_accepted",
    "replays_rejected",
    "max_adr_ack_cnt",
]
BEACON_COLUMNS = ["trial", "step_size", "period", "shift_us", "downlink_received", "beacon_status", "beacon_snr", "device_mode"]


def run_trials(fn, jobs: list, parallel: int = 1) -> list:
    """Apply ``fn(*job)`` to every job; results keep job order."""
    if parallel <= 1:
        return [fn(*job) for job in jobs]
    with ThreadPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))


def _collect(observers: list, kinds: tuple):
    log = []

    def fn(kind, details):
        if kind in kinds:
            log.append((kind, details))

    observers.append(fn)
    return log


# --- baseline ---------------------------------------------------------------


def _baseline_trial(scn: Scenario, dr: int, n: int, trial: int, seed: int) -> dict:
    w = build_world(scn, seed, device_overrides=dict(initial_dr=dr, adr=False))
    ups = _collect(w.device.observers, ("uplink",))
    acc = _collect(w.ns.observers, ("uplink-accepted",))
    interval = w.device.config.uplink_interval
    w.device.start(SECOND)
    w.engine.run_until(SECOND + (n - 1) * interval + interval // 2)
    sent = len(ups)
    snr = np.array([d["snr"] for _, d in acc])
    rssi = np.array([d["rssi"] for _, d in acc])
    stat = lambda a, f: float(f(a)) if a.size else math.nan  # noqa: E731
    return dict(
        trial=trial,
        datarate=dr,
        sent=sent,
        receive_rate=len(acc) / sent if sent else math.nan,
        rssi_mean=stat(rssi, np.mean),
        rssi_std=stat(rssi, np.std),
        snr_mean=stat(snr, np.mean),
        snr_std=stat(snr, np.std),
    )


def run_baseline(scn: Scenario, trials: int | None = None, seed: int | None = None, parallel: int = 1) -> list[dict]:
    """Uplinks at each fixed DR with no attacker; gateway receive rate and link stats."""
    trials = trials or scn.trials
    base = scn.base_seed if seed is None else seed
    b = scn.baseline
    n = b.get("uplinks_per_dr", 300)
    jobs = []
    for dr in b.get("datarates", list(range(6))):
        for i in range(trials):
            idx = len(jobs)
            jobs.append((scn, dr, n, idx, base + idx))
    return run_trials(_baseline_trial, jobs, parallel)


# --- ADR spoofing -------------------------------------------------------------


def _adr_trial(scn: Scenario, wormhole: str, dr: int, preceding: int, trial: int, seed: int) -> dict:
    a = scn.attack
    w = build_world(scn, seed, device_overrides=dict(initial_dr=dr))
    eng, dev = w.engine, w.device
    cfg = dev.config
    interval = cfg.uplink_interval
    target = a.get("target_dr", 5)
    budget = a.get("budget_transactions", 60)
    entry, exit_ = w.attackers[a["entry"]], w.attackers[a["exit"]]
    attack = AdrSpoofingAttack(
        eng,
        entry,
        exit_,
        cfg.dev_addr,
        initial_dr=dr,
        target_dr=target,
        wormhole=wormhole,
        uplink_interval=interval,
        n_channels=len(cfg.channels),
        sniff_freq=a.get("sniff_freq_hz", UPLINK_CHANNELS[0]),
        t_proc1=int(a.get("t_proc1_ms", 150) * 1000),
        t_proc2=int(a.get("t_proc2_ms", 50) * 1000),
        replay_power_dbm=a.get("replay_power_dbm", 14.0),
    )
    dev_log = _collect(dev.observers, ("uplink", "link-adr", "transaction", "downlink-rejected"))
    ns_log = _collect(w.ns.observers, ("uplink-accepted",))
    t0 = SECOND
    t_start = t0 + preceding * interval - 3 * SECOND
    eng.schedule(t_start, attack.start)
    dev.start(t0)

    trigger, to_target, reached_at = "failed", None, None
    t = t_start
    while trigger == "failed":
        t += interval
        eng.run_until(t)
        n_up = sum(1 for k, d in dev_log if k == "uplink" and d["time"] >= t_start)
        for k, d in dev_log:
            if k == "link-adr" and d["time"] >= t_start and d["dr"] == target and d["accepted"]:
                trigger = "wormhole_frame" if d["source"] == entry.name else "other_frame"
                reached_at = d["time"]
                to_target = sum(1 for k2, d2 in dev_log if k2 == "uplink" and t_start <= d2["time"] <= reached_at)
                break
        if trigger == "failed" and n_up >= budget:
            break

    rate, retained, n_ret, n_acc, max_cnt = math.nan, False, 0, 0, None
    if reached_at is not None:
        guard = t + 4 * attack.state.t_timeout
        while attack.phase != "retention" and t < guard:
            t += interval
            eng.run_until(t)
        if attack.phase == "retention":
            t_sw = attack.state.switched_at
            eng.run_until(t_sw + a.get("retention_uplinks", 330) * interval)
            eng.run_until(eng.now + 8 * SECOND)
            ret_fcnts = {d["fcnt"] for k, d in dev_log if k == "uplink" and d["time"] >= t_sw and d["time"] <= eng.now - 8 * SECOND}
            acc_fcnts = {d["fcnt"] for _, d in ns_log}
            n_ret = len(ret_fcnts)
            n_acc = len(ret_fcnts & acc_fcnts)
            rate = n_acc / n_ret if n_ret else math.nan
            max_cnt = max((d["adr_ack_cnt"] for k, d in dev_log if k == "transaction" and d["time"] >= t_sw), default=0)
        drs = [d["current_dr"] for k, d in dev_log if k == "transaction" and d["time"] > reached_at]
        retained = attack.phase == "retention" and bool(drs) and min(drs) == target
    rejected = sum(1 for k, d in dev_log if k == "downlink-rejected" and d["source"] == entry.name)
    return dict(
        trial=trial,
        wormhole=wormhole,
        datarate=dr,
        preceding_uplinks=preceding,
        trigger=trigger,
        transactions_to_target=to_target,
        retention_uplink_success_rate=rate,
        retained=retained,
        retention_uplinks=n_ret,
        retention_accepted=n_acc,
        replays_rejected=rejected,
        max_adr_ack_cnt=max_cnt,
    )


def run_adr_spoofing(scn: Scenario, trials: int | None = None, seed: int | None = None, parallel: int = 1) -> list[dict]:
    """One row per trial over every (cell, preceding_uplinks) combination."""
    trials = trials or scn.trials
    base = scn.base_seed if seed is None else seed
    a = scn.attack
    jobs = []
    for cell in a.get("cells", [{"wormhole": "rx2", "datarate": 2}]):
        for pre in a.get("preceding_uplinks", [1]):
            for _ in range(trials):
                idx = len(jobs)
                jobs.append((scn, cell["wormhole"], cell["datarate"], pre, idx, base + idx))
    return run_trials(_adr_trial, jobs, parallel)


# --- beacon drifting ------------------------------------------------------------


def _beacon_trial(scn: Scenario, step: int, trial: int, seed: int) -> list[dict]:
    a = scn.attack
    w = build_world(scn, seed, device_overrides=dict(class_b=True, uplinks=False))
    eng, dev, ns = w.engine, w.device, w.ns
    warmup = a.get("warmup_periods", 3)
    tail = a.get("tail_periods", 3)
    first = BEACON_PERIOD
    t_attack = first + warmup * BEACON_PERIOD
    n_drift = drift_periods(step)
    last_period = n_drift + tail - 1
    horizon = t_attack + (last_period + 1) * BEACON_PERIOD
    log = _collect(dev.observers, ("beacon", "ping"))
    ns.start_beacons(first)
    dev.start_class_b(SECOND, first)
    k = 1
    while k * BEACON_PERIOD < horizon:
        eng.schedule(k * BEACON_PERIOD - SECOND, ns.queue_app, dev.config.dev_addr, bytes([k & 0xFF]))
        k += 1
    drift = BeaconDriftAttack(eng, w.attackers[a["node"]], step, jam_payload_bytes=a.get("jam_payload_bytes", 0))
    eng.schedule(0, drift.start, t_attack)
    eng.run_until(horizon)

    rows = []
    for p in range(-1, last_period + 1):
        t_p = t_attack + p * BEACON_PERIOD
        beacons = [d for kind, d in log if kind == "beacon" and round((d["expected"] - t_p) / BEACON_PERIOD) == 0]
        pings = [d for kind, d in log if kind == "ping" and t_p <= d["time"] < t_p + BEACON_PERIOD]
        b = beacons[0] if beacons else None
        rows.append(
            dict(
                trial=trial,
                step_size=step,
                period=p,
                shift_us=drift_shift(p, step),
                downlink_received=bool(pings),
                beacon_status=b["status"] if b else "lost",
                beacon_snr=b["snr"] if b else math.nan,
                device_mode=b["mode"] if b else "classA",
            )
        )
    return rows


def run_beacon_spoofing(scn: Scenario, trials: int | None = None, seed: int | None = None, parallel: int = 1) -> list[dict]:
    """Per-period rows for every step size and trial."""
    trials = trials or scn.trials
    base = scn.base_seed if seed is None else seed
    jobs = []
    for step in scn.attack.get("steps", [1, 2, 3, 4, 6, 8]):
        for _ in range(trials):
            idx = len(jobs)
            jobs.append((scn, step, idx, base + idx))
    return [row for rows in run_trials(_beacon_trial, jobs, parallel) for row in rows]


RUNNERS = {
    "baseline": (run_baseline, BASELINE_COLUMNS),
    "adr_spoofing": (run_adr_spoofing, ADR_COLUMNS),
    "beacon_drift": (run_beacon_spoofing, BEACON_COLUMNS),
}


# --- focused rx2 timing check ---------------------------------------------------


@dataclass
class Rx2Outcome:
    feasible: bool
    replayed: bool
    landed: bool
    rejected: bool


def simulate_rx2_replay(
    dr: int,
    uplink_len: int = 14,
    downlink_len: int = 17,
    t_proc1: int = 150_000,
    t_proc2: int = 50_000,
    policy: MicPolicy = MicPolicy.V11,
    seed: int = 0,
) -> Rx2Outcome:
    """Single transaction through an rx2 wormhole with no direct ED-GW link.

    Frame sizes are set through the app payload (13 + n bytes with an FPort;
    12 bytes means an empty frame).  The server's ADR is neutralised so the
    downlink size is exactly ``downlink_len``.
    """
    eng = Engine(seed)
    ch = ChannelModel(snr_jitter_sigma_db=0.0)
    ch.set_link("ed", "entry", 122.0)
    ch.set_link("exit", "gw", 121.0)
    med = Medium(eng, ch)
    cfg = DeviceConfig(
        initial_dr=dr,
        app_payload_len=None if uplink_len == 12 else uplink_len - 13,
        channels=(UPLINK_CHANNELS[0],),
        mic_policy=policy,
        adr_ack_limit=1,
    )
    dev = med.add(EndDevice("ed", cfg, DeviceSession.abp(cfg.dev_addr), rng=eng.rng("device")))
    gw = med.add(Gateway("gw"))
    entry = med.add(AttackerNode("entry"))
    exit_ = med.add(AttackerNode("exit"))
    ns = NetworkServer(eng, NsConfig(mic_policy=policy, margin_db=1000.0))
    ns.add_gateway(gw)
    ns.register(DeviceSession.abp(cfg.dev_addr), dr=dr)
    if downlink_len == 12:
        dev.adr.adr_ack_cnt = cfg.adr_ack_limit
    else:
        ns.queue_app(cfg.dev_addr, bytes(downlink_len - 13))
    hole = Rx2Wormhole(eng, entry, exit_, WormholeConfig("rx2", cfg.dev_addr, sniff_dr=dr, t_proc1=t_proc1, t_proc2=t_proc2))
    hole.activate()
    log = _collect(dev.observers, ("downlink", "downlink-rejected"))
    dev.start(SECOND)
    eng.run_until(SECOND + cfg.uplink_interval - 1)
    landed = any(k == "downlink" and d["window"] == "rx2" and d["source"] == "entry" for k, d in log)
    rejected = any(k == "downlink-rejected" and d["source"] == "entry" for k, d in log)
    return Rx2Outcome(
        feasible=rx2_feasible(dr, uplink_len, downlink_len, t_proc1, t_proc2),
        replayed=hole.stats.downlinks_replayed > 0,
        landed=landed,
        rejected=rejected,
    )
