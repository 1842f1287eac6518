"""Attacker nodes and attack orchestration.

Two single-channel radios bridge the ED-GW hop: the *entry* node sits next to
the end device, the *exit* node next to the gateway.  Each can be tuned to one
(frequency, data rate) at a time.  All decisions use only what the radios
observe; the attacker never reads simulator ground truth.

Wormholes replay captured bytes unchanged.  Uplinks are replayed on their
original channel and DR (the only legal choice once the MIC covers them);
downlinks may move to rx2 because no policy short of the hardened one binds
their transmission parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from . import frames as fr
from .enddevice import BEACON_PERIOD, BEACON_SYMBOL, RX_WINDOW_SYMBOLS
from .frames import BeaconPayload, Direction
from .phy import (
    BEACON_FREQ,
    RX2_FREQ,
    UPLINK_CHANNELS,
    beacon_params,
    data_params,
    dr_to_sf,
    symbol_duration,
    time_on_air,
)
from .simkit import FOREVER, SECOND, Engine, RadioNode, RxMeta, Transmission

T_PROC1 = 150_000
T_PROC2 = 50_000
BEACON_AIRTIME = time_on_air(beacon_params(), fr.BEACON_LEN)
TOTAL_DRIFT = BEACON_AIRTIME + 5 * BEACON_SYMBOL


def rx2_feasible(
    dr_up: int, uplink_len: int, downlink_len: int, t_proc1: int = T_PROC1, t_proc2: int = T_PROC2, gap: int = SECOND
) -> bool:
    """Whether an uplink replay plus the captured rx1 downlink fit before rx2.

    t_proc1 + t_uplink + t_downlink + t_proc2 <= gap, both frames at ``dr_up``.
    """
    if uplink_len < fr.MIN_DATA_FRAME or downlink_len < fr.MIN_DATA_FRAME:
        raise ValueError("data frames are at least 12 bytes")
    p = data_params(dr_up)
    return t_proc1 + time_on_air(p, uplink_len) + time_on_air(p, downlink_len) + t_proc2 <= gap


def timeout_uplinks(n_channels: int, miss_prob: float = 0.01) -> int:
    """Uplinks without a sighting before the attacker concludes the ED switched DR.

    Smallest k with ((n-1)/n)^k <= miss_prob.
    """
    if n_channels < 1 or not 0 < miss_prob < 1:
        raise ValueError("need n >= 1 and 0 < miss_prob < 1")
    if n_channels == 1:
        return 1
    return math.ceil(math.log(miss_prob) / math.log((n_channels - 1) / n_channels) - 1e-12)


def switch_timeout(uplink_interval: int, n_channels: int, miss_prob: float = 0.01) -> int:
    """t_timeout = (1/f_up) * ceil(log_{(n-1)/n}(miss_prob)) in µs."""
    return uplink_interval * timeout_uplinks(n_channels, miss_prob)


def drift_shift(period: int, step_symbols: int, total: int = TOTAL_DRIFT) -> int:
    """Cumulative beacon advance (µs) in drifting period ``period`` (0-based)."""
    if period < 0:
        return 0
    return min((period + 1) * step_symbols * BEACON_SYMBOL, total)


def drift_periods(step_symbols: int, total: int = TOTAL_DRIFT) -> int:
    """Number of periods until the full drift is reached."""
    return math.ceil(total / (step_symbols * BEACON_SYMBOL))


class AttackerNode(RadioNode):
    """Single-channel attacker radio; events are delegated to ``controller``."""

    def __init__(self, name: str, power_dbm: float = 14.0):
        super().__init__(name)
        self.power_dbm = power_dbm
        self.controller = None

    def tune(self, freq_hz: int, sf: int, inverted: bool = False, label: str = "sniff"):
        self.stop_listening()
        return self.listen(freq_hz, sf, inverted, self.engine.now, FOREVER, label=label)

    def on_header(self, tx, meta):
        if self.controller is not None:
            self.controller.on_header(self, tx, meta)

    def on_rx(self, tx, meta):
        if self.controller is not None:
            self.controller.on_rx(self, tx, meta)


@dataclass
class WormholeConfig:
    variant: str
    target_dev_addr: int
    sniff_freq: int = UPLINK_CHANNELS[0]
    sniff_dr: int = 0
    t_proc1: int = T_PROC1
    t_proc2: int = T_PROC2
    jam_enabled: bool = True
    replay_power_dbm: float = 14.0
    d_rx1: int = SECOND
    d_rx2: int = SECOND
    rx2_freq: int = RX2_FREQ
    rx2_dr: int = 0

    VARIANTS = ("unidirectional", "rx2", "downlink_delayed")

    def __post_init__(self):
        if self.variant not in self.VARIANTS:
            raise ValueError(f"unknown wormhole variant {self.variant!r}")


@dataclass
class WormholeStats:
    sniffed: int = 0
    jammed: int = 0
    uplinks_replayed: int = 0
    downlinks_captured: int = 0
    downlinks_replayed: int = 0
    late: int = 0


class Wormhole:
    """Sniff, jam and replay between an entry and an exit node.

    ``forward`` decides per captured uplink whether it is replayed to the
    gateway; ``on_seen`` is notified of every target uplink observed.
    """

    def __init__(self, engine: Engine, entry: AttackerNode, exit: AttackerNode, config: WormholeConfig):
        if entry is exit:
            raise ValueError("entry and exit must be distinct nodes")
        self.engine = engine
        self.entry = entry
        self.exit = exit
        self.config = config
        self.stats = WormholeStats()
        self.forward = lambda frame: True
        self.on_seen = None
        self.log: list[dict] = []
        self._dl_watch = []
        self._own: set[bytes] = set()

    def activate(self):
        cfg = self.config
        self.entry.controller = self
        self.exit.controller = self
        self.exit.stop_listening()
        self._dl_watch = []
        self.entry.tune(cfg.sniff_freq, dr_to_sf(cfg.sniff_dr))

    def _view(self, tx: Transmission):
        # the attacker recognises its own replays overheard on the other side
        if tx.payload in self._own:
            return None
        try:
            frame = fr.decode(tx.core_payload, parse_fopts=False)
        except fr.FrameError:
            return None
        if frame.dev_addr != self.config.target_dev_addr:
            return None
        return frame

    # --- entry: sniff + trigger jam ---

    def on_header(self, node, tx, meta):
        if node is not self.entry or tx.inverted or tx.kind != "data":
            return
        frame = self._view(tx)
        if frame is None or frame.direction is not Direction.UPLINK:
            return
        if self.config.jam_enabled:
            now = self.engine.now
            jam = Transmission(
                self.exit.name,
                tx.params.with_(power_dbm=self.exit.power_dbm),
                now,
                kind="jam",
                duration=max(tx.end - now, 1),
                tags={"jam_for": tx.tx_id},
            )
            self.exit.transmit(jam)
            self.stats.jammed += 1

    def on_rx(self, node, tx, meta):
        frame = self._view(tx)
        if frame is None:
            return
        if node is self.entry and frame.direction is Direction.UPLINK and not tx.inverted:
            self.stats.sniffed += 1
            if self.on_seen is not None:
                self.on_seen(tx, frame)
            self.captured(tx, frame)
        elif node is self.exit and frame.direction is Direction.DOWNLINK and tx.inverted:
            self.stats.downlinks_captured += 1
            self.downlink_captured(tx, frame)

    # --- hooks ---

    def captured(self, tx: Transmission, frame: fr.Frame):
        if self.forward(frame):
            self.replay_uplink(tx, tx.end + self.config.t_proc1)

    def downlink_captured(self, tx: Transmission, frame: fr.Frame):
        pass

    # --- primitives ---

    def replay_uplink(self, tx: Transmission, at: int, watch: dict | None = None):
        cfg = self.config

        def fire():
            rep = Transmission(
                self.exit.name,
                tx.params.with_(power_dbm=cfg.replay_power_dbm),
                self.engine.now,
                tx.payload,
                tags={"replay": "uplink", "orig": tx.tx_id},
            )
            self._own.add(tx.payload)
            self.exit.transmit(rep)
            self.stats.uplinks_replayed += 1
            self.log.append({"event": "uplink-replay", "time": self.engine.now, "fcnt16": fr.peek_header(tx.payload)[2]})
            if cfg.variant != "unidirectional":
                t_rx1 = rep.end + cfg.d_rx1
                win_len = RX_WINDOW_SYMBOLS * symbol_duration(tx.params)
                if self.exit.can_listen(t_rx1, t_rx1 + win_len):
                    w = self.exit.listen(tx.params.freq_hz, tx.params.sf, True, t_rx1, t_rx1 + win_len, label="dl")
                    self._dl_watch.append((w, watch or {}))

        self.engine.schedule(at, fire)

    def replay_downlink(self, tx: Transmission, at: int, params, tag: str):
        def fire():
            rep = Transmission(
                self.entry.name,
                params.with_(power_dbm=self.entry.power_dbm),
                self.engine.now,
                tx.payload,
                inverted=True,
                tags={"replay": tag, "orig": tx.tx_id},
            )
            self._own.add(tx.payload)
            self.entry.transmit(rep)
            self.stats.downlinks_replayed += 1
            self.log.append({"event": "downlink-replay", "time": self.engine.now, "window": tag})

        self.engine.schedule(at, fire)

    def _watch_for(self, meta: RxMeta) -> dict:
        for i, (w, info) in enumerate(self._dl_watch):
            if w.start <= meta.time <= w.end:
                del self._dl_watch[i]
                self.exit.stop_listening(w)
                return info
        return {}


class Rx2Wormhole(Wormhole):
    """Replay the uplink, catch the rx1 answer, replay it into the ED's rx2."""

    def __init__(self, engine, entry, exit, config: WormholeConfig):
        super().__init__(engine, entry, exit, config)
        config.variant = "rx2"

    def captured(self, tx, frame):
        if not self.forward(frame):
            return
        cfg = self.config
        rx2_open = tx.end + cfg.d_rx1 + cfg.d_rx2
        self.replay_uplink(tx, tx.end + cfg.t_proc1, {"rx2_open": rx2_open})

    def downlink_captured(self, tx, frame):
        cfg = self.config
        info = self._watch_for(RxMeta(tx.start, 0, 0, 0, 0))
        rx2_open = info.get("rx2_open")
        if rx2_open is None:
            return
        ready = self.engine.now + cfg.t_proc2
        if ready <= rx2_open:
            self.replay_downlink(tx, rx2_open, data_params(cfg.rx2_dr, cfg.rx2_freq), "rx2")
        else:
            self.stats.late += 1
            self.log.append({"event": "rx2-late", "time": self.engine.now, "slack": rx2_open - ready})


class DownlinkDelayedWormhole(Wormhole):
    """Keep the captured downlink and play it into rx1 of the next observed uplink."""

    def __init__(self, engine, entry, exit, config: WormholeConfig):
        super().__init__(engine, entry, exit, config)
        config.variant = "downlink_delayed"
        self.stored: tuple[Transmission, fr.Frame] | None = None

    def captured(self, tx, frame):
        cfg = self.config
        t_up = tx.end + cfg.t_proc1
        if self.stored is not None:
            dl_tx, _ = self.stored
            self.stored = None
            t_dl = tx.end + cfg.d_rx1
            self.replay_downlink(dl_tx, t_dl, dl_tx.params, "rx1")
            # forwarding the downlink back has priority; the uplink follows it
            t_up = max(t_up, t_dl + dl_tx.duration + cfg.t_proc1)
        if self.forward(frame):
            self.replay_uplink(tx, t_up)

    def downlink_captured(self, tx, frame):
        self._watch_for(RxMeta(tx.start, 0, 0, 0, 0))
        if self.stored is not None and self.stored[1].fcnt >= frame.fcnt:
            return
        # a newer downlink supersedes the stored one
        self.stored = (tx, frame)


def make_wormhole(engine, entry, exit, config: WormholeConfig) -> Wormhole:
    cls = {"rx2": Rx2Wormhole, "downlink_delayed": DownlinkDelayedWormhole, "unidirectional": Wormhole}[config.variant]
    return cls(engine, entry, exit, config)


# --- ADR spoofing -----------------------------------------------------------


@dataclass
class AdrSpoofState:
    phase: str = "idle"
    initial_dr: int = 0
    target_dr: int = 5
    uplinks_since_last_seen: int = 0
    t_timeout: int = 0
    last_seen: int | None = None
    switched_at: int | None = None
    forwarded: dict = field(default_factory=lambda: {"spoofing": 0, "retention": 0})
    suppressed: dict = field(default_factory=lambda: {"spoofing": 0, "retention": 0})


class AdrSpoofingAttack:
    """Two-phase ADR spoofing.

    Spoofing: a wormhole on the ED's current DR forwards uplinks (boosting the
    SNR the server sees) but never uplinks carrying MAC answers, so the server
    keeps resending its LinkADRReq.  When no uplink has been seen on the old DR
    for ``t_timeout`` the attacker retunes to the target DR.

    Retention: every uplink is jammed; only those with ADRACKReq set pass
    through an rx2 wormhole, so the device's ADR_ACK_CNT keeps being reset.
    """

    def __init__(
        self,
        engine: Engine,
        entry: AttackerNode,
        exit: AttackerNode,
        target_dev_addr: int,
        initial_dr: int,
        target_dr: int = 5,
        wormhole: str = "rx2",
        uplink_interval: int = 12 * SECOND,
        n_channels: int = 3,
        sniff_freq: int = UPLINK_CHANNELS[0],
        t_proc1: int = T_PROC1,
        t_proc2: int = T_PROC2,
        replay_power_dbm: float = 14.0,
    ):
        self.engine = engine
        base = dict(
            target_dev_addr=target_dev_addr,
            sniff_freq=sniff_freq,
            t_proc1=t_proc1,
            t_proc2=t_proc2,
            replay_power_dbm=replay_power_dbm,
        )
        self.spoofer = make_wormhole(engine, entry, exit, WormholeConfig(wormhole, sniff_dr=initial_dr, **base))
        self.retainer = Rx2Wormhole(engine, entry, exit, WormholeConfig("rx2", sniff_dr=target_dr, **base))
        self.spoofer.forward = lambda f: len(f.fopts_bytes) == 0
        self.retainer.forward = lambda f: f.adr_ack_req
        self.spoofer.on_seen = self._seen
        self.retainer.on_seen = self._seen
        self.state = AdrSpoofState(
            initial_dr=initial_dr,
            target_dr=target_dr,
            t_timeout=switch_timeout(uplink_interval, n_channels),
        )
        self._check = None

    @property
    def phase(self) -> str:
        return self.state.phase

    def start(self):
        self.state.phase = "spoofing"
        self.spoofer.activate()
        self._seen_at(self.engine.now)

    def _seen(self, tx, frame):
        st = self.state
        key = st.phase if st.phase in st.forwarded else None
        active = self.spoofer if st.phase == "spoofing" else self.retainer
        if key:
            (st.forwarded if active.forward(frame) else st.suppressed)[key] += 1
        if st.phase == "spoofing":
            if tx.params.dr == st.target_dr:
                self._switch()
            else:
                self._seen_at(self.engine.now)

    def _seen_at(self, t):
        self.state.last_seen = t
        if self._check is not None:
            self._check.cancel()
        self._check = self.engine.schedule(t + self.state.t_timeout, self._timeout)

    def _timeout(self):
        self._check = None
        if self.state.phase == "spoofing":
            self._switch()

    def _switch(self):
        st = self.state
        st.phase = "retention"
        st.switched_at = self.engine.now
        if self._check is not None:
            self._check.cancel()
            self._check = None
        self.retainer.activate()


# --- beacon drifting --------------------------------------------------------


@dataclass
class BeaconDriftState:
    step_symbols: int
    accumulated_shift: int = 0
    total_target_shift: int = TOTAL_DRIFT
    jam_payload_bytes: int = 0
    phase: str = "idle"
    sync_time: int | None = None
    sync_gps: int | None = None
    shifts: list = field(default_factory=list)

    def __post_init__(self):
        if self.step_symbols < 1:
            raise ValueError("step must be at least one symbol")


class BeaconDriftAttack:
    """Self-synchronise to the true beacon, then prepone spoofed beacons.

    Spoofed beacon for drifting period p (0-based) goes out
    ``drift_shift(p, step)`` before the true one; once the full drift (beacon
    airtime plus 5 symbols) is reached the shift is held.  Optional random
    bytes appended after the 17-byte beacon act as a jamming tail.
    """

    def __init__(
        self,
        engine: Engine,
        node: AttackerNode,
        step_symbols: int,
        jam_payload_bytes: int = 0,
        gw_info: bytes = b"SPOOF",
        rng=None,
    ):
        self.engine = engine
        self.node = node
        self.state = BeaconDriftState(step_symbols, jam_payload_bytes=jam_payload_bytes)
        self.gw_info = gw_info
        self.rng = rng if rng is not None else engine.rng("beacon-drift")
        self.attack_start: int | None = None
        self.first_beacon: int | None = None

    def start(self, attack_start: int):
        """Sync now; the first shifted beacon replaces the first true beacon at or after ``attack_start``."""
        self.attack_start = attack_start
        self.state.phase = "syncing"
        self.node.controller = self
        self.node.tune(BEACON_FREQ, 9, inverted=True, label="beacon-sync")

    def on_header(self, node, tx, meta):
        pass

    def on_rx(self, node, tx, meta):
        if self.state.phase != "syncing" or tx.kind != "beacon":
            return
        try:
            payload = BeaconPayload.decode(tx.core_payload)
        except fr.FrameError:
            return
        st = self.state
        st.sync_time, st.sync_gps = tx.start, payload.gps_time_s
        st.phase = "synced"
        self.node.stop_listening()
        k = max(0, -(-(self.attack_start - tx.start) // BEACON_PERIOD))
        self.first_beacon = tx.start + k * BEACON_PERIOD
        if self.first_beacon - drift_shift(0, st.step_symbols) <= self.engine.now:
            self.first_beacon += BEACON_PERIOD
        self._arm(0)

    def _arm(self, period: int):
        t_true = self.first_beacon + period * BEACON_PERIOD
        shift = drift_shift(period, self.state.step_symbols, self.state.total_target_shift)
        self.engine.schedule(t_true - shift, self._fire, period, t_true, shift)

    def _fire(self, period: int, t_true: int, shift: int):
        st = self.state
        st.accumulated_shift = shift
        st.phase = "holding" if shift >= st.total_target_shift else "drifting"
        st.shifts.append(shift)
        gps = st.sync_gps + (t_true - st.sync_time) // SECOND
        body = BeaconPayload(gps, self.gw_info).encode()
        tail = self.rng.integers(0, 256, st.jam_payload_bytes, dtype="uint8").tobytes() if st.jam_payload_bytes else b""
        self.node.transmit(
            Transmission(
                self.node.name,
                beacon_params(self.node.power_dbm),
                self.engine.now,
                body + tail,
                kind="beacon",
                inverted=True,
                core_len=fr.BEACON_LEN,
                tags={"spoofed": True, "period": period, "shift": shift},
            )
        )
        self._arm(period + 1)
