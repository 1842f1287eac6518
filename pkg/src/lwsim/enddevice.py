"""End-device MAC behaviour.

The ADR and Class B rules live in small pure functions over :class:`AdrState`
and :class:`ClassBState` so they can be tested without an engine.
:class:`EndDevice` wires them to the radio: one uplink every
``uplink_interval``, two Class A receive windows after it, and (when enabled)
a beacon window plus ping slots every beacon period.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import frames as fr
from .frames import BeaconPayload, DeviceSession, Direction, Frame, LinkADRAns, LinkADRReq, MicPolicy
from .phy import (
    BEACON_FREQ,
    MAX_DR,
    RX2_FREQ,
    UPLINK_CHANNELS,
    beacon_params,
    data_params,
    dr_to_sf,
    symbol_duration,
    time_on_air,
)
from .simkit import SECOND, RadioNode, RxMeta, Transmission

MAX_TP_INDEX = 7
BEACON_PERIOD = 128 * SECOND
BEACON_RESERVED = 2_120_000
PING_SLOT_LEN = 30_000
PING_SLOTS_PER_PERIOD = 4096
BEACON_SYMBOL = symbol_duration(beacon_params())
BEACON_LEN = fr.BEACON_LEN
BEACONLESS_LIMIT = 7200 * SECOND
RX_WINDOW_SYMBOLS = 8


def tp_dbm(index: int) -> float:
    """EU868 TX power ladder: index 0 is the maximum (16 dBm)."""
    if not 0 <= index <= MAX_TP_INDEX:
        raise ValueError(f"TX power index {index} out of range")
    return 16.0 - 2.0 * index


# --- ADR --------------------------------------------------------------------


@dataclass
class AdrState:
    adr_ack_cnt: int = 0
    adr_ack_limit: int = 64
    adr_ack_delay: int = 32
    current_dr: int = 0
    current_tp_index: int = 0

    def __post_init__(self):
        if self.adr_ack_limit < 1 or self.adr_ack_delay < 1:
            raise ValueError("ADR_ACK_LIMIT and ADR_ACK_DELAY must be positive")
        if not 0 <= self.current_dr <= MAX_DR or not 0 <= self.current_tp_index <= MAX_TP_INDEX:
            raise ValueError("DR or TP index out of range")

    @property
    def adr_ack_req(self) -> bool:
        return self.adr_ack_cnt >= self.adr_ack_limit


def on_transaction_end(state: AdrState, received_downlink: bool) -> str | None:
    """Advance the ADR counter; returns ``"tp"``/``"dr"`` when a backoff step fired.

    Backoff fires at cnt = limit + k * delay (k >= 1): max TP is restored first,
    then the DR drops one step per firing until DR0.
    """
    if received_downlink:
        state.adr_ack_cnt = 0
        return None
    state.adr_ack_cnt += 1
    cnt, lim, dly = state.adr_ack_cnt, state.adr_ack_limit, state.adr_ack_delay
    if cnt < lim + dly or (cnt - lim) % dly:
        return None
    if state.current_tp_index > 0:
        state.current_tp_index = 0
        return "tp"
    if state.current_dr > 0:
        state.current_dr -= 1
        return "dr"
    return None


def process_link_adr_req(state: AdrState, cmd: LinkADRReq, enabled_mask: int = 0b111) -> LinkADRAns:
    """Apply a LinkADRReq atomically: all fields valid or nothing changes."""
    dr_ok = 0 <= cmd.dr <= MAX_DR
    power_ok = 0 <= cmd.tp_index <= MAX_TP_INDEX
    ch_ok = cmd.ch_mask != 0 and cmd.ch_mask & ~enabled_mask == 0
    ans = LinkADRAns(power_ok, dr_ok, ch_ok)
    if ans.accepted:
        state.current_dr = cmd.dr
        state.current_tp_index = cmd.tp_index
    return ans


# --- Class B ----------------------------------------------------------------


@dataclass(frozen=True)
class ClassBState:
    mode: str = "classA"
    expected_beacon_time: int | None = None
    window_guard_symbols: float = 3.0
    base_guard_symbols: float = 3.0
    widen_rate: float = 1.0
    max_guard_symbols: float = 32.0
    beaconless_since: int | None = None
    ping_period_s: int = 128
    last_beacon_payload: BeaconPayload | None = None
    anchor_time: int | None = None
    misses: int = 0

    MODES = ("classA", "acquiring", "locked", "beaconless")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise ValueError(f"unknown Class B mode {self.mode!r}")
        if self.mode == "locked" and self.expected_beacon_time is None:
            raise ValueError("locked mode needs an expected beacon time")

    @property
    def tolerance(self) -> int:
        return int(self.window_guard_symbols * BEACON_SYMBOL)


def on_beacon_window(
    state: ClassBState, now: int, observed: BeaconPayload | None, observed_time: int | None = None
) -> ClassBState:
    """Outcome of one beacon window.

    A beacon within the guard (re)locks the device to its arrival time.  A miss
    moves a tracking device to beacon-less operation on its internal clock,
    widening the window each period and giving up after two hours.
    """
    if state.mode == "classA":
        return state
    exp = state.expected_beacon_time
    if observed is not None and observed_time is not None and abs(observed_time - exp) <= state.tolerance:
        return replace(
            state,
            mode="locked",
            expected_beacon_time=observed_time + BEACON_PERIOD,
            window_guard_symbols=state.base_guard_symbols,
            beaconless_since=None,
            last_beacon_payload=observed,
            anchor_time=observed_time,
            misses=0,
        )
    if state.mode == "acquiring":
        return replace(state, expected_beacon_time=exp + BEACON_PERIOD)
    since = state.beaconless_since if state.beaconless_since is not None else exp
    if now - since >= BEACONLESS_LIMIT:
        return replace(state, mode="classA", beaconless_since=since)
    misses = state.misses + 1
    last = state.last_beacon_payload
    guessed = BeaconPayload(last.gps_time_s + BEACON_PERIOD // SECOND, last.gw_info) if last else None
    return replace(
        state,
        mode="beaconless",
        expected_beacon_time=exp + BEACON_PERIOD,
        window_guard_symbols=min(state.base_guard_symbols + state.widen_rate * misses, state.max_guard_symbols),
        beaconless_since=since,
        last_beacon_payload=guessed,
        anchor_time=exp,
        misses=misses,
    )


def ping_slot_times(beacon_arrival: int, beacon_payload: BeaconPayload, dev_addr: int, ping_period_s: int = 128) -> list[int]:
    """Ping-slot offsets (µs) for one beacon period.

    Offsets are relative to ``beacon_arrival``, the instant the device saw (or,
    without a beacon, expected) the beacon.  The slot index is a SHA-256 based
    PRF of (beacon time, dev_addr); offsets start after the 2.12 s
    beacon-reserved interval and use 30 ms slots.
    """
    if ping_period_s <= 0 or 128 % ping_period_s:
        raise ValueError("ping period must divide 128 s")
    ping_nb = 128 // ping_period_s
    period_slots = PING_SLOTS_PER_PERIOD // ping_nb
    digest = hashlib.sha256(struct.pack("<II", beacon_payload.gps_time_s & 0xFFFFFFFF, dev_addr)).digest()
    offset = int.from_bytes(digest[:4], "little") % period_slots
    return [BEACON_RESERVED + (offset + k * period_slots) * PING_SLOT_LEN for k in range(ping_nb)]


def ping_window(slot: int, guard_symbols: float) -> tuple[int, int]:
    """Inclusive bounds for a ping preamble start: strictly less than the guard away from ``slot``."""
    g = int(guard_symbols * BEACON_SYMBOL)
    return slot - g + 1, slot + g - 1


def receive_ping(slots, tx_start: int, guard_symbols: float = 9.0) -> bool:
    """Whether a downlink starting at ``tx_start`` falls into one of the device's ping windows."""
    for slot in slots:
        lo, hi = ping_window(slot, guard_symbols)
        if lo <= tx_start <= hi:
            return True
    return False


# --- radio node -------------------------------------------------------------


@dataclass
class DeviceConfig:
    dev_addr: int = 0x26011BDA
    uplink_interval: int = 12 * SECOND
    app_payload_len: int | None = 1
    fport: int = 1
    adr_ack_limit: int = 64
    adr_ack_delay: int = 32
    initial_dr: int = 0
    initial_tp_index: int = 0
    channels: tuple = UPLINK_CHANNELS
    d_rx1: int = SECOND
    d_rx2: int = SECOND
    rx2_freq: int = RX2_FREQ
    rx2_dr: int = 0
    mic_policy: MicPolicy = MicPolicy.V11
    class_b: bool = False
    window_guard_symbols: float = 3.0
    ping_slot_guard_symbols: float = 9.0
    widen_rate: float = 1.0
    max_guard_symbols: float = 32.0
    ping_period_s: int = 128
    ping_freq: int = BEACON_FREQ
    ping_dr: int = 0
    uplinks: bool = True
    adr: bool = True


class EndDevice(RadioNode):
    """Class A/B end device.

    Observers are callables ``fn(kind, details)``; kinds include
    ``uplink``, ``downlink``, ``downlink-rejected``, ``link-adr``,
    ``transaction``, ``backoff``, ``beacon`` and ``ping``.
    """

    def __init__(self, name: str, config: DeviceConfig, session: DeviceSession | None = None, rng=None):
        super().__init__(name)
        self.config = config
        self.session = session or DeviceSession.abp(config.dev_addr)
        self.adr = AdrState(
            adr_ack_limit=config.adr_ack_limit,
            adr_ack_delay=config.adr_ack_delay,
            current_dr=config.initial_dr,
            current_tp_index=config.initial_tp_index,
        )
        self.cb = ClassBState(
            window_guard_symbols=config.window_guard_symbols,
            base_guard_symbols=config.window_guard_symbols,
            widen_rate=config.widen_rate,
            max_guard_symbols=config.max_guard_symbols,
            ping_period_s=config.ping_period_s,
        )
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.observers: list = []
        self.pending_ans: LinkADRAns | None = None
        self.ans_pending_uplink = False
        self.txn = None
        self.transactions = 0
        self._beacon_obs = None
        self._beacon_win = None
        self._ping_windows = []
        self._beaconless_timer = None
        self.beacon_period_index = 0

    # observers
    def emit(self, kind: str, **details):
        for fn in self.observers:
            fn(kind, details)

    # --- Class A ---

    def start(self, at: int):
        if self.config.uplinks:
            self.engine.schedule(at, self._uplink)

    def next_uplink(self) -> tuple[Frame, "object"]:
        """Build the next uplink frame and its TxParams (advances fcnt_up)."""
        cfg = self.config
        self.session.fcnt_up += 1
        freq = cfg.channels[int(self.rng.integers(len(cfg.channels)))]
        params = data_params(self.adr.current_dr, freq, tp_dbm(self.adr.current_tp_index))
        fopts = ()
        if self.pending_ans is not None:
            fopts = (self.pending_ans,)
            self.pending_ans = None
        payload_len = cfg.app_payload_len
        frame = Frame(
            Direction.UPLINK,
            self.session.dev_addr,
            self.session.fcnt_up,
            adr=cfg.adr,
            adr_ack_req=cfg.adr and self.adr.adr_ack_req,
            class_b=self.cb.mode in ("locked", "beaconless"),
            fopts=fopts,
            fport=cfg.fport if payload_len is not None else None,
            frm_payload=bytes(payload_len or 0),
        )
        return frame, params

    def _uplink(self):
        eng = self.engine
        cfg = self.config
        eng.schedule(eng.now + cfg.uplink_interval, self._uplink)
        if self.transmitting or self.txn is not None:
            self.emit("uplink-skipped", time=eng.now)
            return
        frame, params = self.next_uplink()
        wire = fr.encode(fr.sign(self.session, fr.conceal(frame, self.session, cfg.mic_policy), params, cfg.mic_policy))
        tx = Transmission(self.name, params, eng.now, wire)
        self.transmit(tx)
        self.transactions += 1
        end = tx.end
        rx1 = end + cfg.d_rx1
        rx2 = rx1 + cfg.d_rx2
        self.txn = {
            "fcnt": frame.fcnt,
            "params": params,
            "end": end,
            "rx1": rx1,
            "rx2": rx2,
            "received": False,
            "adr_ack_req": frame.adr_ack_req,
            "dr": params.dr,
            "fopts_len": len(frame.fopts_bytes),
            "wins": [],
        }
        rx1_len = RX_WINDOW_SYMBOLS * symbol_duration(params)
        rx2_params = data_params(cfg.rx2_dr, cfg.rx2_freq)
        rx2_len = RX_WINDOW_SYMBOLS * symbol_duration(rx2_params)
        for label, f, sf, t0, ln in (
            ("rx1", params.freq_hz, params.sf, rx1, rx1_len),
            ("rx2", cfg.rx2_freq, rx2_params.sf, rx2, rx2_len),
        ):
            if self.can_listen(t0, t0 + ln):
                self.txn["wins"].append(self.listen(f, sf, True, t0, t0 + ln, label=label))
        self.emit(
            "uplink",
            time=eng.now,
            fcnt=frame.fcnt,
            dr=params.dr,
            freq=params.freq_hz,
            tp_index=self.adr.current_tp_index,
            adr_ack_req=frame.adr_ack_req,
            adr_ack_cnt=self.adr.adr_ack_cnt,
            fopts_len=len(frame.fopts_bytes),
        )
        # the longest rx2 downlink (DR0, max frame) ends well within 3 s
        eng.schedule(rx2 + 3 * SECOND, self._transaction_end)

    def _transaction_end(self):
        txn, self.txn = self.txn, None
        for w in txn["wins"]:
            self.stop_listening(w)
        step = on_transaction_end(self.adr, txn["received"]) if self.config.adr else None
        self.emit(
            "transaction",
            time=self.engine.now,
            fcnt=txn["fcnt"],
            dr=txn["dr"],
            received=txn["received"],
            adr_ack_cnt=self.adr.adr_ack_cnt,
            current_dr=self.adr.current_dr,
        )
        if step:
            self.emit("backoff", step=step, dr=self.adr.current_dr, tp_index=self.adr.current_tp_index)

    # --- reception ---

    def on_rx(self, tx: Transmission, meta: RxMeta):
        if tx.kind == "beacon":
            self._on_beacon(tx, meta)
            return
        if tx.kind != "data" or not tx.inverted:
            return
        try:
            frame = fr.decode(tx.core_payload, Direction.DOWNLINK, self.session.fcnt_down, parse_fopts=False)
        except fr.FrameError:
            return
        if frame.dev_addr != self.session.dev_addr:
            return
        window = meta.window
        policy = self.config.mic_policy
        conf = self.txn["fcnt"] if window in ("rx1", "rx2") and self.txn else None
        verdict = fr.verify(frame, self.session, tx.params, policy, conf)
        details = dict(time=self.engine.now, window=window, source=tx.source, tags=dict(tx.tags), fcnt=frame.fcnt)
        if not verdict:
            self.emit("downlink-rejected", reason=verdict.reason, **details)
            return
        self.session.fcnt_down = frame.fcnt
        clear = fr.reveal(frame, self.session, policy)
        if window in ("rx1", "rx2") and self.txn is not None:
            self.txn["received"] = True
            for w in self.txn["wins"]:
                self.stop_listening(w)
        cmds = [c for c in clear.fopts]
        self.emit("downlink", cmds=cmds, payload_len=len(clear.frm_payload), **details)
        for cmd in cmds:
            if isinstance(cmd, LinkADRReq):
                self._link_adr(cmd, details)
        if window == "ping":
            self.emit("ping", **details)

    def _link_adr(self, cmd: LinkADRReq, details: dict):
        duplicate = self.pending_ans is not None
        ans = process_link_adr_req(self.adr, cmd)
        if not duplicate:
            self.pending_ans = ans
        self.emit("link-adr", dr=cmd.dr, tp_index=cmd.tp_index, accepted=ans.accepted, duplicate=duplicate, **details)

    # --- Class B ---

    def start_class_b(self, at: int, first_beacon: int):
        """Begin acquisition; the first window is placed at ``first_beacon``."""
        self.cb = replace(self.cb, mode="acquiring", expected_beacon_time=first_beacon)
        self.engine.schedule(at, self._arm_beacon_window)

    def _arm_beacon_window(self):
        if self.cb.mode == "classA":
            return
        exp, tol = self.cb.expected_beacon_time, self.cb.tolerance
        start, end = max(exp - tol, self.engine.now), exp + tol
        self._beacon_obs = None
        self._beacon_win = None
        if self.can_listen(start, end):
            self._beacon_win = self.listen(BEACON_FREQ, 9, True, start, end, label="beacon")
        close = end + time_on_air(beacon_params(), BEACON_LEN) + 1
        self.engine.schedule(close, self._close_beacon_window)

    def _on_beacon(self, tx: Transmission, meta: RxMeta):
        if meta.window != "beacon":
            return
        try:
            payload = BeaconPayload.decode(tx.core_payload)
        except fr.FrameError:
            return
        self._beacon_obs = (payload, tx.start, meta)

    def _close_beacon_window(self):
        if self.cb.mode == "classA":
            return
        if self._beacon_win is not None:
            self.stop_listening(self._beacon_win)
        obs = self._beacon_obs
        prev = self.cb
        payload, t_obs, meta = obs if obs else (None, None, None)
        self.cb = on_beacon_window(prev, self.engine.now, payload, t_obs)
        cb = self.cb
        status = "lost"
        if cb.mode == "locked" and obs is not None:
            status = "spoofed" if not payload.gw_info.startswith(b"GW") else "valid"
        self.emit(
            "beacon",
            time=self.engine.now,
            expected=prev.expected_beacon_time,
            status=status,
            mode=cb.mode,
            snr=meta.snr_db if (meta is not None and status != "lost") else math.nan,
            arrival=t_obs if status != "lost" else None,
            guard=prev.window_guard_symbols,
        )
        self.beacon_period_index += 1
        if cb.mode == "beaconless" and prev.mode != "beaconless":
            self._beaconless_timer = self.engine.schedule(cb.beaconless_since + BEACONLESS_LIMIT, self._beaconless_expired)
        if cb.mode == "locked" and self._beaconless_timer is not None:
            self._beaconless_timer.cancel()
            self._beaconless_timer = None
        if cb.mode == "classA":
            self._drop_class_b()
            return
        if cb.mode in ("locked", "beaconless"):
            self._arm_ping_slots()
        self._arm_beacon_window()

    def _arm_ping_slots(self):
        cfg = self.config
        cb = self.cb
        sf = dr_to_sf(cfg.ping_dr)
        self._ping_windows = [w for w in self._ping_windows if w.end >= self.engine.now]
        for off in ping_slot_times(cb.anchor_time, cb.last_beacon_payload, self.session.dev_addr, cb.ping_period_s):
            start, end = ping_window(cb.anchor_time + off, cfg.ping_slot_guard_symbols)
            start = max(start, self.engine.now)
            if self.can_listen(start, end):
                self._ping_windows.append(self.listen(cfg.ping_freq, sf, True, start, end, label="ping"))

    def _beaconless_expired(self):
        self._beaconless_timer = None
        if self.cb.mode != "beaconless":
            return
        self.cb = replace(self.cb, mode="classA")
        self._drop_class_b()
        self.emit("class-a", time=self.engine.now)

    def _drop_class_b(self):
        for w in self._ping_windows:
            self.stop_listening(w)
        self._ping_windows = []
        if self._beacon_win is not None:
            self.stop_listening(self._beacon_win)
            self._beacon_win = None
