"""Network server and gateways.

Gateways demodulate every uplink channel and spreading factor at once and
hand frames to the :class:`NetworkServer`, which deduplicates, verifies,
keeps the last 20 SNR readings per device, runs the Semtech ADR rule and
answers in rx1 (rx2 when rx1 is unavailable).  The server also drives the
network-wide beacon every 128 s and Class B ping downlinks.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

from . import frames as fr
from .enddevice import BEACON_PERIOD, MAX_TP_INDEX, ping_slot_times
from .frames import BeaconPayload, DeviceSession, Direction, Frame, LinkADRAns, LinkADRReq, MicPolicy
from .phy import BEACON_FREQ, MAX_DR, RX2_FREQ, TxParams, beacon_params, data_params, required_snr
from .simkit import SECOND, Engine, RadioNode, RxMeta, Transmission

SNR_HISTORY = 20
GPS_EPOCH_OFFSET_S = 1_400_000_000


@dataclass(frozen=True)
class UplinkMeta:
    freq_hz: int
    dr: int
    snr_db: float
    rssi_dbm: float
    time: int


@dataclass
class PendingCommand:
    cmd: LinkADRReq
    budget: int
    sent: int = 0


@dataclass
class NsDeviceRecord:
    session: DeviceSession
    dr: int = 0
    tp_index: int = 0
    ch_mask: int = 0b111
    class_b: bool = False
    snr_history: deque = field(default_factory=lambda: deque(maxlen=SNR_HISTORY))
    pending: PendingCommand | None = None
    last_uplink_meta: UplinkMeta | None = None
    app_queue: bytes | None = None
    ping_fport: int = 2


@dataclass
class NsConfig:
    mic_policy: MicPolicy = MicPolicy.V11
    margin_db: float = 10.0
    d_rx1: int = SECOND
    d_rx2: int = SECOND
    rx2_freq: int = RX2_FREQ
    rx2_dr: int = 0
    resend_budget: int = 8
    dedup_window: int = 50_000
    force_rx2: bool = False
    ping_freq: int = BEACON_FREQ
    ping_dr: int = 0

    def __post_init__(self):
        if not SECOND <= self.d_rx1 <= 15 * SECOND:
            raise ValueError("d_rx1 must lie in [1 s, 15 s]")
        if self.d_rx2 != SECOND:
            raise ValueError("rx2 opens exactly 1 s after rx1")


def adr_step(snr_max: float, dr: int, tp_index: int, margin_db: float) -> tuple[int, int]:
    """Semtech ADR rule: one DR step per 3 dB of headroom, then TP steps."""
    n_step = math.floor((snr_max - required_snr(dr) - margin_db) / 3.0)
    while n_step > 0 and dr < MAX_DR:
        dr += 1
        n_step -= 1
    while n_step > 0 and tp_index < MAX_TP_INDEX:
        tp_index += 1
        n_step -= 1
    while n_step < 0 and tp_index > 0:
        tp_index -= 1
        n_step += 1
    return dr, tp_index


def adr_decision(record: NsDeviceRecord, margin_db: float = 10.0) -> LinkADRReq | None:
    """LinkADRReq for the device, or None if (dr, tp) would not change."""
    if not record.snr_history:
        return None
    dr, tp = adr_step(max(record.snr_history), record.dr, record.tp_index, margin_db)
    if (dr, tp) == (record.dr, record.tp_index):
        return None
    return LinkADRReq(dr, tp, record.ch_mask, nb_trans=1)


class Gateway(RadioNode):
    multi_demod = True

    def __init__(self, name: str, power_dbm: float = 20.0, gw_info: bytes = b"GW"):
        super().__init__(name)
        self.power_dbm = power_dbm
        self.gw_info = gw_info
        self.server: NetworkServer | None = None

    def wants(self, tx: Transmission) -> bool:
        return tx.kind == "data" and not tx.inverted

    def window_for(self, tx):
        return None

    def on_rx(self, tx: Transmission, meta: RxMeta):
        if self.server is not None:
            self.server.on_gateway_rx(self, tx, meta)


class NetworkServer:
    """Observers are callables ``fn(kind, details)`` with kinds
    ``uplink-accepted``, ``uplink-rejected``, ``adr-command``, ``adr-ack``,
    ``downlink-sent`` and ``beacon``."""

    def __init__(self, engine: Engine, config: NsConfig | None = None):
        self.engine = engine
        self.config = config or NsConfig()
        self.gateways: list[Gateway] = []
        self.devices: dict[int, NsDeviceRecord] = {}
        self.observers: list = []
        self._seen: dict = {}
        self.duplicates = 0

    def emit(self, kind, **details):
        for fn in self.observers:
            fn(kind, details)

    def add_gateway(self, gw: Gateway):
        gw.server = self
        self.gateways.append(gw)

    def register(self, session: DeviceSession, dr: int = 0, tp_index: int = 0, class_b: bool = False) -> NsDeviceRecord:
        rec = NsDeviceRecord(session=session, dr=dr, tp_index=tp_index, class_b=class_b)
        self.devices[session.dev_addr] = rec
        return rec

    def queue_app(self, dev_addr: int, payload: bytes):
        """Queue an application downlink; a newer message replaces the pending one."""
        self.devices[dev_addr].app_queue = bytes(payload)

    # --- uplink path ---

    def on_gateway_rx(self, gw: Gateway, tx: Transmission, meta: RxMeta):
        now = self.engine.now
        try:
            direction, dev_addr, _, _ = fr.peek_header(tx.core_payload)
        except fr.FrameError:
            return
        if direction is not Direction.UPLINK or dev_addr not in self.devices:
            return
        key = (dev_addr, tx.core_payload)
        self._seen = {k: t for k, t in self._seen.items() if now - t <= self.config.dedup_window}
        if key in self._seen:
            self.duplicates += 1
            return
        self._seen[key] = now
        rec = self.devices[dev_addr]
        frame = fr.decode(tx.core_payload, Direction.UPLINK, rec.session.fcnt_up, parse_fopts=False)
        umeta = UplinkMeta(tx.params.freq_hz, tx.params.dr, meta.snr_db, meta.rssi_dbm, now)
        verdict = self.ingest_uplink(rec, frame, umeta, tx.params)
        if not verdict:
            self.emit("uplink-rejected", dev_addr=dev_addr, fcnt=frame.fcnt, reason=verdict.reason, time=now)
            return
        self.emit(
            "uplink-accepted",
            dev_addr=dev_addr,
            fcnt=frame.fcnt,
            snr=meta.snr_db,
            rssi=meta.rssi_dbm,
            freq=tx.params.freq_hz,
            dr=tx.params.dr,
            adr_ack_req=frame.adr_ack_req,
            time=now,
            source=tx.source,
            tags=dict(tx.tags),
        )
        if frame.adr:
            cmd = adr_decision(rec, self.config.margin_db)
            if cmd is not None and (rec.pending is None or rec.pending.cmd != cmd):
                rec.pending = PendingCommand(cmd, self.config.resend_budget)
                self.emit("adr-command", dev_addr=dev_addr, dr=cmd.dr, tp_index=cmd.tp_index, time=now)
        plan = self.plan_downlink(rec, now, frame, tx.params, gw)
        if plan is not None:
            dl, params, t_tx = plan
            self.engine.schedule(t_tx, self._send, gw, dl, params, rec)

    def ingest_uplink(self, record: NsDeviceRecord, frame: Frame, meta: UplinkMeta, params: TxParams) -> fr.Verdict:
        policy = self.config.mic_policy
        verdict = fr.verify(frame, record.session, params, policy)
        if not verdict:
            return verdict
        record.session.fcnt_up = frame.fcnt
        record.snr_history.append(meta.snr_db)
        record.last_uplink_meta = meta
        clear = fr.reveal(frame, record.session, policy)
        self.mac_ack_handling(record, clear)
        return verdict

    def mac_ack_handling(self, record: NsDeviceRecord, frame: Frame):
        for cmd in frame.mac_commands:
            if isinstance(cmd, LinkADRAns) and record.pending is not None:
                pend = record.pending
                record.pending = None
                if cmd.accepted:
                    record.dr, record.tp_index = pend.cmd.dr, pend.cmd.tp_index
                self.emit("adr-ack", dev_addr=record.session.dev_addr, accepted=cmd.accepted, dr=record.dr)

    def plan_downlink(
        self, record: NsDeviceRecord, uplink_end: int, frame: Frame, up_params: TxParams, gw: Gateway | None = None
    ) -> tuple[Frame, TxParams, int] | None:
        """Downlink answering ``frame`` (rx1 preferred), or None if nothing is due."""
        app = record.app_queue if not record.class_b else None
        if record.pending is None and not frame.adr_ack_req and app is None:
            return None
        cfg = self.config
        power = gw.power_dbm if gw is not None else 20.0
        t_rx1 = uplink_end + cfg.d_rx1
        busy = cfg.force_rx2 or (gw is not None and gw.tx_until > t_rx1)
        if busy:
            params = data_params(cfg.rx2_dr, cfg.rx2_freq, power)
            t_tx = t_rx1 + cfg.d_rx2
        else:
            params = data_params(up_params.dr, up_params.freq_hz, power)
            t_tx = t_rx1
        fopts = ()
        if record.pending is not None:
            fopts = (record.pending.cmd,)
            record.pending.sent += 1
            if record.pending.sent >= record.pending.budget:
                record.pending = None
        if app is not None:
            record.app_queue = None
        dl = self._build(record, fopts, app, params, conf_fcnt=frame.fcnt)
        return dl, params, t_tx

    def _build(self, record, fopts, app, params, conf_fcnt):
        s = record.session
        s.fcnt_down += 1
        frame = Frame(
            Direction.DOWNLINK,
            s.dev_addr,
            s.fcnt_down,
            adr=True,
            fopts=fopts,
            fport=record.ping_fport if app is not None else None,
            frm_payload=app or b"",
        )
        policy = self.config.mic_policy
        return fr.sign(s, fr.conceal(frame, s, policy), params, policy, conf_fcnt)

    def _send(self, gw: Gateway, frame: Frame, params: TxParams, record: NsDeviceRecord, window: str = "classA"):
        tx = Transmission(gw.name, params, self.engine.now, fr.encode(frame), inverted=True, tags={"window": window})
        gw.transmit(tx)
        self.emit(
            "downlink-sent",
            dev_addr=record.session.dev_addr,
            fcnt=frame.fcnt,
            freq=params.freq_hz,
            dr=params.dr,
            window=window,
            time=self.engine.now,
            has_adr=any(isinstance(c, LinkADRReq) for c in frame.fopts) if not isinstance(frame.fopts, bytes) else None,
        )

    # --- Class B ---

    def start_beacons(self, first: int):
        if first % BEACON_PERIOD:
            raise ValueError("beacons are aligned to the 128 s grid")
        self.engine.schedule(first, self._tick)

    def _tick(self):
        now = self.engine.now
        self.beacon_tick(now)
        self.engine.schedule(now + BEACON_PERIOD, self._tick)

    def beacon_tick(self, now: int) -> list[tuple[BeaconPayload, TxParams, int]]:
        """Emit one beacon per gateway and schedule due ping downlinks."""
        if now % BEACON_PERIOD:
            raise ValueError("beacon_tick must run on the 128 s grid")
        out = []
        gps = GPS_EPOCH_OFFSET_S + now // SECOND
        for gw in self.gateways:
            payload = BeaconPayload(gps, gw.gw_info)
            params = beacon_params(gw.power_dbm)
            gw.transmit(Transmission(gw.name, params, now, payload.encode(), kind="beacon", inverted=True, sync_group="network"))
            out.append((payload, params, now))
        self.emit("beacon", time=now, gps_time=gps)
        if self.gateways:
            ref = BeaconPayload(gps)
            for rec in self.devices.values():
                if rec.class_b and rec.app_queue is not None:
                    self._schedule_ping(rec, now, ref)
        return out

    def _schedule_ping(self, rec: NsDeviceRecord, beacon_time: int, ref: BeaconPayload):
        cfg = self.config
        offsets = ping_slot_times(beacon_time, ref, rec.session.dev_addr)
        app, rec.app_queue = rec.app_queue, None
        gw = self.gateways[0]
        params = data_params(cfg.ping_dr, cfg.ping_freq, gw.power_dbm)
        frame = self._build(rec, (), app, params, conf_fcnt=None)
        self.engine.schedule(beacon_time + offsets[0], self._send, gw, frame, params, rec, "ping")
