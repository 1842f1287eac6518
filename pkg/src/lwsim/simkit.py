"""Discrete-event engine, per-link channel model and shared radio medium.

Time is integer microseconds.  Events run in ``(time, seq)`` order, so two
events at the same instant execute in the order they were scheduled.  Every
random draw comes from generators derived from the engine seed, which makes a
run a pure function of (scenario, seed).
"""

from __future__ import annotations

import hashlib
import heapq
import json
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .phy import TxParams, required_snr_sf, resolve_reception, symbol_duration, time_on_air

SECOND = 1_000_000
FOREVER = 2**63 - 1


class SchedulingError(RuntimeError):
    """Raised when a handler schedules an event in the past."""


class ListenConflict(RuntimeError):
    """Raised when a single-demodulator node is asked to listen twice at once."""


@dataclass(order=True)
class Event:
    time: int
    seq: int
    action: Callable = field(compare=False)
    args: tuple = field(compare=False, default=())
    cancelled: bool = field(compare=False, default=False)

    def cancel(self):
        self.cancelled = True


class Engine:
    """Single-threaded event loop with a deterministic trace."""

    def __init__(self, seed: int = 0, tracing: bool = True):
        self.seed = int(seed)
        self.tracing = tracing
        self.now = 0
        self._queue: list[Event] = []
        self._seq = 0
        self.trace: list[tuple] = []

    def rng(self, stream: str) -> np.random.Generator:
        """Independent generator for a named stream (e.g. ``"channel"``)."""
        return np.random.default_rng([self.seed, zlib.crc32(stream.encode())])

    def schedule(self, time: int, action: Callable, *args) -> Event:
        time = int(time)
        if time < self.now:
            raise SchedulingError(f"event at {time} is before now={self.now}")
        ev = Event(time, self._seq, action, args)
        self._seq += 1
        heapq.heappush(self._queue, ev)
        return ev

    def after(self, delay: int, action: Callable, *args) -> Event:
        return self.schedule(self.now + delay, action, *args)

    def run_until(self, t_end: int) -> int:
        """Execute every event with ``time <= t_end``; returns how many ran."""
        count = 0
        while self._queue and self._queue[0].time <= t_end:
            ev = heapq.heappop(self._queue)
            if ev.cancelled:
                continue
            self.now = ev.time
            ev.action(*ev.args)
            count += 1
        if t_end < FOREVER:
            self.now = max(self.now, t_end)
        return count

    def pending(self) -> int:
        return sum(1 for ev in self._queue if not ev.cancelled)

    def record(self, node: str, kind: str, **details):
        if self.tracing:
            self.trace.append((self.now, node, kind, details))

    def trace_lines(self) -> Iterable[str]:
        for t, node, kind, details in self.trace:
            yield json.dumps({"t": t, "node": node, "kind": kind, "details": details}, sort_keys=True, default=_jsonable)

    def trace_hash(self) -> str:
        h = hashlib.sha256()
        for line in self.trace_lines():
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()

    def export_trace(self, fh):
        for line in self.trace_lines():
            fh.write(line + "\n")


def _jsonable(obj):
    if isinstance(obj, bytes):
        return obj.hex()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return str(obj)


# --- channel ----------------------------------------------------------------


@dataclass
class ChannelModel:
    """Symmetric per-link attenuation plus Gaussian jitter on received power (and thus SNR)."""

    attenuation_db: dict = field(default_factory=dict)
    noise_floor_dbm: float = -117.0
    snr_jitter_sigma_db: float = 1.0

    def __post_init__(self):
        for link, att in self.attenuation_db.items():
            if att < 0:
                raise ValueError(f"negative attenuation on {link}")

    def attenuation(self, a: str, b: str) -> float:
        att = self.attenuation_db.get((a, b))
        if att is None:
            att = self.attenuation_db.get((b, a), math.inf)
        return att

    def set_link(self, a: str, b: str, att: float):
        if att < 0:
            raise ValueError("attenuation must be >= 0")
        self.attenuation_db[(a, b)] = att


# --- transmissions ----------------------------------------------------------

@dataclass(eq=False)
class Transmission:
    """One emission on the shared medium.

    ``core_len`` bytes of the payload are what receivers demodulate and what
    interferes; anything beyond (a jamming tail) only occupies the transmitter.
    Jam emissions have an explicit ``duration`` and are never decodable.
    """

    source: str
    params: TxParams
    start: int
    payload: bytes = b""
    kind: str = "data"
    inverted: bool = False
    duration: int | None = None
    core_len: int | None = None
    sync_group: str | None = None
    tags: dict = field(default_factory=dict)
    tx_id: int = 0
    metrics: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in ("data", "beacon", "jam"):
            raise ValueError(f"unknown transmission kind {self.kind!r}")
        if self.kind == "jam":
            if self.duration is None or self.duration <= 0:
                raise ValueError("jam transmissions need a positive duration")
            self.core_duration = self.duration
        else:
            if self.core_len is None:
                self.core_len = len(self.payload)
            self.core_duration = time_on_air(self.params, self.core_len)
            self.duration = time_on_air(self.params, len(self.payload))

    @property
    def end(self) -> int:
        return self.start + self.duration

    @property
    def core_end(self) -> int:
        return self.start + self.core_duration

    @property
    def core_payload(self) -> bytes:
        return self.payload[: self.core_len] if self.core_len is not None else self.payload

    def header_time(self) -> int:
        """Instant the explicit header and first payload block are demodulated."""
        sym = symbol_duration(self.params)
        return self.start + min(self.core_duration, int((self.params.preamble_symbols + 4.25 + 8) * sym))


@dataclass(frozen=True)
class RxMeta:
    time: int
    snr_db: float
    rssi_dbm: float
    freq_hz: int
    sf: int
    window: str = ""


@dataclass
class ListenWindow:
    freq_hz: int
    sf: int
    inverted: bool
    start: int
    end: int
    label: str = ""

    def accepts(self, tx: Transmission) -> bool:
        return (
            tx.params.freq_hz == self.freq_hz
            and tx.params.sf == self.sf
            and tx.inverted == self.inverted
            and self.start <= tx.start <= self.end
        )

    def overlaps(self, other: "ListenWindow") -> bool:
        return self.start <= other.end and other.start <= self.end


class RadioNode:
    """Half-duplex radio with a single demodulator.

    Subclasses override ``on_rx``, ``on_rx_fail`` and ``on_header``.
    """

    multi_demod = False

    def __init__(self, name: str):
        self.name = name
        self.medium: Medium | None = None
        self.windows: list[ListenWindow] = []
        self.tx_until = -1
        self._rx: Reception | None = None

    @property
    def engine(self) -> Engine:
        return self.medium.engine

    def listen(
        self, freq_hz: int, sf: int, inverted: bool, start: int, end: int = FOREVER, label: str = ""
    ) -> ListenWindow:
        now = self.medium.engine.now if self.medium else 0
        self.windows = [w for w in self.windows if w.end >= now]
        win = ListenWindow(freq_hz, sf, inverted, start, end, label)
        if not self.multi_demod:
            for w in self.windows:
                if w.overlaps(win):
                    raise ListenConflict(f"{self.name}: {win} overlaps {w}")
        self.windows.append(win)
        return win

    def stop_listening(self, win: ListenWindow | None = None):
        if win is None:
            self.windows.clear()
        elif win in self.windows:
            self.windows.remove(win)

    def can_listen(self, start: int, end: int) -> bool:
        probe = ListenWindow(0, 7, False, start, end)
        now = self.medium.engine.now if self.medium else 0
        return self.multi_demod or not any(w.end >= now and w.overlaps(probe) for w in self.windows)

    def wants(self, tx: Transmission) -> bool:
        return self.window_for(tx) is not None

    def window_for(self, tx: Transmission) -> ListenWindow | None:
        for w in self.windows:
            if w.accepts(tx):
                return w
        return None

    def transmit(self, tx: Transmission):
        self.medium.transmit(tx)

    @property
    def transmitting(self) -> bool:
        return self.tx_until > self.medium.engine.now

    def on_rx(self, tx: Transmission, meta: RxMeta):
        pass

    def on_rx_fail(self, tx: Transmission, meta: RxMeta, reason: str):
        pass

    def on_header(self, tx: Transmission, meta: RxMeta):
        pass


@dataclass(eq=False)
class Reception:
    node: RadioNode
    tx: Transmission
    meta: RxMeta
    failed: str | None = None


class Medium:
    """Shared channel: computes link metrics and resolves receptions."""

    HISTORY_US = 10 * SECOND

    def __init__(self, engine: Engine, channel: ChannelModel | None = None):
        self.engine = engine
        self.channel = channel or ChannelModel()
        self.nodes: dict[str, RadioNode] = {}
        self._recent: list[Transmission] = []
        self._jitter = engine.rng("channel")
        self._next_id = 0

    def add(self, node: RadioNode) -> RadioNode:
        if node.name in self.nodes:
            raise ValueError(f"duplicate node {node.name!r}")
        node.medium = self
        self.nodes[node.name] = node
        return node

    def transmit(self, tx: Transmission):
        eng = self.engine
        src = self.nodes.get(tx.source)
        if src is None:
            raise KeyError(f"unknown source node {tx.source!r}")
        if tx.start != eng.now:
            raise SchedulingError("transmissions start at the current instant")
        self._next_id += 1
        tx.tx_id = self._next_id
        eng.record(
            tx.source,
            "tx",
            id=tx.tx_id,
            tx_kind=tx.kind,
            freq=tx.params.freq_hz,
            sf=tx.params.sf,
            dur=tx.duration,
            len=len(tx.payload),
        )
        src.tx_until = max(src.tx_until, tx.end)
        if src._rx is not None and src._rx.failed is None:
            src._rx.failed = "half-duplex"
        self._recent = [t for t in self._recent if t.start + t.core_duration > eng.now - self.HISTORY_US]
        self._recent.append(tx)
        ch = self.channel
        for node in self.nodes.values():
            if node is src:
                continue
            att = ch.attenuation(tx.source, node.name)
            jitter = float(self._jitter.normal(0.0, ch.snr_jitter_sigma_db)) if ch.snr_jitter_sigma_db > 0 else 0.0
            power = tx.params.power_dbm - att + jitter
            snr = power - ch.noise_floor_dbm
            tx.metrics[node.name] = (snr, power)
            if tx.kind == "jam" or node.transmitting or not math.isfinite(power):
                continue
            if not node.multi_demod and node._rx is not None:
                continue
            if snr < _floor(tx) or not node.wants(tx):
                # preamble below the demodulation floor is never detected
                continue
            win = node.window_for(tx)
            meta = RxMeta(eng.now, snr, power, tx.params.freq_hz, tx.params.sf, win.label if win else "")
            rec = Reception(node, tx, meta)
            if not node.multi_demod:
                node._rx = rec
            if tx.params.explicit_header:
                eng.schedule(tx.header_time(), self._header, rec)
            eng.schedule(tx.core_end, self._finish, rec)

    def _header(self, rec: Reception):
        if rec.failed is None:
            rec.node.on_header(rec.tx, rec.meta)

    def _finish(self, rec: Reception):
        node, tx = rec.node, rec.tx
        if node._rx is rec:
            node._rx = None
        reason = rec.failed
        if reason is None:
            cands = [(tx, rec.meta.snr_db, rec.meta.rssi_dbm)]
            for other in self._recent:
                if other is tx or other.params.freq_hz != tx.params.freq_hz or other.source == node.name:
                    continue
                if other.start < tx.core_end and tx.start < other.start + other.core_duration:
                    snr, power = other.metrics.get(node.name, (-math.inf, -math.inf))
                    cands.append((other, snr, power))
            if tx not in resolve_reception(cands):
                reason = "collision"
        self.engine.record(node.name, "rx" if reason is None else "rx-fail", id=tx.tx_id, snr=round(rec.meta.snr_db, 3), reason=reason)
        if reason is None:
            node.on_rx(tx, rec.meta)
        else:
            node.on_rx_fail(tx, rec.meta, reason)


def _floor(tx: Transmission) -> float:
    return required_snr_sf(tx.params.sf)
