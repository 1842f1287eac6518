"""LoRa physical-layer arithmetic.

All durations are integer microseconds.  Time-on-air follows the SX127x
datasheet symbol count and rounds the exact rational result up to the next
microsecond, which keeps feasibility checks conservative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Sequence

BW_125K = 125_000

# EU868 defaults
UPLINK_CHANNELS = (868_100_000, 868_300_000, 868_500_000)
RX2_FREQ = 869_525_000
BEACON_FREQ = 869_525_000

# Demodulation floor per data rate (DR0..DR5), Semtech ADR recommendation.
REQUIRED_SNR_DB = (-20.0, -17.5, -15.0, -12.5, -10.0, -7.5)

# Co-SF capture: the wanted signal must beat every interferer by this margin.
CAPTURE_MARGIN_DB = 6.0

MAX_DR = 5


@dataclass(frozen=True)
class TxParams:
    """Parameters of one LoRa emission.

    ``cr`` is the coding-rate offset (1 means 4/5).  ``low_dr_optimize`` is
    derived from ``sf`` and ``bw_hz`` when left as ``None``.
    """

    sf: int
    bw_hz: int = BW_125K
    cr: int = 1
    freq_hz: int = UPLINK_CHANNELS[0]
    power_dbm: float = 14.0
    preamble_symbols: int = 8
    explicit_header: bool = True
    payload_crc: bool = True
    low_dr_optimize: bool | None = field(default=None)

    def __post_init__(self):
        if not 7 <= self.sf <= 12:
            raise ValueError(f"spreading factor {self.sf} outside [7, 12]")
        if self.bw_hz <= 0:
            raise ValueError("bandwidth must be positive")
        if not 1 <= self.cr <= 4:
            raise ValueError(f"coding rate offset {self.cr} outside [1, 4]")
        if self.preamble_symbols < 1:
            raise ValueError("preamble needs at least one symbol")
        if self.low_dr_optimize is None:
            object.__setattr__(self, "low_dr_optimize", self.sf >= 11 and self.bw_hz == BW_125K)

    @property
    def dr(self) -> int:
        """EU868 data rate index (only meaningful at 125 kHz)."""
        return sf_to_dr(self.sf)

    def with_(self, **changes) -> "TxParams":
        # low_dr_optimize must be re-derived when sf changes and it was implicit
        if "sf" in changes and "low_dr_optimize" not in changes:
            changes["low_dr_optimize"] = None
        return replace(self, **changes)


def dr_to_sf(dr: int) -> int:
    if not 0 <= dr <= MAX_DR:
        raise ValueError(f"data rate DR{dr} not enabled in EU868 uplink plan")
    return 12 - dr


def sf_to_dr(sf: int) -> int:
    if not 7 <= sf <= 12:
        raise ValueError(f"spreading factor {sf} outside [7, 12]")
    return 12 - sf


def data_params(dr: int, freq_hz: int = UPLINK_CHANNELS[0], power_dbm: float = 14.0) -> TxParams:
    """Params of a LoRaWAN data frame (explicit header, CRC, 8-symbol preamble)."""
    return TxParams(sf=dr_to_sf(dr), freq_hz=freq_hz, power_dbm=power_dbm)


def beacon_params(power_dbm: float = 14.0, freq_hz: int = BEACON_FREQ) -> TxParams:
    """EU868 Class B beacon: SF9, 10-symbol preamble, implicit header, no CRC."""
    return TxParams(
        sf=9,
        freq_hz=freq_hz,
        power_dbm=power_dbm,
        preamble_symbols=10,
        explicit_header=False,
        payload_crc=False,
    )


def symbol_duration(params: TxParams) -> int:
    """Symbol time 2**sf / bw in microseconds (rounded up if not exact)."""
    return math.ceil(Fraction(2**params.sf * 1_000_000, params.bw_hz))


def symbol_count(params: TxParams, payload_len: int) -> Fraction:
    """Total symbols of a frame: preamble + sync (4.25) + payload symbols."""
    if payload_len < 1:
        raise ValueError("payload must contain at least one byte")
    de = 1 if params.low_dr_optimize else 0
    ih = 0 if params.explicit_header else 1
    crc = 1 if params.payload_crc else 0
    num = 8 * payload_len - 4 * params.sf + 28 + 16 * crc - 20 * ih
    den = 4 * (params.sf - 2 * de)
    payload_symbols = 8 + max(-(-num // den) * (params.cr + 4), 0)
    return params.preamble_symbols + Fraction(17, 4) + payload_symbols


def time_on_air(params: TxParams, payload_len: int) -> int:
    """Airtime of a ``payload_len``-byte LoRa frame in microseconds."""
    exact = symbol_count(params, payload_len) * Fraction(2**params.sf * 1_000_000, params.bw_hz)
    return math.ceil(exact)


def required_snr(dr: int) -> float:
    """Minimum SNR (dB) to demodulate at the given EU868 data rate."""
    if not 0 <= dr <= MAX_DR:
        raise ValueError(f"data rate DR{dr} out of range")
    return REQUIRED_SNR_DB[dr]


def required_snr_sf(sf: int) -> float:
    return required_snr(sf_to_dr(sf))


def resolve_reception(candidates: Iterable[tuple[object, float, float]]) -> list[object]:
    """Return the decodable transmissions among ``candidates``.

    Each candidate is ``(transmission, rx_snr_db, rx_power_dbm)``; all of them
    are assumed to overlap in time at one receiver.  A transmission decodes if
    its SNR meets the floor of its spreading factor and every other same-SF
    transmission is at least 6 dB weaker.  Different SFs never interfere.
    Jam transmissions interfere but are never decodable.  Beacons sharing a
    ``sync_group`` and start time add constructively and do not interfere with
    each other.
    """
    cands = list(candidates)
    out = []
    for i, (tx, snr, power) in enumerate(cands):
        if getattr(tx, "kind", "data") == "jam":
            continue
        sf = _sf_of(tx)
        if snr < required_snr_sf(sf):
            continue
        ok = True
        for j, (other, _, other_power) in enumerate(cands):
            if i == j or _sf_of(other) != sf or _constructive(tx, other):
                continue
            if power - other_power < CAPTURE_MARGIN_DB:
                ok = False
                break
        if ok:
            out.append(tx)
    return out


def _sf_of(tx) -> int:
    params = getattr(tx, "params", tx)
    return params.sf


def _constructive(a, b) -> bool:
    group = getattr(a, "sync_group", None)
    return (
        group is not None
        and group == getattr(b, "sync_group", None)
        and getattr(a, "start", None) == getattr(b, "start", None)
    )


def toa_table(payload_lengths: Sequence[int], drs: Sequence[int] = range(MAX_DR + 1)):
    """Airtime grid (ms) as a numpy array, rows = payload length, cols = DR."""
    import numpy as np

    grid = np.empty((len(payload_lengths), len(drs)))
    for i, pl in enumerate(payload_lengths):
        for j, dr in enumerate(drs):
            grid[i, j] = time_on_air(data_params(dr), pl) / 1000.0
    return grid
