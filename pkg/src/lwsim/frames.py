"""LoRaWAN MAC frame model.

Wire layout (little endian, mirrors the LoRaWAN header order)::

    MHDR(1) | DevAddr(4) | FCtrl(1) | FCnt(2) | FOpts(0..15) | [FPort(1) | FRMPayload] | MIC(4)

FCtrl bits: 7 ADR, 6 ADRACKReq, 5 ACK, 4 ClassB, 3..0 FOptsLen.  Only the low
16 bits of the frame counter go on air; :func:`decode` rebuilds the full
32-bit value from a reference counter.

The MIC is a 32-bit truncated HMAC-SHA256 over a canonical serialization
(see ``docs/formats.md``).  Which fields it covers depends on the
:class:`MicPolicy`; the attacks only care about that coverage, not about
the primitive.
"""

from __future__ import annotations

import binascii
import enum
import hashlib
import hmac
import struct
from dataclasses import dataclass, field, replace
from typing import Union

from .phy import TxParams

MHDR_UP = 0x40
MHDR_DOWN = 0x60
MIN_DATA_FRAME = 12
MAX_FOPTS = 15
BEACON_LEN = 17
GW_INFO_LEN = 7


class FrameError(ValueError):
    """Raised on malformed or truncated frames."""


class SessionMismatch(ValueError):
    pass


class Direction(str, enum.Enum):
    UPLINK = "uplink"
    DOWNLINK = "downlink"
    BEACON = "beacon"


class MicPolicy(str, enum.Enum):
    """Field coverage of the MIC.

    V10: frame fields only.  V11: uplinks also cover channel and DR; downlinks
    with ACK set cover the confirmed uplink counter.  HARDENED: downlinks
    additionally cover channel and DR and are always bound to the uplink they
    answer.
    """

    V10 = "V10"
    V11 = "V11"
    HARDENED = "Hardened"


# --- MAC commands -----------------------------------------------------------


@dataclass(frozen=True)
class LinkADRReq:
    dr: int
    tp_index: int
    ch_mask: int
    nb_trans: int = 1
    ch_mask_cntl: int = 0

    def __post_init__(self):
        if not 0 <= self.dr <= 15 or not 0 <= self.tp_index <= 15:
            raise FrameError("DR/TX power field out of range")
        if not 0 <= self.ch_mask <= 0xFFFF:
            raise FrameError("channel mask is 16 bits")
        if not 1 <= self.nb_trans <= 15:
            raise FrameError("nb_trans must be in [1, 15]")
        if not 0 <= self.ch_mask_cntl <= 7:
            raise FrameError("ch_mask_cntl is 3 bits")


@dataclass(frozen=True)
class LinkADRAns:
    power_ok: bool
    dr_ok: bool
    ch_ok: bool

    @property
    def accepted(self) -> bool:
        return self.power_ok and self.dr_ok and self.ch_ok


@dataclass(frozen=True)
class DeviceTimeReq:
    pass


@dataclass(frozen=True)
class DeviceTimeAns:
    gps_time: int  # microseconds


MacCommand = Union[LinkADRReq, LinkADRAns, DeviceTimeReq, DeviceTimeAns]

CID_LINK_ADR = 0x03
CID_DEVICE_TIME = 0x0D


def encode_mac(cmds, direction: Direction) -> bytes:
    out = bytearray()
    for cmd in cmds:
        if isinstance(cmd, LinkADRReq):
            _expect(direction, Direction.DOWNLINK, cmd)
            out += bytes([CID_LINK_ADR, (cmd.dr << 4) | cmd.tp_index])
            out += struct.pack("<H", cmd.ch_mask)
            out.append((cmd.ch_mask_cntl << 4) | cmd.nb_trans)
        elif isinstance(cmd, LinkADRAns):
            _expect(direction, Direction.UPLINK, cmd)
            out += bytes([CID_LINK_ADR, (cmd.power_ok << 2) | (cmd.dr_ok << 1) | int(cmd.ch_ok)])
        elif isinstance(cmd, DeviceTimeReq):
            _expect(direction, Direction.UPLINK, cmd)
            out.append(CID_DEVICE_TIME)
        elif isinstance(cmd, DeviceTimeAns):
            _expect(direction, Direction.DOWNLINK, cmd)
            out.append(CID_DEVICE_TIME)
            out += cmd.gps_time.to_bytes(6, "little")
        else:
            raise FrameError(f"unknown MAC command {cmd!r}")
    return bytes(out)


def decode_mac(data: bytes, direction: Direction) -> tuple:
    cmds = []
    i = 0
    while i < len(data):
        cid = data[i]
        if cid == CID_LINK_ADR and direction is Direction.DOWNLINK:
            if i + 5 > len(data):
                raise FrameError("truncated LinkADRReq")
            (mask,) = struct.unpack_from("<H", data, i + 2)
            red = data[i + 4]
            cmds.append(LinkADRReq(data[i + 1] >> 4, data[i + 1] & 0x0F, mask, red & 0x0F, (red >> 4) & 0x07))
            i += 5
        elif cid == CID_LINK_ADR:
            if i + 2 > len(data):
                raise FrameError("truncated LinkADRAns")
            st = data[i + 1]
            cmds.append(LinkADRAns(bool(st & 4), bool(st & 2), bool(st & 1)))
            i += 2
        elif cid == CID_DEVICE_TIME and direction is Direction.UPLINK:
            cmds.append(DeviceTimeReq())
            i += 1
        elif cid == CID_DEVICE_TIME:
            if i + 7 > len(data):
                raise FrameError("truncated DeviceTimeAns")
            cmds.append(DeviceTimeAns(int.from_bytes(data[i + 1 : i + 7], "little")))
            i += 7
        else:
            raise FrameError(f"unknown MAC command id 0x{cid:02x}")
    return tuple(cmds)


def _expect(direction, wanted, cmd):
    if direction is not wanted:
        raise FrameError(f"{type(cmd).__name__} is not a {direction.value} command")


# --- frames -----------------------------------------------------------------


@dataclass(frozen=True)
class Frame:
    """A LoRaWAN data frame.

    ``fopts`` holds MAC commands in clear, or raw bytes once concealed (or when
    decoded without parsing, which is all an eavesdropper gets under V1.1).
    """

    direction: Direction
    dev_addr: int
    fcnt: int
    adr: bool = False
    adr_ack_req: bool = False
    ack: bool = False
    class_b: bool = False
    fopts: Union[tuple, bytes] = ()
    fport: int | None = None
    frm_payload: bytes = b""
    mic: int = 0

    def __post_init__(self):
        if self.direction is Direction.BEACON:
            raise FrameError("beacons are BeaconPayload, not Frame")
        if not 0 <= self.dev_addr <= 0xFFFFFFFF or not 0 <= self.fcnt <= 0xFFFFFFFF:
            raise FrameError("dev_addr and fcnt are 32-bit")
        if self.fport is None and self.frm_payload:
            raise FrameError("payload requires an FPort")
        if self.fport is not None and not 0 <= self.fport <= 255:
            raise FrameError("fport is one byte")

    @property
    def fopts_bytes(self) -> bytes:
        if isinstance(self.fopts, (bytes, bytearray)):
            return bytes(self.fopts)
        return encode_mac(self.fopts, self.direction)

    @property
    def mac_commands(self) -> tuple:
        if isinstance(self.fopts, (bytes, bytearray)):
            raise FrameError("FOpts are concealed")
        return self.fopts


def encode(frame: Frame) -> bytes:
    fopts = frame.fopts_bytes
    if len(fopts) > MAX_FOPTS:
        raise FrameError(f"FOpts overflow ({len(fopts)} > {MAX_FOPTS} bytes)")
    fctrl = (frame.adr << 7) | (frame.adr_ack_req << 6) | (frame.ack << 5) | (frame.class_b << 4) | len(fopts)
    out = bytearray([MHDR_UP if frame.direction is Direction.UPLINK else MHDR_DOWN])
    out += struct.pack("<IBH", frame.dev_addr, fctrl, frame.fcnt & 0xFFFF)
    out += fopts
    if frame.fport is not None:
        out.append(frame.fport)
        out += frame.frm_payload
    out += struct.pack("<I", frame.mic)
    return bytes(out)


def decode(data: bytes, direction: Direction | None = None, fcnt_ref: int = 0, parse_fopts: bool = True) -> Frame:
    """Parse a data frame.

    ``fcnt_ref`` is the last known counter: the result is the smallest 32-bit
    counter >= ``fcnt_ref`` whose low 16 bits match the wire value.
    """
    if len(data) < MIN_DATA_FRAME:
        raise FrameError(f"truncated frame ({len(data)} < {MIN_DATA_FRAME} bytes)")
    mhdr = data[0]
    if mhdr == MHDR_UP:
        wire_dir = Direction.UPLINK
    elif mhdr == MHDR_DOWN:
        wire_dir = Direction.DOWNLINK
    else:
        raise FrameError(f"unsupported MHDR 0x{mhdr:02x}")
    if direction is not None and Direction(direction) is not wire_dir:
        raise FrameError(f"expected {Direction(direction).value} frame")
    dev_addr, fctrl, fcnt16 = struct.unpack_from("<IBH", data, 1)
    n_opts = fctrl & 0x0F
    body_end = len(data) - 4
    if 8 + n_opts > body_end:
        raise FrameError("FOpts exceed frame length")
    raw_opts = data[8 : 8 + n_opts]
    fopts = decode_mac(raw_opts, wire_dir) if parse_fopts else bytes(raw_opts)
    rest = data[8 + n_opts : body_end]
    fport = rest[0] if rest else None
    payload = bytes(rest[1:]) if rest else b""
    fcnt = (fcnt_ref & ~0xFFFF) | fcnt16
    if fcnt < fcnt_ref:
        fcnt += 0x10000
    (mic,) = struct.unpack_from("<I", data, body_end)
    return Frame(
        direction=wire_dir,
        dev_addr=dev_addr,
        fcnt=fcnt & 0xFFFFFFFF,
        adr=bool(fctrl & 0x80),
        adr_ack_req=bool(fctrl & 0x40),
        ack=bool(fctrl & 0x20),
        class_b=bool(fctrl & 0x10),
        fopts=fopts,
        fport=fport,
        frm_payload=payload,
        mic=mic,
    )


def peek_header(data: bytes) -> tuple[Direction, int, int, bool]:
    """(direction, dev_addr, fcnt16, adr_ack_req) from the cleartext header."""
    f = decode(data, parse_fopts=False)
    return f.direction, f.dev_addr, f.fcnt & 0xFFFF, f.adr_ack_req


# --- sessions and integrity -------------------------------------------------


@dataclass
class DeviceSession:
    """ABP session.  Counters hold the last used/accepted value; 0 means none,
    so the first frame in each direction carries counter 1."""

    dev_addr: int
    key_up: bytes
    key_down: bytes
    app_key: bytes
    fcnt_up: int = 0
    fcnt_down: int = 0

    @classmethod
    def abp(cls, dev_addr: int, secret: bytes = b"lwsim") -> "DeviceSession":
        def kdf(label: bytes) -> bytes:
            return hashlib.sha256(secret + label + dev_addr.to_bytes(4, "little")).digest()[:16]

        return cls(dev_addr, kdf(b"SNwkSIntKey"), kdf(b"NwkSEncKey"), kdf(b"AppSKey"))

    def copy(self) -> "DeviceSession":
        return replace(self)


@dataclass(frozen=True)
class Verdict:
    ok: bool
    reason: str | None = None

    def __bool__(self):
        return self.ok


def mic_input(frame: Frame, tx: TxParams | None, policy: MicPolicy, conf_fcnt: int | None = None) -> bytes:
    """Canonical byte string the MIC is computed over."""
    up = frame.direction is Direction.UPLINK
    fopts = frame.fopts_bytes
    flags = (frame.adr << 3) | (frame.adr_ack_req << 2) | (frame.ack << 1) | int(frame.class_b)
    out = bytearray(b"LWMIC1")
    out += struct.pack("<BIIBB", 0 if up else 1, frame.dev_addr, frame.fcnt, flags, len(fopts))
    out += fopts
    out += b"\x00" if frame.fport is None else bytes([1, frame.fport])
    out += struct.pack("<H", len(frame.frm_payload)) + frame.frm_payload
    policy = MicPolicy(policy)
    if tx is not None and ((up and policy is not MicPolicy.V10) or (not up and policy is MicPolicy.HARDENED)):
        out += b"T" + struct.pack("<IB", tx.freq_hz, tx.dr)
    if not up and conf_fcnt is not None:
        if policy is MicPolicy.HARDENED or (policy is MicPolicy.V11 and frame.ack):
            out += b"C" + struct.pack("<H", conf_fcnt & 0xFFFF)
    return bytes(out)


def compute_mic(
    session: DeviceSession,
    frame: Frame,
    tx: TxParams | None,
    policy: MicPolicy,
    conf_fcnt: int | None = None,
) -> int:
    if session.dev_addr != frame.dev_addr:
        raise SessionMismatch(f"session {session.dev_addr:08x} != frame {frame.dev_addr:08x}")
    key = session.key_up if frame.direction is Direction.UPLINK else session.key_down
    digest = hmac.new(key, mic_input(frame, tx, policy, conf_fcnt), hashlib.sha256).digest()
    return int.from_bytes(digest[:4], "little")


def sign(session, frame, tx, policy, conf_fcnt=None) -> Frame:
    return replace(frame, mic=compute_mic(session, frame, tx, policy, conf_fcnt))


def verify(frame: Frame, session: DeviceSession, tx: TxParams | None, policy: MicPolicy, conf_fcnt: int | None = None) -> Verdict:
    """Check MIC and replay counter.  Does not advance the session counter."""
    if session.dev_addr != frame.dev_addr:
        return Verdict(False, "bad-mic")
    if compute_mic(session, frame, tx, policy, conf_fcnt) != frame.mic:
        return Verdict(False, "bad-mic")
    last = session.fcnt_up if frame.direction is Direction.UPLINK else session.fcnt_down
    if frame.fcnt <= last:
        return Verdict(False, "stale-fcnt")
    return Verdict(True)


# --- confidentiality --------------------------------------------------------


def _keystream(key: bytes, frame: Frame, label: bytes, n: int) -> bytes:
    out = bytearray()
    block = 0
    head = struct.pack("<BII", frame.direction is Direction.DOWNLINK, frame.dev_addr, frame.fcnt)
    while len(out) < n:
        out += hmac.new(key, label + head + struct.pack("<I", block), hashlib.sha256).digest()
        block += 1
    return bytes(out[:n])


def _xor(data: bytes, stream: bytes) -> bytes:
    return bytes(a ^ b for a, b in zip(data, stream))


def conceal(frame: Frame, session: DeviceSession, policy: MicPolicy) -> Frame:
    """Encrypt FRMPayload, and under V1.1/Hardened also FOpts.  FHDR flags stay clear."""
    payload = _xor(frame.frm_payload, _keystream(session.app_key, frame, b"P", len(frame.frm_payload)))
    fopts = frame.fopts
    if MicPolicy(policy) is not MicPolicy.V10:
        raw = frame.fopts_bytes
        fopts = _xor(raw, _keystream(session.key_down, frame, b"F", len(raw)))
    return replace(frame, frm_payload=payload, fopts=fopts)


def reveal(frame: Frame, session: DeviceSession, policy: MicPolicy) -> Frame:
    """Inverse of :func:`conceal`; parses FOpts back into MAC commands."""
    payload = _xor(frame.frm_payload, _keystream(session.app_key, frame, b"P", len(frame.frm_payload)))
    fopts = frame.fopts
    if isinstance(fopts, (bytes, bytearray)):
        if MicPolicy(policy) is not MicPolicy.V10:
            fopts = _xor(bytes(fopts), _keystream(session.key_down, frame, b"F", len(fopts)))
        fopts = decode_mac(bytes(fopts), frame.direction)
    return replace(frame, frm_payload=payload, fopts=fopts)


# --- beacons ----------------------------------------------------------------


@dataclass(frozen=True)
class BeaconPayload:
    """EU868 beacon: RFU(2) | Time(4) | CRC(2) | GwSpecific(7) | CRC(2)."""

    gps_time_s: int
    gw_info: bytes = field(default=bytes(GW_INFO_LEN))

    def __post_init__(self):
        if len(self.gw_info) > GW_INFO_LEN:
            raise FrameError("gw_info is at most 7 bytes")
        if len(self.gw_info) < GW_INFO_LEN:
            object.__setattr__(self, "gw_info", self.gw_info.ljust(GW_INFO_LEN, b"\x00"))

    def encode(self) -> bytes:
        head = b"\x00\x00" + struct.pack("<I", self.gps_time_s & 0xFFFFFFFF)
        return head + struct.pack("<H", binascii.crc_hqx(head, 0)) + self.gw_info + struct.pack(
            "<H", binascii.crc_hqx(self.gw_info, 0)
        )

    @classmethod
    def decode(cls, data: bytes) -> "BeaconPayload":
        # implicit header: anything past 17 bytes is never demodulated
        if len(data) < BEACON_LEN:
            raise FrameError("truncated beacon")
        data = data[:BEACON_LEN]
        head, gw = data[:6], data[8:15]
        if struct.unpack_from("<H", data, 6)[0] != binascii.crc_hqx(head, 0):
            raise FrameError("beacon time CRC mismatch")
        if struct.unpack_from("<H", data, 15)[0] != binascii.crc_hqx(gw, 0):
            raise FrameError("beacon gw info CRC mismatch")
        return cls(struct.unpack_from("<I", head, 2)[0], bytes(gw))

    def timing_fields(self) -> bytes:
        """Bytes devices derive timing from (gw_info excluded)."""
        return self.encode()[:8]
