import binascii
from dataclasses import replace

import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from lwsim import frames as fr
from lwsim.frames import (
    BeaconPayload,
    DeviceSession,
    DeviceTimeAns,
    DeviceTimeReq,
    Direction,
    Frame,
    FrameError,
    LinkADRAns,
    LinkADRReq,
    MicPolicy,
)
from lwsim.phy import UPLINK_CHANNELS, data_params

from oracles import crc16_ccitt, mic, mic_serialization

ADDR = 0x26011BDA
SESSION = DeviceSession.abp(ADDR)


def up(fcnt=1, **kw):
    return Frame(Direction.UPLINK, ADDR, fcnt, **kw)


def down(fcnt=1, **kw):
    return Frame(Direction.DOWNLINK, ADDR, fcnt, **kw)


# strategies

link_adr_req = st.builds(
    LinkADRReq,
    dr=st.integers(0, 15),
    tp_index=st.integers(0, 15),
    ch_mask=st.integers(0, 0xFFFF),
    nb_trans=st.integers(1, 15),
    ch_mask_cntl=st.integers(0, 7),
)
link_adr_ans = st.builds(LinkADRAns, st.booleans(), st.booleans(), st.booleans())
device_time_ans = st.builds(DeviceTimeAns, st.integers(0, 2**48 - 1))


@st.composite
def frames(draw, direction=None):
    direction = direction or draw(st.sampled_from([Direction.UPLINK, Direction.DOWNLINK]))
    pool = link_adr_ans | st.just(DeviceTimeReq()) if direction is Direction.UPLINK else link_adr_req | device_time_ans
    cmds = draw(st.lists(pool, max_size=3))
    assume(len(fr.encode_mac(cmds, direction)) <= fr.MAX_FOPTS)
    fport = draw(st.none() | st.integers(1, 223))
    payload = draw(st.binary(max_size=32)) if fport is not None else b""
    return Frame(
        direction,
        draw(st.integers(0, 0xFFFFFFFF)),
        draw(st.integers(0, 0xFFFF)),
        adr=draw(st.booleans()),
        adr_ack_req=draw(st.booleans()),
        ack=draw(st.booleans()),
        class_b=draw(st.booleans()),
        fopts=tuple(cmds),
        fport=fport,
        frm_payload=payload,
        mic=draw(st.integers(0, 0xFFFFFFFF)),
    )


# --- codec ---


def test_minimal_uplink_is_twelve_bytes():
    assert len(fr.encode(up())) == 12


def test_one_byte_app_payload_is_fourteen_bytes():
    assert len(fr.encode(up(fport=1, frm_payload=b"\x00"))) == 14


def test_wire_layout():
    wire = fr.encode(up(fcnt=0x10203, adr=True, fport=1, frm_payload=b"\xaa", mic=0x11223344))
    assert wire[0] == fr.MHDR_UP
    assert wire[1:5] == ADDR.to_bytes(4, "little")
    assert wire[5] == 0x80
    assert wire[6:8] == (0x0203).to_bytes(2, "little")
    assert wire[8:10] == b"\x01\xaa"
    assert wire[-4:] == (0x11223344).to_bytes(4, "little")


def test_link_adr_req_is_five_bytes():
    assert len(fr.encode_mac([LinkADRReq(5, 1, 0b111)], Direction.DOWNLINK)) == 5
    assert len(fr.encode_mac([LinkADRAns(True, True, True)], Direction.UPLINK)) == 2


@given(frames())
def test_roundtrip(frame):
    assert fr.decode(fr.encode(frame)) == frame


@given(frames(), st.integers(0, 0xFFFF0000))
def test_fcnt_reconstruction_is_smallest_not_below_reference(frame, ref):
    wire = fr.encode(frame)
    got = fr.decode(wire, fcnt_ref=ref).fcnt
    assert got & 0xFFFF == frame.fcnt & 0xFFFF
    assert ref <= got < ref + 0x10000


@given(st.binary(max_size=11))
def test_truncated_frames_rejected(data):
    with pytest.raises(FrameError):
        fr.decode(data)


@given(st.binary(min_size=12, max_size=40))
def test_decoder_never_crashes_on_garbage(data):
    try:
        fr.decode(data)
    except FrameError:
        pass


def test_fopts_overflow_rejected():
    cmds = (LinkADRReq(5, 0, 7),) * 4
    with pytest.raises(FrameError):
        fr.encode(down(fopts=cmds))


def test_direction_mismatch_rejected():
    with pytest.raises(FrameError):
        fr.decode(fr.encode(up()), Direction.DOWNLINK)


def test_commands_checked_against_direction():
    with pytest.raises(FrameError):
        fr.encode_mac([LinkADRReq(5, 0, 7)], Direction.UPLINK)
    with pytest.raises(FrameError):
        fr.encode_mac([LinkADRAns(True, True, True)], Direction.DOWNLINK)


def test_payload_requires_fport():
    with pytest.raises(FrameError):
        up(frm_payload=b"x")


@pytest.mark.parametrize("kw", [dict(nb_trans=0), dict(ch_mask=0x10000), dict(dr=16), dict(ch_mask_cntl=8)])
def test_link_adr_req_field_ranges(kw):
    args = dict(dr=5, tp_index=0, ch_mask=7)
    args.update(kw)
    with pytest.raises(FrameError):
        LinkADRReq(**args)


def test_peek_header():
    wire = fr.encode(up(fcnt=0x12345, adr_ack_req=True))
    assert fr.peek_header(wire) == (Direction.UPLINK, ADDR, 0x2345, True)


def test_uplink_and_downlink_counters_are_separate_spaces():
    s = SESSION.copy()
    params = data_params(0)
    u = fr.sign(s, up(fcnt=5), params, MicPolicy.V11)
    assert fr.verify(u, s, params, MicPolicy.V11)
    s.fcnt_up = 5
    d = fr.sign(s, down(fcnt=1), params, MicPolicy.V11)
    assert fr.verify(d, s, params, MicPolicy.V11)


# --- integrity ---


def _sign(frame, freq, policy=MicPolicy.V11, dr=0, conf=None):
    return fr.compute_mic(SESSION, frame, data_params(dr, freq), policy, conf)


def test_v10_mic_ignores_channel():
    f = up(fport=1, frm_payload=b"\x01")
    assert _sign(f, UPLINK_CHANNELS[0], MicPolicy.V10) == _sign(f, UPLINK_CHANNELS[1], MicPolicy.V10)


def test_v11_mic_binds_channel_and_matches_oracle():
    f = up(fport=1, frm_payload=b"\x01", adr=True)
    a = _sign(f, UPLINK_CHANNELS[0])
    b = _sign(f, UPLINK_CHANNELS[1])
    assert a != b
    for freq, got in ((UPLINK_CHANNELS[0], a), (UPLINK_CHANNELS[1], b)):
        ser = mic_serialization(False, ADDR, 1, 1, 0, 0, 0, b"", 1, b"\x01", tx=(freq, 0))
        assert got == mic(SESSION.key_up, ser)


@given(frames(), st.sampled_from(list(MicPolicy)), st.sampled_from(UPLINK_CHANNELS), st.integers(0, 5), st.none() | st.integers(0, 0xFFFF))
def test_mic_matches_oracle_serialization(frame, policy, freq, dr, conf):
    frame = replace(frame, dev_addr=ADDR)
    is_down = frame.direction is Direction.DOWNLINK
    covers_tx = (not is_down and policy is not MicPolicy.V10) or (is_down and policy is MicPolicy.HARDENED)
    binds_conf = is_down and conf is not None and (policy is MicPolicy.HARDENED or (policy is MicPolicy.V11 and frame.ack))
    ser = mic_serialization(
        is_down,
        ADDR,
        frame.fcnt,
        frame.adr,
        frame.adr_ack_req,
        frame.ack,
        frame.class_b,
        frame.fopts_bytes,
        frame.fport,
        frame.frm_payload,
        tx=(freq, dr) if covers_tx else None,
        conf=conf if binds_conf else None,
    )
    key = SESSION.key_down if is_down else SESSION.key_up
    assert fr.compute_mic(SESSION, frame, data_params(dr, freq), policy, conf) == mic(key, ser)


def test_downlink_replayed_on_other_frequency_v11_vs_hardened():
    rx1 = data_params(2, UPLINK_CHANNELS[0])
    rx2 = data_params(0, 869_525_000)
    for policy, expect in ((MicPolicy.V11, True), (MicPolicy.HARDENED, False)):
        f = fr.sign(SESSION, down(), rx1, policy, conf_fcnt=7)
        assert bool(fr.verify(f, SESSION.copy(), rx2, policy, conf_fcnt=7)) is expect


def test_confirmed_counter_binding():
    params = data_params(0)
    # V11 binds the uplink counter only when ACK is set
    f = fr.sign(SESSION, down(ack=False), params, MicPolicy.V11, conf_fcnt=3)
    assert fr.verify(f, SESSION.copy(), params, MicPolicy.V11, conf_fcnt=9)
    f = fr.sign(SESSION, down(ack=True), params, MicPolicy.V11, conf_fcnt=3)
    assert not fr.verify(f, SESSION.copy(), params, MicPolicy.V11, conf_fcnt=9)
    # Hardened binds it for every Class A downlink
    f = fr.sign(SESSION, down(), params, MicPolicy.HARDENED, conf_fcnt=3)
    assert fr.verify(f, SESSION.copy(), params, MicPolicy.HARDENED, conf_fcnt=3)
    assert not fr.verify(f, SESSION.copy(), params, MicPolicy.HARDENED, conf_fcnt=4)


def test_verify_untouched_frame():
    params = data_params(3)
    f = fr.sign(SESSION, up(fport=1, frm_payload=b"hi"), params, MicPolicy.V11)
    v = fr.verify(f, SESSION.copy(), params, MicPolicy.V11)
    assert v and v.reason is None


def test_verify_stale_counter():
    params = data_params(3)
    s = SESSION.copy()
    f = fr.sign(s, up(fcnt=4), params, MicPolicy.V11)
    s.fcnt_up = 4
    v = fr.verify(f, s, params, MicPolicy.V11)
    assert not v and v.reason == "stale-fcnt"


@given(st.integers(0, 8 * 14 - 1))
def test_any_flipped_bit_fails(bit):
    params = data_params(3)
    f = fr.sign(SESSION, up(fport=1, frm_payload=b"\x42"), params, MicPolicy.V11)
    wire = bytearray(fr.encode(f))
    wire[bit // 8] ^= 1 << (bit % 8)
    try:
        g = fr.decode(bytes(wire))
    except FrameError:
        return
    if g.dev_addr != ADDR:
        return
    assert not fr.verify(g, SESSION.copy(), params, MicPolicy.V11)


def test_session_mismatch():
    with pytest.raises(fr.SessionMismatch):
        fr.compute_mic(DeviceSession.abp(1), up(), None, MicPolicy.V10)
    assert fr.verify(up(), DeviceSession.abp(1), None, MicPolicy.V10).reason == "bad-mic"


# --- confidentiality ---


@given(frames(Direction.DOWNLINK), st.sampled_from(list(MicPolicy)))
def test_conceal_reveal_roundtrip(frame, policy):
    frame = replace(frame, dev_addr=ADDR)
    assert fr.reveal(fr.conceal(frame, SESSION, policy), SESSION, policy) == frame


def test_attacker_view_v10_reads_piggybacked_command():
    cmd = LinkADRReq(5, 1, 7)
    f = fr.conceal(down(fopts=(cmd,)), SESSION, MicPolicy.V10)
    seen = fr.decode(fr.encode(f))
    assert seen.mac_commands == (cmd,)


def test_attacker_view_v11_only_length():
    cmd = LinkADRReq(5, 1, 7)
    f = fr.conceal(down(fopts=(cmd,)), SESSION, MicPolicy.V11)
    seen = fr.decode(fr.encode(f), parse_fopts=False)
    assert len(seen.fopts_bytes) == 5
    assert seen.fopts_bytes != fr.encode_mac([cmd], Direction.DOWNLINK)
    with pytest.raises(FrameError):
        seen.mac_commands


def test_header_flags_stay_clear():
    f = fr.conceal(up(adr=True, adr_ack_req=True, fport=1, frm_payload=b"\x00"), SESSION, MicPolicy.HARDENED)
    assert fr.peek_header(fr.encode(f))[3] is True


# --- beacons ---


def test_beacon_is_seventeen_bytes_with_valid_crcs():
    b = BeaconPayload(1_400_000_128, b"GW")
    wire = b.encode()
    assert len(wire) == fr.BEACON_LEN
    assert int.from_bytes(wire[6:8], "little") == crc16_ccitt(wire[:6])
    assert int.from_bytes(wire[15:17], "little") == crc16_ccitt(wire[8:15])
    assert crc16_ccitt(b"123456789") == binascii.crc_hqx(b"123456789", 0)


@given(st.integers(0, 2**32 - 1), st.binary(max_size=7), st.binary(max_size=20))
def test_beacon_roundtrip_ignores_tail(t, info, tail):
    b = BeaconPayload(t, info)
    assert BeaconPayload.decode(b.encode() + tail) == b


def test_beacon_crc_detects_corruption():
    wire = bytearray(BeaconPayload(5, b"GW").encode())
    wire[3] ^= 0x01
    with pytest.raises(FrameError):
        BeaconPayload.decode(bytes(wire))


def test_gw_info_not_in_timing_fields():
    a, b = BeaconPayload(99, b"GW-A"), BeaconPayload(99, b"GW-B")
    assert a.timing_fields() == b.timing_fields()
    assert a.encode() != b.encode()


def test_beacons_are_not_data_frames():
    with pytest.raises(FrameError):
        Frame(Direction.BEACON, 0, 0)
    with pytest.raises(FrameError):
        BeaconPayload(0, b"12345678")
