"""Codec golden vectors, round-trip properties, framing, and session rules."""

import struct
from pathlib import Path
from random import Random

import pytest
from hypothesis import given, settings, strategies as st

from sdransim import wire
from sdransim.policy import (
    CapacityRule,
    Bound,
    DrbDemand,
    InterSliceAlgo,
    IntraSliceAlgo,
    L2Descriptor,
    L3Descriptor,
    Metric,
    NasId,
    QosMatch,
    QosProfile,
    RrmPolicy,
    RsiTemplate,
    Scope,
    Snssai,
    WILDCARD_MATCH,
)

TESTDATA = Path(__file__).resolve().parent.parent / "testdata" / "wire"


def read_golden(name: str) -> bytes:
    return bytes.fromhex(TESTDATA.joinpath(name).read_text().strip())


# ----------------------------------------------------------------------
# Golden vectors, hand-packed field by field independently of the codec.

def test_hello_req_golden():
    msg = wire.Message(
        element_id=0x1, cell_id=0, xid=7, seq=1,
        action=wire.Action.HELLO_REQ, body=wire.HelloReq(),
        event_type=wire.EventType.SCHEDULED, opcode=wire.OP_RETRIEVE,
        period_ms=2000,
    )
    hand = struct.pack(
        ">BBIQHI I HBI".replace(" ", ""),
        1,          # version
        1,          # event type: scheduled
        31,         # length: 24 + 7, empty body
        0x1,        # element id
        0,          # cell id
        7,          # xid
        1,          # seq
        1,          # action: hello request
        2,          # opcode: retrieve
        2000,       # period
    )
    assert wire.encode(msg) == hand
    assert wire.encode(msg) == read_golden("hello_req.hex")
    assert wire.decode(hand) == msg


def test_ac_resp_golden():
    msg = wire.Message(
        element_id=0x1, cell_id=0, xid=9, seq=5,
        action=wire.Action.AC_RESP, body=wire.AcResp(rnti=0x47, accepted=True),
    )
    hand = struct.pack(">BBIQHIIHBI", 1, 0, 34, 1, 0, 9, 5, 14, 0, 0)
    hand += struct.pack(">HB", 0x47, 1)
    assert wire.encode(msg) == hand
    assert wire.encode(msg) == read_golden("ac_resp.hex")
    decoded = wire.decode(hand)
    assert decoded.action is wire.Action.AC_RESP
    assert decoded.opcode == wire.OP_SUCCESS
    assert decoded.body == wire.AcResp(0x47, True)


def test_caps_resp_golden():
    msg = wire.Message(
        element_id=0x1, cell_id=0, xid=2, seq=3,
        action=wire.Action.CAPS_RESP,
        body=wire.CapsResp(
            enb_id=0x1, slicing_supported=True,
            cells=(wire.CellCaps(0, 3100, 21100, 50),),
        ),
    )
    body = struct.pack(">QBH", 1, 1, 1) + struct.pack(">HIIH", 0, 3100, 21100, 50)
    hand = struct.pack(">BBIQHIIHBI", 1, 0, 31 + len(body), 1, 0, 2, 3, 4, 0, 0) + body
    assert wire.encode(msg) == hand
    assert wire.encode(msg) == read_golden("caps_resp.hex")
    assert wire.decode(hand) == msg


def test_slice_meas_golden():
    msg = wire.Message(
        element_id=0x1, cell_id=0, xid=11, seq=8,
        action=wire.Action.SLICE_MEAS,
        body=wire.SliceMeas(1, 50000, 1745, 0, 0, 1000),
        event_type=wire.EventType.SCHEDULED, period_ms=1000,
    )
    body = struct.pack(">IQQQQI", 1, 50000, 1745, 0, 0, 1000)
    hand = struct.pack(">BBIQHIIHBI", 1, 1, 31 + len(body), 1, 0, 11, 8, 15, 0, 1000) + body
    assert wire.encode(msg) == hand
    assert wire.encode(msg) == read_golden("slice_meas.hex")
    assert wire.decode(hand) == msg


# ----------------------------------------------------------------------
# Strategies covering every action kind.

qos_profiles = st.builds(QosProfile, qci=st.integers(1, 255), arp=st.integers(1, 15))
match_pairs = st.tuples(
    st.one_of(st.none(), st.integers(1, 255)),
    st.one_of(st.none(), st.integers(1, 15)),
)
qos_matches = st.frozensets(match_pairs, min_size=1, max_size=3).map(QosMatch)
plmns = st.text("0123456789", min_size=5, max_size=6)
nas_ids = st.builds(
    NasId,
    kind=st.sampled_from(["imsi", "tmsi"]),
    value=st.text("0123456789abcdef", min_size=1, max_size=16),
)


@st.composite
def capacity_rules(draw):
    metric = draw(st.sampled_from(list(Metric)))
    if metric is Metric.UE_COUNT:
        match = WILDCARD_MATCH
    else:
        match = draw(qos_matches)
    if metric is Metric.RADIO_LOAD_PERCENT:
        value = draw(st.floats(0, 100, allow_nan=False))
    else:
        value = draw(st.floats(0, 1e12, allow_nan=False, allow_infinity=False))
    return CapacityRule(
        metric, match, draw(st.sampled_from(list(Scope))),
        draw(st.sampled_from(list(Bound))), value,
    )


@st.composite
def l2_descriptors(draw):
    inter = draw(st.sampled_from(list(InterSliceAlgo)))
    share = (
        draw(st.floats(0.5, 100, allow_nan=False))
        if inter is InterSliceAlgo.WRR
        else None
    )
    return L2Descriptor(inter, share, draw(st.sampled_from(list(IntraSliceAlgo))))


rrm_policies = st.builds(
    RrmPolicy,
    l3=st.builds(
        L3Descriptor,
        rules=st.lists(capacity_rules(), max_size=4).map(tuple),
        averaging_window_ms=st.integers(1, 10_000),
    ),
    l2=l2_descriptors(),
    l1_opaque=st.binary(max_size=32),
)

templates = st.builds(
    RsiTemplate,
    rsi_id=st.integers(0, 2**32 - 1),
    plmn_list=st.lists(plmns, max_size=3).map(tuple),
    cell_list=st.lists(
        st.tuples(st.integers(0, 2**64 - 1), st.integers(0, 2**16 - 1)),
        min_size=1, max_size=3,
    ).map(tuple),
    rrm_policy=rrm_policies,
    snssai_list=st.lists(
        st.builds(Snssai, plmn=plmns, sst=st.integers(0, 255),
                  sd=st.one_of(st.none(), st.integers(0, 0xFFFFFF))),
        max_size=2,
    ).map(tuple),
    nas_id_list=st.lists(nas_ids, max_size=4).map(tuple),
)

ue_records = st.builds(
    wire.UeRecord,
    cell_id=st.integers(0, 2**16 - 1),
    plmn_id=plmns,
    nas_id=nas_ids,
    rnti=st.integers(0, 2**16 - 1),
    drbs=st.lists(
        st.builds(wire.DrbInfo, drb_id=st.integers(0, 255),
                  qci=st.integers(1, 255), arp=st.integers(1, 15)),
        max_size=3,
    ).map(tuple),
)

_BODIES = {
    wire.Action.HELLO_REQ: st.just(wire.HelloReq()),
    wire.Action.HELLO_RESP: st.just(wire.HelloResp()),
    wire.Action.CAPS_REQ: st.just(wire.CapsReq()),
    wire.Action.CAPS_RESP: st.builds(
        wire.CapsResp,
        enb_id=st.integers(0, 2**64 - 1),
        slicing_supported=st.booleans(),
        cells=st.lists(
            st.builds(wire.CellCaps, cell_id=st.integers(0, 2**16 - 1),
                      dl_earfcn=st.integers(0, 2**32 - 1),
                      ul_earfcn=st.integers(0, 2**32 - 1),
                      n_prb=st.integers(0, 2**16 - 1)),
            max_size=3,
        ).map(tuple),
    ),
    wire.Action.UE_REPORT_REQ: st.just(wire.UeReportReq()),
    wire.Action.UE_REPORT_RESP: st.builds(
        wire.UeReportResp, ues=st.lists(ue_records, max_size=3).map(tuple)
    ),
    wire.Action.ADD_SLICE_REQ: templates.map(
        lambda t: wire.AddSliceReq(t.rsi_id, t)
    ),
    wire.Action.ADD_SLICE_RESP: st.builds(
        wire.AddSliceResp, rsi_id=st.integers(0, 2**32 - 1)
    ),
    wire.Action.REMOVE_SLICE_REQ: st.builds(
        wire.RemoveSliceReq, rsi_id=st.integers(0, 2**32 - 1)
    ),
    wire.Action.REMOVE_SLICE_RESP: st.builds(
        wire.RemoveSliceResp, rsi_id=st.integers(0, 2**32 - 1)
    ),
    wire.Action.RAN_SLICE_REQ: st.builds(
        wire.RanSliceReq, rsi_id=st.integers(0, 2**32 - 1),
        policy=rrm_policies, active=st.booleans(),
    ),
    wire.Action.RAN_SLICE_RESP: st.builds(
        wire.RanSliceResp,
        slices=st.lists(
            st.builds(wire.SliceStatus, rsi_id=st.integers(0, 2**32 - 1),
                      policy=rrm_policies, active=st.booleans(),
                      ue_count=st.integers(0, 2**32 - 1)),
            max_size=3,
        ).map(tuple),
    ),
    wire.Action.AC_REQ: st.builds(
        wire.AcReq,
        rnti=st.integers(0, 2**16 - 1),
        drbs=st.lists(
            st.builds(DrbDemand, count=st.integers(1, 100), qos=qos_profiles),
            min_size=1, max_size=3,
        ).map(tuple),
    ),
    wire.Action.AC_RESP: st.builds(
        wire.AcResp, rnti=st.integers(0, 2**16 - 1), accepted=st.booleans()
    ),
    wire.Action.SLICE_MEAS: st.builds(
        wire.SliceMeas, rsi_id=st.integers(0, 2**32 - 1),
        dl_prb_assigned=st.integers(0, 2**64 - 1),
        dl_prb_used=st.integers(0, 2**64 - 1),
        ul_prb_assigned=st.integers(0, 2**64 - 1),
        ul_prb_used=st.integers(0, 2**64 - 1),
        interval_ms=st.integers(0, 2**32 - 1),
    ),
}

opcodes = st.one_of(
    st.sampled_from([wire.OP_SUCCESS, wire.OP_CREATE, wire.OP_RETRIEVE,
                     wire.OP_UPDATE, wire.OP_DELETE]),
    st.integers(1, 127).map(wire.error_opcode),
)


@st.composite
def messages(draw):
    action = draw(st.sampled_from(list(wire.Action)))
    event_type = draw(st.sampled_from(list(wire.EventType)))
    period = draw(st.integers(1, 2**32 - 1)) if event_type is wire.EventType.SCHEDULED else 0
    return wire.Message(
        element_id=draw(st.integers(0, 2**64 - 1)),
        cell_id=draw(st.integers(0, 2**16 - 1)),
        xid=draw(st.integers(0, 2**32 - 1)),
        seq=draw(st.integers(0, 2**32 - 1)),
        action=action,
        body=draw(_BODIES[action]),
        event_type=event_type,
        opcode=draw(opcodes),
        period_ms=period,
    )


@settings(max_examples=300, deadline=None)
@given(messages())
def test_round_trip(msg):
    data = wire.encode(msg)
    decoded = wire.decode(data)
    assert decoded == msg
    assert len(data) == struct.unpack(">I", data[2:6])[0]


@settings(max_examples=60, deadline=None)
@given(st.lists(messages(), min_size=1, max_size=5))
def test_framing_concatenation(msgs):
    blob = b"".join(wire.encode(m) for m in msgs)
    assert wire.split_frames(blob) == msgs


@settings(max_examples=60, deadline=None)
@given(st.lists(messages(), min_size=1, max_size=4), st.integers(1, 7))
def test_frame_reader_incremental(msgs, chunk):
    blob = b"".join(wire.encode(m) for m in msgs)
    reader = wire.FrameReader()
    got = []
    for i in range(0, len(blob), chunk):
        got.extend(reader.feed(blob[i:i + chunk]))
    assert got == msgs
    assert reader.pending_bytes == 0


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=200))
def test_decoder_never_crashes_on_garbage(data):
    try:
        wire.decode(data)
    except wire.WireError:
        pass


@settings(max_examples=200, deadline=None)
@given(messages(), st.integers(0, 10_000), st.integers(0, 255))
def test_decoder_never_crashes_on_mutation(msg, pos, value):
    data = bytearray(wire.encode(msg))
    data[pos % len(data)] = value
    try:
        wire.decode(bytes(data))
    except wire.WireError:
        pass


@settings(max_examples=100, deadline=None)
@given(messages(), st.integers(1, 30))
def test_truncation_raises_truncated(msg, cut):
    data = wire.encode(msg)
    if cut >= len(data):
        cut = len(data) - 1
    if cut == 0:
        return
    with pytest.raises((wire.TruncatedError, wire.WireError)):
        wire.decode(data[:-cut])


def test_truncated_mid_body_is_truncated_error():
    msg = wire.Message(element_id=1, cell_id=0, xid=1, seq=1,
                       action=wire.Action.AC_RESP, body=wire.AcResp(0x47, True))
    data = wire.encode(msg)
    with pytest.raises(wire.TruncatedError):
        wire.decode(data[:-1])


def test_bad_version():
    msg = wire.Message(element_id=1, cell_id=0, xid=1, seq=1,
                       action=wire.Action.HELLO_REQ, body=wire.HelloReq())
    data = bytearray(wire.encode(msg))
    data[0] = 2
    with pytest.raises(wire.BadVersionError):
        wire.decode(bytes(data))


def test_unknown_action():
    msg = wire.Message(element_id=1, cell_id=0, xid=1, seq=1,
                       action=wire.Action.HELLO_REQ, body=wire.HelloReq())
    data = bytearray(wire.encode(msg))
    struct.pack_into(">H", data, 24, 999)
    with pytest.raises(wire.UnknownActionError):
        wire.decode(bytes(data))


def test_body_action_mismatch_on_encode():
    msg = wire.Message(element_id=1, cell_id=0, xid=1, seq=1,
                       action=wire.Action.HELLO_REQ, body=wire.AcResp(1, True))
    with pytest.raises(wire.WellFormednessError):
        wire.encode(msg)


def test_scheduled_needs_period():
    msg = wire.Message(element_id=1, cell_id=0, xid=1, seq=1,
                       action=wire.Action.HELLO_REQ, body=wire.HelloReq(),
                       event_type=wire.EventType.SCHEDULED, period_ms=0)
    with pytest.raises(wire.WellFormednessError):
        wire.encode(msg)


def test_trailing_bytes_rejected_by_single_decode():
    msg = wire.Message(element_id=1, cell_id=0, xid=1, seq=1,
                       action=wire.Action.HELLO_REQ, body=wire.HelloReq())
    with pytest.raises(wire.WellFormednessError):
        wire.decode(wire.encode(msg) + b"\x00")


# ----------------------------------------------------------------------
# Session rules.

def _req(xid, seq=1, action=wire.Action.CAPS_REQ, body=None):
    return wire.Message(element_id=1, cell_id=0, xid=xid, seq=seq,
                        action=action, body=body or wire.CapsReq(),
                        opcode=wire.OP_RETRIEVE)


def _resp(xid, seq=1, action=wire.Action.CAPS_RESP, body=None):
    return wire.Message(element_id=1, cell_id=0, xid=xid, seq=seq,
                        action=action, body=body or wire.CapsResp(1, True, ()))


def test_session_seq_starts_at_one():
    s = wire.Session()
    assert [s.next_seq() for _ in range(3)] == [1, 2, 3]


def test_session_seq_independent_per_connection():
    a, b = wire.Session(), wire.Session()
    assert [a.next_seq(), a.next_seq()] == [1, 2]
    assert [b.next_seq(), b.next_seq(), b.next_seq()] == [1, 2, 3]
    assert a.next_seq() == 3


def test_session_seq_wraps():
    s = wire.Session(start_seq=2**32 - 2)
    assert s.next_seq() == 2**32 - 1
    assert s.next_seq() == 0
    assert s.next_seq() == 1


def test_pair_response_matches_and_removes():
    s = wire.Session()
    req = s.track(_req(xid=7))
    assert s.pair_response(_resp(xid=7)) is req
    assert s.pending == {}
    with pytest.raises(wire.UnknownXidError):
        s.pair_response(_resp(xid=7))


def test_pair_response_unknown_xid():
    s = wire.Session()
    with pytest.raises(wire.UnknownXidError):
        s.pair_response(_resp(xid=12))


def test_pair_response_leaves_other_pending():
    s = wire.Session()
    first = s.track(_req(xid=1))
    second = s.track(_req(xid=2))
    assert s.pair_response(_resp(xid=2)) is second
    assert s.pending == {1: first}


def test_pair_response_rejects_non_response_action():
    s = wire.Session()
    s.track(_req(xid=1))
    with pytest.raises(wire.WellFormednessError):
        s.pair_response(_req(xid=1))


def test_format_message_renders_fields():
    msg = wire.Message(element_id=0x1, cell_id=0, xid=9, seq=5,
                       action=wire.Action.AC_RESP, body=wire.AcResp(0x47, True))
    text = wire.format_frame(wire.encode(msg))
    assert "AC_RESP" in text
    assert "xid=9" in text
    assert "rnti: 71" in text


def test_error_opcode_scheme():
    op = wire.error_opcode(wire.ERR_DUPLICATE_SLICE)
    assert wire.is_error(op)
    assert wire.error_code(op) == wire.ERR_DUPLICATE_SLICE
    assert not wire.is_error(wire.OP_SUCCESS)
    with pytest.raises(wire.WellFormednessError):
        wire.error_opcode(0)


# ----------------------------------------------------------------------
# Bulk randomized round-trips (seeded, cheap bodies) shared with the
# acceptance suite.

def random_message(rng: Random, action: wire.Action) -> wire.Message:
    qos = QosProfile(rng.randint(1, 255), rng.randint(1, 15))
    policy = RrmPolicy(
        L3Descriptor(
            (CapacityRule(Metric.DRB_COUNT, WILDCARD_MATCH,
                          rng.choice(list(Scope)), rng.choice(list(Bound)),
                          rng.randint(0, 100)),),
            rng.randint(1, 100000),
        ),
        L2Descriptor(InterSliceAlgo.WRR, rng.uniform(1, 100), IntraSliceAlgo.PF),
        bytes(rng.getrandbits(8) for _ in range(rng.randint(0, 8))),
    )
    tpl = RsiTemplate(
        rsi_id=rng.getrandbits(32),
        plmn_list=(f"{rng.randint(10000, 99999)}",),
        cell_list=((rng.getrandbits(16), rng.getrandbits(8)),),
        rrm_policy=policy,
        nas_id_list=(NasId("imsi", str(rng.getrandbits(40))),),
    )
    bodies = {
        wire.Action.HELLO_REQ: wire.HelloReq(),
        wire.Action.HELLO_RESP: wire.HelloResp(),
        wire.Action.CAPS_REQ: wire.CapsReq(),
        wire.Action.CAPS_RESP: wire.CapsResp(
            rng.getrandbits(64), rng.random() < 0.5,
            (wire.CellCaps(rng.getrandbits(16), rng.getrandbits(32),
                           rng.getrandbits(32), rng.getrandbits(16)),),
        ),
        wire.Action.UE_REPORT_REQ: wire.UeReportReq(),
        wire.Action.UE_REPORT_RESP: wire.UeReportResp((
            wire.UeRecord(rng.getrandbits(16), "21491",
                          NasId("tmsi", str(rng.getrandbits(32))),
                          rng.getrandbits(16),
                          (wire.DrbInfo(1, qos.qci, qos.arp),)),
        )),
        wire.Action.ADD_SLICE_REQ: wire.AddSliceReq(tpl.rsi_id, tpl),
        wire.Action.ADD_SLICE_RESP: wire.AddSliceResp(rng.getrandbits(32)),
        wire.Action.REMOVE_SLICE_REQ: wire.RemoveSliceReq(rng.getrandbits(32)),
        wire.Action.REMOVE_SLICE_RESP: wire.RemoveSliceResp(rng.getrandbits(32)),
        wire.Action.RAN_SLICE_REQ: wire.RanSliceReq(
            rng.getrandbits(32), policy, rng.random() < 0.5
        ),
        wire.Action.RAN_SLICE_RESP: wire.RanSliceResp(
            (wire.SliceStatus(rng.getrandbits(32), policy,
                              rng.random() < 0.5, rng.getrandbits(16)),),
        ),
        wire.Action.AC_REQ: wire.AcReq(
            rng.getrandbits(16), (DrbDemand(rng.randint(1, 5), qos),)
        ),
        wire.Action.AC_RESP: wire.AcResp(rng.getrandbits(16), rng.random() < 0.5),
        wire.Action.SLICE_MEAS: wire.SliceMeas(
            rng.getrandbits(32), rng.getrandbits(48), rng.getrandbits(48),
            rng.getrandbits(48), rng.getrandbits(48), rng.getrandbits(24),
        ),
    }
    event_type = rng.choice(list(wire.EventType))
    return wire.Message(
        element_id=rng.getrandbits(64),
        cell_id=rng.getrandbits(16),
        xid=rng.getrandbits(32),
        seq=rng.getrandbits(32),
        action=action,
        body=bodies[action],
        event_type=event_type,
        opcode=rng.choice([0, 1, 2, 3, 4, wire.error_opcode(rng.randint(1, 127))]),
        period_ms=rng.randint(1, 2**32 - 1)
        if event_type is wire.EventType.SCHEDULED else 0,
    )


def test_bulk_random_round_trips_small():
    rng = Random(1234)
    for action in wire.Action:
        for _ in range(200):
            msg = random_message(rng, action)
            assert wire.decode(wire.encode(msg)) == msg
