"""Binary southbound protocol between the controller and the eNB agents.

Frame layout (big-endian throughout):

    Common header (24 octets)
      version    u8    always 1
      event_type u8    0=single  1=scheduled  2=triggered
      length     u32   octets of the entire message, this header included
      element_id u64   RAN element id (eNB id)
      cell_id    u16   cell the message refers to (0 when not cell-scoped)
      xid        u32   transaction token; a reply carries its request's xid
      seq        u32   per-connection counter, +1 per message, wraps mod 2^32
    Event header (7 octets)
      action     u16   message kind (hello, capabilities, AC request, ...)
      opcode     u8    0=success 1=create 2=retrieve 3=update 4=delete;
                       0x80|code (code 1..127) signals an error
      period_ms  u32   > 0 for scheduled events, 0 otherwise
    Body         per-action fixed-order fields; lists are u16-count prefixed

Strings are u8-length-prefixed UTF-8. The codec is pure and stateless;
per-connection state (sequence counter, in-flight transactions) lives in
`Session`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from enum import IntEnum
from typing import Tuple

from .policy import (
    CapacityRule,
    Bound,
    DrbDemand,
    InterSliceAlgo,
    IntraSliceAlgo,
    L2Descriptor,
    L3Descriptor,
    Metric,
    NasId,
    PolicyError,
    QosMatch,
    QosProfile,
    RrmPolicy,
    RsiTemplate,
    Scope,
    Snssai,
)

PROTOCOL_VERSION = 1
COMMON_HEADER = struct.Struct(">BBIQHII")
EVENT_HEADER = struct.Struct(">HBI")
HEADER_SIZE = COMMON_HEADER.size + EVENT_HEADER.size  # 31


class WireError(Exception):
    """Base for every codec and session error."""


class WellFormednessError(WireError):
    pass


class TruncatedError(WireError):
    pass


class BadVersionError(WireError):
    pass


class UnknownActionError(WireError):
    pass


class BodyMismatchError(WireError):
    pass


class UnknownXidError(WireError):
    pass


class EventType(IntEnum):
    SINGLE = 0
    SCHEDULED = 1
    TRIGGERED = 2


class Action(IntEnum):
    HELLO_REQ = 1
    HELLO_RESP = 2
    CAPS_REQ = 3
    CAPS_RESP = 4
    UE_REPORT_REQ = 5
    UE_REPORT_RESP = 6
    ADD_SLICE_REQ = 7
    ADD_SLICE_RESP = 8
    REMOVE_SLICE_REQ = 9
    REMOVE_SLICE_RESP = 10
    RAN_SLICE_REQ = 11
    RAN_SLICE_RESP = 12
    AC_REQ = 13
    AC_RESP = 14
    SLICE_MEAS = 15


RESPONSE_FOR = {
    Action.HELLO_REQ: Action.HELLO_RESP,
    Action.CAPS_REQ: Action.CAPS_RESP,
    Action.UE_REPORT_REQ: Action.UE_REPORT_RESP,
    Action.ADD_SLICE_REQ: Action.ADD_SLICE_RESP,
    Action.REMOVE_SLICE_REQ: Action.REMOVE_SLICE_RESP,
    Action.RAN_SLICE_REQ: Action.RAN_SLICE_RESP,
    Action.AC_REQ: Action.AC_RESP,
}
RESPONSE_ACTIONS = frozenset(RESPONSE_FOR.values())

# Opcodes
OP_SUCCESS = 0
OP_CREATE = 1
OP_RETRIEVE = 2
OP_UPDATE = 3
OP_DELETE = 4
_OP_ERROR_FLAG = 0x80

# Error subcodes carried in error opcodes
ERR_MALFORMED = 1
ERR_DUPLICATE_SLICE = 2
ERR_SHARE_OVERFLOW = 3
ERR_UNKNOWN_SLICE = 4
ERR_UNSUPPORTED = 5
ERR_REJECTED = 6

_ERR_NAMES = {
    ERR_MALFORMED: "malformed",
    ERR_DUPLICATE_SLICE: "duplicate-slice",
    ERR_SHARE_OVERFLOW: "share-overflow",
    ERR_UNKNOWN_SLICE: "unknown-slice",
    ERR_UNSUPPORTED: "unsupported",
    ERR_REJECTED: "rejected",
}


def error_opcode(code: int) -> int:
    if not 1 <= code <= 0x7F:
        raise WellFormednessError(f"error subcode {code} out of range 1..127")
    return _OP_ERROR_FLAG | code


def is_error(opcode: int) -> bool:
    return bool(opcode & _OP_ERROR_FLAG)


def error_code(opcode: int) -> int:
    return opcode & 0x7F if is_error(opcode) else 0


def _valid_opcode(opcode: int) -> bool:
    if opcode & _OP_ERROR_FLAG:
        return (opcode & 0x7F) != 0
    return opcode in (OP_SUCCESS, OP_CREATE, OP_RETRIEVE, OP_UPDATE, OP_DELETE)


def opcode_name(opcode: int) -> str:
    if is_error(opcode):
        sub = error_code(opcode)
        return f"error({_ERR_NAMES.get(sub, sub)})"
    return {0: "success", 1: "create", 2: "retrieve", 3: "update", 4: "delete"}[opcode]


# ----------------------------------------------------------------------
# Body types

@dataclass(frozen=True)
class HelloReq:
    pass


@dataclass(frozen=True)
class HelloResp:
    pass


@dataclass(frozen=True)
class CapsReq:
    pass


@dataclass(frozen=True)
class CellCaps:
    cell_id: int
    dl_earfcn: int
    ul_earfcn: int
    n_prb: int


@dataclass(frozen=True)
class CapsResp:
    enb_id: int
    slicing_supported: bool
    cells: Tuple[CellCaps, ...] = ()


@dataclass(frozen=True)
class UeReportReq:
    pass


@dataclass(frozen=True)
class DrbInfo:
    drb_id: int
    qci: int
    arp: int


@dataclass(frozen=True)
class UeRecord:
    cell_id: int
    plmn_id: str
    nas_id: NasId
    rnti: int
    drbs: Tuple[DrbInfo, ...] = ()


@dataclass(frozen=True)
class UeReportResp:
    ues: Tuple[UeRecord, ...] = ()


@dataclass(frozen=True)
class AddSliceReq:
    rsi_id: int
    template: RsiTemplate


@dataclass(frozen=True)
class AddSliceResp:
    rsi_id: int


@dataclass(frozen=True)
class RemoveSliceReq:
    rsi_id: int


@dataclass(frozen=True)
class RemoveSliceResp:
    rsi_id: int


@dataclass(frozen=True)
class RanSliceReq:
    rsi_id: int
    policy: RrmPolicy
    active: bool = True


@dataclass(frozen=True)
class SliceStatus:
    rsi_id: int
    policy: RrmPolicy
    active: bool
    ue_count: int


@dataclass(frozen=True)
class RanSliceResp:
    slices: Tuple[SliceStatus, ...] = ()


@dataclass(frozen=True)
class AcReq:
    rnti: int
    drbs: Tuple[DrbDemand, ...]


@dataclass(frozen=True)
class AcResp:
    rnti: int
    accepted: bool


@dataclass(frozen=True)
class SliceMeas:
    rsi_id: int
    dl_prb_assigned: int
    dl_prb_used: int
    ul_prb_assigned: int
    ul_prb_used: int
    interval_ms: int


BODY_TYPE = {
    Action.HELLO_REQ: HelloReq,
    Action.HELLO_RESP: HelloResp,
    Action.CAPS_REQ: CapsReq,
    Action.CAPS_RESP: CapsResp,
    Action.UE_REPORT_REQ: UeReportReq,
    Action.UE_REPORT_RESP: UeReportResp,
    Action.ADD_SLICE_REQ: AddSliceReq,
    Action.ADD_SLICE_RESP: AddSliceResp,
    Action.REMOVE_SLICE_REQ: RemoveSliceReq,
    Action.REMOVE_SLICE_RESP: RemoveSliceResp,
    Action.RAN_SLICE_REQ: RanSliceReq,
    Action.RAN_SLICE_RESP: RanSliceResp,
    Action.AC_REQ: AcReq,
    Action.AC_RESP: AcResp,
    Action.SLICE_MEAS: SliceMeas,
}
ACTION_FOR_BODY = {cls: action for action, cls in BODY_TYPE.items()}


@dataclass(frozen=True)
class Message:
    """A full frame: common header + event header + typed body."""

    element_id: int
    cell_id: int
    xid: int
    seq: int
    action: Action
    body: object
    event_type: EventType = EventType.SINGLE
    opcode: int = OP_SUCCESS
    period_ms: int = 0


# ----------------------------------------------------------------------
# Encoding

def _check_range(name: str, value: int, bits: int) -> int:
    value = int(value)
    if not 0 <= value < (1 << bits):
        raise WellFormednessError(f"{name} {value} out of {bits}-bit range")
    return value


class _Writer:
    def __init__(self) -> None:
        self.parts: list[bytes] = []

    def u8(self, v: int, name: str = "u8") -> None:
        self.parts.append(struct.pack(">B", _check_range(name, v, 8)))

    def u16(self, v: int, name: str = "u16") -> None:
        self.parts.append(struct.pack(">H", _check_range(name, v, 16)))

    def u32(self, v: int, name: str = "u32") -> None:
        self.parts.append(struct.pack(">I", _check_range(name, v, 32)))

    def u64(self, v: int, name: str = "u64") -> None:
        self.parts.append(struct.pack(">Q", _check_range(name, v, 64)))

    def f64(self, v: float) -> None:
        self.parts.append(struct.pack(">d", float(v)))

    def raw(self, data: bytes, name: str = "blob") -> None:
        if len(data) > 0xFFFF:
            raise WellFormednessError(f"{name} too long ({len(data)} octets)")
        self.u16(len(data), f"{name} length")
        self.parts.append(bytes(data))

    def string(self, s: str, name: str = "string") -> None:
        data = s.encode("utf-8")
        if len(data) > 0xFF:
            raise WellFormednessError(f"{name} too long")
        self.u8(len(data), f"{name} length")
        self.parts.append(data)

    def count(self, items, name: str) -> None:
        self.u16(len(items), f"{name} count")

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    """Bounded cursor over one frame's body; overruns are body mismatches."""

    def __init__(self, data: bytes, start: int, end: int):
        self.data = data
        self.pos = start
        self.end = end

    def _take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise BodyMismatchError("body overruns the frame length")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack(">d", self._take(8))[0]

    def raw(self) -> bytes:
        return self._take(self.u16())

    def string(self) -> str:
        data = self._take(self.u8())
        try:
            return data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise BodyMismatchError("invalid UTF-8 in string field") from exc

    def done(self) -> None:
        if self.pos != self.end:
            raise BodyMismatchError(
                f"{self.end - self.pos} trailing octets after the body"
            )


def _write_nas_id(w: _Writer, nas: NasId) -> None:
    w.u8(0 if nas.kind == "imsi" else 1, "nas kind")
    w.string(nas.value, "nas id")


def _read_nas_id(r: _Reader) -> NasId:
    kind = r.u8()
    if kind not in (0, 1):
        raise BodyMismatchError(f"unknown NAS id kind {kind}")
    value = r.string()
    try:
        return NasId("imsi" if kind == 0 else "tmsi", value)
    except PolicyError as exc:
        raise BodyMismatchError(str(exc)) from exc


_METRIC_CODE = {
    Metric.RADIO_LOAD_PERCENT: 0,
    Metric.AGGREGATED_BITRATE_BPS: 1,
    Metric.DRB_COUNT: 2,
    Metric.UE_COUNT: 3,
}
_METRIC_FROM = {v: k for k, v in _METRIC_CODE.items()}
_INTER_CODE = {InterSliceAlgo.RR: 0, InterSliceAlgo.WRR: 1}
_INTER_FROM = {v: k for k, v in _INTER_CODE.items()}
_INTRA_CODE = {IntraSliceAlgo.RR: 0, IntraSliceAlgo.PF: 1, IntraSliceAlgo.MAX_CI: 2}
_INTRA_FROM = {v: k for k, v in _INTRA_CODE.items()}


def _write_rule(w: _Writer, rule: CapacityRule) -> None:
    w.u8(_METRIC_CODE[rule.metric], "metric")
    w.u8(0 if rule.scope is Scope.CELL else 1, "scope")
    w.u8(0 if rule.bound is Bound.MIN else 1, "bound")
    w.f64(rule.value)
    pairs = sorted(
        rule.match.pairs,
        key=lambda p: (p[0] is None, p[0] or 0, p[1] is None, p[1] or 0),
    )
    w.count(pairs, "match pairs")
    for qci, arp in pairs:
        w.u16(0 if qci is None else qci, "match qci")
        w.u8(0 if arp is None else arp, "match arp")


def _read_rule(r: _Reader) -> CapacityRule:
    metric_code, scope_code, bound_code = r.u8(), r.u8(), r.u8()
    value = r.f64()
    n = r.u16()
    pairs = []
    for _ in range(n):
        qci = r.u16()
        arp = r.u8()
        pairs.append((None if qci == 0 else qci, None if arp == 0 else arp))
    if metric_code not in _METRIC_FROM or scope_code > 1 or bound_code > 1:
        raise BodyMismatchError("unknown rule metric/scope/bound code")
    try:
        return CapacityRule(
            _METRIC_FROM[metric_code],
            QosMatch(frozenset(pairs)),
            Scope.CELL if scope_code == 0 else Scope.SLICE,
            Bound.MIN if bound_code == 0 else Bound.MAX,
            value,
        )
    except PolicyError as exc:
        raise BodyMismatchError(str(exc)) from exc


def _write_policy(w: _Writer, policy: RrmPolicy) -> None:
    w.u32(policy.l3.averaging_window_ms, "averaging window")
    w.count(policy.l3.rules, "rules")
    for rule in policy.l3.rules:
        _write_rule(w, rule)
    w.u8(_INTER_CODE[policy.l2.inter_slice], "inter-slice algo")
    if policy.l2.inter_slice is InterSliceAlgo.WRR:
        w.f64(policy.l2.share_percent)
    w.u8(_INTRA_CODE[policy.l2.intra_slice], "intra-slice algo")
    w.raw(policy.l1_opaque, "l1 blob")


def _read_policy(r: _Reader) -> RrmPolicy:
    window = r.u32()
    rules = tuple(_read_rule(r) for _ in range(r.u16()))
    inter_code = r.u8()
    if inter_code not in _INTER_FROM:
        raise BodyMismatchError(f"unknown inter-slice algo {inter_code}")
    share = r.f64() if inter_code == _INTER_CODE[InterSliceAlgo.WRR] else None
    intra_code = r.u8()
    if intra_code not in _INTRA_FROM:
        raise BodyMismatchError(f"unknown intra-slice algo {intra_code}")
    l1 = r.raw()
    try:
        return RrmPolicy(
            L3Descriptor(rules, window),
            L2Descriptor(_INTER_FROM[inter_code], share, _INTRA_FROM[intra_code]),
            l1,
        )
    except PolicyError as exc:
        raise BodyMismatchError(str(exc)) from exc


def _write_template(w: _Writer, tpl: RsiTemplate) -> None:
    w.u32(tpl.rsi_id, "rsi_id")
    w.count(tpl.plmn_list, "plmns")
    for plmn in tpl.plmn_list:
        w.string(plmn, "plmn")
    w.count(tpl.snssai_list, "snssais")
    for s in tpl.snssai_list:
        w.string(s.plmn, "snssai plmn")
        w.u8(s.sst, "sst")
        w.u8(0 if s.sd is None else 1, "sd flag")
        w.u32(s.sd or 0, "sd")
    w.count(tpl.cell_list, "cells")
    for enb_id, cell_id in tpl.cell_list:
        w.u64(enb_id, "enb_id")
        w.u16(cell_id, "cell_id")
    _write_policy(w, tpl.rrm_policy)
    w.count(tpl.nas_id_list, "nas ids")
    for nas in tpl.nas_id_list:
        _write_nas_id(w, nas)


def _read_template(r: _Reader) -> RsiTemplate:
    rsi_id = r.u32()
    plmns = tuple(r.string() for _ in range(r.u16()))
    snssais = []
    for _ in range(r.u16()):
        plmn = r.string()
        sst = r.u8()
        has_sd = r.u8()
        sd = r.u32()
        snssais.append(Snssai(plmn, sst, sd if has_sd else None))
    cells = tuple((r.u64(), r.u16()) for _ in range(r.u16()))
    policy = _read_policy(r)
    nas_ids = tuple(_read_nas_id(r) for _ in range(r.u16()))
    try:
        return RsiTemplate(rsi_id, plmns, cells, policy, tuple(snssais), nas_ids)
    except PolicyError as exc:
        raise BodyMismatchError(str(exc)) from exc


def _encode_body(action: Action, body) -> bytes:
    w = _Writer()
    if action in (
        Action.HELLO_REQ,
        Action.HELLO_RESP,
        Action.CAPS_REQ,
        Action.UE_REPORT_REQ,
    ):
        pass
    elif action is Action.CAPS_RESP:
        w.u64(body.enb_id, "enb_id")
        w.u8(1 if body.slicing_supported else 0)
        w.count(body.cells, "cells")
        for c in body.cells:
            w.u16(c.cell_id, "cell_id")
            w.u32(c.dl_earfcn, "dl_earfcn")
            w.u32(c.ul_earfcn, "ul_earfcn")
            w.u16(c.n_prb, "n_prb")
    elif action is Action.UE_REPORT_RESP:
        w.count(body.ues, "ues")
        for ue in body.ues:
            w.u16(ue.cell_id, "cell_id")
            w.string(ue.plmn_id, "plmn")
            _write_nas_id(w, ue.nas_id)
            w.u16(ue.rnti, "rnti")
            w.count(ue.drbs, "drbs")
            for drb in ue.drbs:
                w.u8(drb.drb_id, "drb_id")
                if not 1 <= drb.qci <= 255 or not 1 <= drb.arp <= 15:
                    raise WellFormednessError("drb qci/arp out of range")
                w.u8(drb.qci, "qci")
                w.u8(drb.arp, "arp")
    elif action is Action.ADD_SLICE_REQ:
        if body.rsi_id != body.template.rsi_id:
            raise WellFormednessError("rsi_id differs from the template's")
        w.u32(body.rsi_id, "rsi_id")
        _write_template(w, body.template)
    elif action in (
        Action.ADD_SLICE_RESP,
        Action.REMOVE_SLICE_REQ,
        Action.REMOVE_SLICE_RESP,
    ):
        w.u32(body.rsi_id, "rsi_id")
    elif action is Action.RAN_SLICE_REQ:
        w.u32(body.rsi_id, "rsi_id")
        w.u8(1 if body.active else 0)
        _write_policy(w, body.policy)
    elif action is Action.RAN_SLICE_RESP:
        w.count(body.slices, "slices")
        for s in body.slices:
            w.u32(s.rsi_id, "rsi_id")
            w.u8(1 if s.active else 0)
            w.u32(s.ue_count, "ue_count")
            _write_policy(w, s.policy)
    elif action is Action.AC_REQ:
        w.u16(body.rnti, "rnti")
        if not body.drbs:
            raise WellFormednessError("AC request must list at least one DRB")
        w.count(body.drbs, "drbs")
        for d in body.drbs:
            if d.count < 1:
                raise WellFormednessError("DRB count must be >= 1")
            w.u16(d.count, "count")
            w.u8(d.qos.qci, "qci")
            w.u8(d.qos.arp, "arp")
    elif action is Action.AC_RESP:
        w.u16(body.rnti, "rnti")
        w.u8(1 if body.accepted else 0)
    elif action is Action.SLICE_MEAS:
        w.u32(body.rsi_id, "rsi_id")
        for name in ("dl_prb_assigned", "dl_prb_used", "ul_prb_assigned", "ul_prb_used"):
            value = getattr(body, name)
            if value < 0:
                raise WellFormednessError(f"{name} must be nonnegative")
            w.u64(value, name)
        w.u32(body.interval_ms, "interval_ms")
    else:  # pragma: no cover - table is exhaustive
        raise WellFormednessError(f"no encoder for action {action}")
    return w.getvalue()


def _decode_body(action: Action, r: _Reader):
    if action is Action.HELLO_REQ:
        return HelloReq()
    if action is Action.HELLO_RESP:
        return HelloResp()
    if action is Action.CAPS_REQ:
        return CapsReq()
    if action is Action.CAPS_RESP:
        enb_id = r.u64()
        slicing = r.u8() != 0
        cells = tuple(
            CellCaps(r.u16(), r.u32(), r.u32(), r.u16()) for _ in range(r.u16())
        )
        return CapsResp(enb_id, slicing, cells)
    if action is Action.UE_REPORT_REQ:
        return UeReportReq()
    if action is Action.UE_REPORT_RESP:
        ues = []
        for _ in range(r.u16()):
            cell_id = r.u16()
            plmn = r.string()
            nas = _read_nas_id(r)
            rnti = r.u16()
            drbs = []
            for _ in range(r.u16()):
                drb_id, qci, arp = r.u8(), r.u8(), r.u8()
                if not 1 <= qci <= 255 or not 1 <= arp <= 15:
                    raise BodyMismatchError("drb qci/arp out of range")
                drbs.append(DrbInfo(drb_id, qci, arp))
            ues.append(UeRecord(cell_id, plmn, nas, rnti, tuple(drbs)))
        return UeReportResp(tuple(ues))
    if action is Action.ADD_SLICE_REQ:
        rsi_id = r.u32()
        template = _read_template(r)
        if rsi_id != template.rsi_id:
            raise BodyMismatchError("rsi_id differs from the template's")
        return AddSliceReq(rsi_id, template)
    if action is Action.ADD_SLICE_RESP:
        return AddSliceResp(r.u32())
    if action is Action.REMOVE_SLICE_REQ:
        return RemoveSliceReq(r.u32())
    if action is Action.REMOVE_SLICE_RESP:
        return RemoveSliceResp(r.u32())
    if action is Action.RAN_SLICE_REQ:
        rsi_id = r.u32()
        active = r.u8() != 0
        return RanSliceReq(rsi_id, _read_policy(r), active)
    if action is Action.RAN_SLICE_RESP:
        slices = []
        for _ in range(r.u16()):
            rsi_id = r.u32()
            active = r.u8() != 0
            ue_count = r.u32()
            slices.append(SliceStatus(rsi_id, _read_policy(r), active, ue_count))
        return RanSliceResp(tuple(slices))
    if action is Action.AC_REQ:
        rnti = r.u16()
        n = r.u16()
        if n == 0:
            raise BodyMismatchError("AC request lists no DRBs")
        drbs = []
        for _ in range(n):
            count = r.u16()
            qci, arp = r.u8(), r.u8()
            try:
                drbs.append(DrbDemand(count, QosProfile(qci, arp)))
            except PolicyError as exc:
                raise BodyMismatchError(str(exc)) from exc
        return AcReq(rnti, tuple(drbs))
    if action is Action.AC_RESP:
        return AcResp(r.u16(), r.u8() != 0)
    if action is Action.SLICE_MEAS:
        return SliceMeas(r.u32(), r.u64(), r.u64(), r.u64(), r.u64(), r.u32())
    raise UnknownActionError(f"no decoder for action {action}")  # pragma: no cover


def encode(msg: Message) -> bytes:
    """Encode a well-formed message into one framed byte sequence."""
    action = Action(msg.action)
    expected = BODY_TYPE[action]
    if type(msg.body) is not expected:
        raise WellFormednessError(
            f"body {type(msg.body).__name__} does not match action {action.name}"
        )
    if msg.event_type not in (EventType.SINGLE, EventType.SCHEDULED, EventType.TRIGGERED):
        raise WellFormednessError(f"unknown event type {msg.event_type}")
    if not _valid_opcode(msg.opcode):
        raise WellFormednessError(f"invalid opcode {msg.opcode:#x}")
    if msg.event_type is EventType.SCHEDULED:
        if msg.period_ms <= 0:
            raise WellFormednessError("scheduled events need period_ms > 0")
    elif msg.period_ms != 0:
        raise WellFormednessError("period_ms is only valid for scheduled events")

    body = _encode_body(action, msg.body)
    length = HEADER_SIZE + len(body)
    common = COMMON_HEADER.pack(
        PROTOCOL_VERSION,
        int(msg.event_type),
        _check_range("length", length, 32),
        _check_range("element_id", msg.element_id, 64),
        _check_range("cell_id", msg.cell_id, 16),
        _check_range("xid", msg.xid, 32),
        _check_range("seq", msg.seq, 32),
    )
    event = EVENT_HEADER.pack(int(action), msg.opcode, _check_range("period", msg.period_ms, 32))
    return common + event + body


def decode_prefix(data: bytes, offset: int = 0) -> Tuple[Message, int]:
    """Decode one frame starting at `offset`; returns (message, end offset)."""
    if len(data) - offset < COMMON_HEADER.size:
        raise TruncatedError("frame shorter than the common header")
    version, event_type, length, element_id, cell_id, xid, seq = COMMON_HEADER.unpack_from(
        data, offset
    )
    if version != PROTOCOL_VERSION:
        raise BadVersionError(f"unsupported protocol version {version}")
    if length < HEADER_SIZE:
        raise BodyMismatchError(f"length field {length} below header size")
    if len(data) - offset < length:
        raise TruncatedError(
            f"frame claims {length} octets, {len(data) - offset} available"
        )
    if event_type > 2:
        raise WellFormednessError(f"unknown event type {event_type}")
    action_code, opcode, period_ms = EVENT_HEADER.unpack_from(
        data, offset + COMMON_HEADER.size
    )
    try:
        action = Action(action_code)
    except ValueError:
        raise UnknownActionError(f"unknown action {action_code}") from None
    if not _valid_opcode(opcode):
        raise WellFormednessError(f"invalid opcode {opcode:#x}")
    etype = EventType(event_type)
    if etype is EventType.SCHEDULED and period_ms == 0:
        raise WellFormednessError("scheduled event with zero period")
    if etype is not EventType.SCHEDULED and period_ms != 0:
        raise WellFormednessError("period on a non-scheduled event")

    reader = _Reader(data, offset + HEADER_SIZE, offset + length)
    body = _decode_body(action, reader)
    reader.done()
    return (
        Message(
            element_id=element_id,
            cell_id=cell_id,
            xid=xid,
            seq=seq,
            action=action,
            body=body,
            event_type=etype,
            opcode=opcode,
            period_ms=period_ms,
        ),
        offset + length,
    )


def decode(data: bytes) -> Message:
    """Decode exactly one frame; trailing octets are an error."""
    msg, end = decode_prefix(data, 0)
    if end != len(data):
        raise WellFormednessError(f"{len(data) - end} octets after the frame")
    return msg


def split_frames(data: bytes) -> list:
    """Decode a back-to-back concatenation of frames with no residue."""
    out = []
    offset = 0
    while offset < len(data):
        msg, offset = decode_prefix(data, offset)
        out.append(msg)
    return out


class FrameReader:
    """Incremental splitter for a byte stream (one per connection)."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list:
        self._buf.extend(data)
        out = []
        while True:
            try:
                msg, end = decode_prefix(bytes(self._buf), 0)
            except TruncatedError:
                break
            out.append(msg)
            del self._buf[:end]
        return out

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


class Session:
    """Per-connection sequence counter and in-flight transaction table."""

    SEQ_MOD = 1 << 32

    def __init__(self, start_seq: int = 0, start_xid: int = 0):
        self._seq = start_seq % self.SEQ_MOD
        self._xid = start_xid % self.SEQ_MOD
        self.pending: dict[int, Message] = {}

    def next_seq(self) -> int:
        self._seq = (self._seq + 1) % self.SEQ_MOD
        return self._seq

    def next_xid(self) -> int:
        self._xid = (self._xid + 1) % self.SEQ_MOD
        return self._xid

    def track(self, request: Message) -> Message:
        """Record an outgoing request awaiting a response."""
        self.pending[request.xid] = request
        return request

    def pair_response(self, resp: Message) -> Message:
        """Match a response to its pending request by xid and retire it."""
        if resp.action not in RESPONSE_ACTIONS:
            raise WellFormednessError(f"{resp.action.name} is not a response action")
        try:
            return self.pending.pop(resp.xid)
        except KeyError:
            raise UnknownXidError(f"no pending request with xid {resp.xid}") from None


# ----------------------------------------------------------------------
# Debug formatter ("wire-dump")

def _render_value(value, indent: str) -> str:
    if isinstance(value, NasId):
        return str(value)
    if isinstance(value, bytes):
        return value.hex() or "(empty)"
    if isinstance(value, RsiTemplate):
        return f"template(rsi_id={value.rsi_id}, cells={list(value.cell_list)})"
    if isinstance(value, RrmPolicy):
        rules = ", ".join(
            f"{r.metric.value}[{r.scope.value}][{r.bound.value}]={r.value:g}"
            for r in value.l3.rules
        )
        l2 = value.l2
        inter = l2.inter_slice.value + (
            f"({l2.share_percent:g}%)" if l2.share_percent is not None else ""
        )
        return f"l3[{rules or 'no rules'}] l2[inter={inter}, intra={l2.intra_slice.value}]"
    if isinstance(value, tuple):
        if not value:
            return "[]"
        inner = "".join(
            f"\n{indent}  - {_render_value(v, indent + '  ')}" for v in value
        )
        return inner
    if hasattr(value, "__dataclass_fields__"):
        pairs = ", ".join(
            f"{f.name}={_render_value(getattr(value, f.name), indent)}"
            for f in fields(value)
        )
        return f"{type(value).__name__}({pairs})"
    return repr(value)


def format_message(msg: Message) -> str:
    """Render one frame as indented structured text."""
    lines = [
        f"{msg.action.name} ({msg.event_type.name.lower()}, opcode={opcode_name(msg.opcode)})",
        f"  element_id=0x{msg.element_id:x} cell_id={msg.cell_id} xid={msg.xid} seq={msg.seq}",
    ]
    if msg.period_ms:
        lines.append(f"  period_ms={msg.period_ms}")
    body_fields = fields(msg.body)
    for f in body_fields:
        lines.append(f"  {f.name}: {_render_value(getattr(msg.body, f.name), '  ')}")
    return "\n".join(lines)


def format_frame(data: bytes) -> str:
    return format_message(decode(data))
