"""The SD-RAN controller: device manager, RAN map, slice lifecycle,
centralized admission control, KPI store, and journal persistence.

The controller core is transport-agnostic: connections hand it decoded
frames through `on_frame` and it answers through per-connection send
callbacks. Time comes from an injected clock and delayed work goes
through an injected `defer(delay_ms, fn)`, so the same object runs under
the simulation loop or behind real sockets.

All slice-mutating work for one slice happens on the single dispatch
thread/loop that owns the controller (a coarse lock in serve mode), so
admission decisions touching the same slice are strictly serialized.
"""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Set, Tuple

from . import wire
from .enb import EventLog
from .policy import (
    DrbDemand,
    NominalDemand,
    QosProfile,
    RrmPolicy,
    RsiTemplate,
    SliceCounters,
    SliceDecision,
    ZERO_DEMAND,
    check_bounds_consistent,
    check_share_headroom,
    evaluate_slice,
    rrm_policy_from_document,
    rrm_policy_to_document,
    template_from_document,
    template_to_document,
    validate_template,
)


class ControllerError(Exception):
    pass


class UnknownSliceError(ControllerError):
    pass


class UnknownEnbError(ControllerError):
    pass


class InvalidStateError(ControllerError):
    pass


class EnbState(Enum):
    REGISTERED = "registered"
    CONNECTED = "connected"
    SYNCED = "synced"


class SliceState(Enum):
    DEFINED = "defined"
    COMMISSIONED = "commissioned"
    ACTIVE = "active"
    DEACTIVATED = "deactivated"
    DECOMMISSIONED = "decommissioned"


LEGAL_TRANSITIONS = {
    SliceState.DEFINED: {SliceState.COMMISSIONED},
    SliceState.COMMISSIONED: {SliceState.ACTIVE, SliceState.DEFINED},
    SliceState.ACTIVE: {SliceState.DEACTIVATED},
    SliceState.DEACTIVATED: {SliceState.ACTIVE, SliceState.DECOMMISSIONED},
    SliceState.DECOMMISSIONED: set(),
}


@dataclass
class EnbConnState:
    enb_id: int
    state: EnbState = EnbState.REGISTERED
    last_seen: int = 0
    hello_period_ms: int = 2000
    caps: Optional[wire.CapsResp] = None
    links: Set[int] = field(default_factory=set)


@dataclass
class UeInventoryEntry:
    enb_id: int
    cell_id: int
    rnti: int
    nas_id: str
    plmn_id: str
    rsi_id: Optional[int]
    drbs: Tuple[Tuple[int, int], ...]  # (qci, arp)


@dataclass
class SliceRecord:
    template: RsiTemplate
    state: SliceState = SliceState.DEFINED
    cell_status: Dict[Tuple[int, int], str] = field(default_factory=dict)
    acked: Set[int] = field(default_factory=set)
    confirmed: Set[int] = field(default_factory=set)
    measurements: List[dict] = field(default_factory=list)
    transitions: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def rsi_id(self) -> int:
        return self.template.rsi_id

    def hosting_enbs(self) -> List[int]:
        return sorted({e for e, _ in self.template.cell_list})


@dataclass
class Job:
    job_id: str
    kind: str
    rsi_id: int
    state: str = "pending"  # pending | done | failed
    error: Optional[str] = None


@dataclass
class ControllerConfig:
    handshake_timeout_ms: int = 5000
    commit_timeout_ms: int = 5000
    liveness_multiplier: int = 3
    liveness_check_ms: int = 500
    default_hello_period_ms: int = 2000
    ac_estimates: NominalDemand = ZERO_DEMAND


class Journal:
    """Append-only JSONL persistence; a restarted controller replays it."""

    def __init__(self, path: str):
        self.path = path
        self._fh = open(path, "a", encoding="utf-8")

    def append(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    @staticmethod
    def replay(path: str) -> Iterable[dict]:
        if not os.path.exists(path):
            return
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    yield json.loads(line)


class _Conn:
    def __init__(self, conn_id: int, send: Callable[[bytes], None], close: Callable[[], None]):
        self.conn_id = conn_id
        self.send_bytes = send
        self.close = close
        self.session = wire.Session()
        self.enb_id: Optional[int] = None
        self.synced_caps = False
        self.synced_report = False


class Controller:
    def __init__(
        self,
        config: Optional[ControllerConfig] = None,
        clock: Callable[[], int] = lambda: 0,
        defer: Optional[Callable[[int, Callable[[], None]], object]] = None,
        delays: Optional[Callable[[str], int]] = None,
        log: Optional[EventLog] = None,
        journal_path: Optional[str] = None,
    ):
        self.config = config or ControllerConfig()
        self.clock = clock
        self._has_defer = defer is not None
        self._defer = defer or (lambda delay, fn: fn())
        self._delays = delays or (lambda name: 0)
        self.log = log or EventLog()
        self.enbs: Dict[int, EnbConnState] = {}
        self.slices: Dict[int, SliceRecord] = {}
        self.inventory: Dict[Tuple[int, int, int], UeInventoryEntry] = {}
        self.jobs: Dict[str, Job] = {}
        self._provisional: Dict[int, List[Tuple[int, int, Tuple[DrbDemand, ...]]]] = {}
        self._conns: Dict[int, _Conn] = {}
        self._conn_by_enb: Dict[int, _Conn] = {}
        self._conn_ids = itertools.count(1)
        self._job_ids = itertools.count(1)
        self._pending_updates: Dict[str, Tuple[SliceRecord, RrmPolicy, Set[int]]] = {}
        self._update_xids: Dict[Tuple[int, int], str] = {}
        self._pending_removals: Dict[str, Set[int]] = {}
        self.journal: Optional[Journal] = None
        if journal_path:
            self._replay(journal_path)
            self.journal = Journal(journal_path)
        if self._has_defer:
            self._defer(self.config.liveness_check_ms, self._liveness_loop)

    def _defer_timeout(self, delay: int, fn: Callable[[], None]) -> None:
        """Timeouts only run under a real scheduler; without one they are
        driven manually (tests call the checks directly)."""
        if self._has_defer:
            self._defer(delay, fn)

    # -- persistence --------------------------------------------------------

    def _journal(self, record: dict) -> None:
        if self.journal is not None:
            self.journal.append(record)

    def _replay(self, path: str) -> None:
        for rec in Journal.replay(path):
            kind = rec.get("rec")
            if kind == "enb_registered":
                self.enbs[rec["enb_id"]] = EnbConnState(rec["enb_id"])
            elif kind == "slice_defined":
                tpl = template_from_document(rec["doc"])
                self.slices[tpl.rsi_id] = SliceRecord(tpl)
            elif kind == "slice_state":
                record = self.slices.get(rec["rsi_id"])
                if record is not None:
                    record.state = SliceState(rec["state"])
            elif kind == "slice_policy":
                record = self.slices.get(rec["rsi_id"])
                if record is not None:
                    policy = rrm_policy_from_document(rec["doc"])
                    record.template = RsiTemplate(
                        record.template.rsi_id,
                        record.template.plmn_list,
                        record.template.cell_list,
                        policy,
                        record.template.snssai_list,
                        record.template.nas_id_list,
                    )
            elif kind == "slice_deleted":
                self.slices.pop(rec["rsi_id"], None)
            elif kind == "measurement":
                record = self.slices.get(rec["rsi_id"])
                if record is not None:
                    record.measurements.append(rec["m"])

    # -- device management ----------------------------------------------------

    def register_enb(self, enb_id: int) -> bool:
        """Whitelist an eNB id; connections from unregistered ids are refused."""
        if enb_id in self.enbs:
            self.log.emit(self.clock(), "ctrl", "enb_already_registered", enb=enb_id)
            return False
        self.enbs[enb_id] = EnbConnState(enb_id)
        self.log.emit(self.clock(), "ctrl", "enb_registered", enb=enb_id)
        self._journal({"rec": "enb_registered", "enb_id": enb_id})
        return True

    def connection_opened(self, send: Callable[[bytes], None], close: Callable[[], None]) -> int:
        conn = _Conn(next(self._conn_ids), send, close)
        self._conns[conn.conn_id] = conn
        return conn.conn_id

    def connection_closed(self, conn_id: int) -> None:
        conn = self._conns.pop(conn_id, None)
        if conn is None or conn.enb_id is None:
            return
        if self._conn_by_enb.get(conn.enb_id) is conn:
            del self._conn_by_enb[conn.enb_id]
            st = self.enbs.get(conn.enb_id)
            if st is not None and st.state is not EnbState.REGISTERED:
                self._mark_disconnected(conn.enb_id)

    def _mark_disconnected(self, enb_id: int) -> None:
        st = self.enbs[enb_id]
        st.state = EnbState.REGISTERED
        self.log.emit(self.clock(), "ctrl", "enb_disconnected", enb=enb_id)
        for record in self.slices.values():
            if record.state is SliceState.DECOMMISSIONED:
                continue
            for cell in record.template.cell_list:
                if cell[0] == enb_id and record.cell_status.get(cell) == "active":
                    record.cell_status[cell] = "degraded"

    def topology_event(self, enb_id: int, peer_id: int, up: bool) -> None:
        """Store an inter-eNB adjacency change; drives no control logic."""
        st = self.enbs.get(enb_id)
        if st is None:
            raise UnknownEnbError(f"eNB {enb_id} is not registered")
        if up:
            st.links.add(peer_id)
        else:
            st.links.discard(peer_id)
        peer = self.enbs.get(peer_id)
        if peer is not None:
            (peer.links.add if up else peer.links.discard)(enb_id)
        self.log.emit(self.clock(), "ctrl", "topology_event",
                      enb=enb_id, peer=peer_id, up=up)

    def liveness_tick(self, now: int) -> List[int]:
        """Expire eNBs silent for more than 3 hello periods."""
        expired = []
        for enb_id, conn in list(self._conn_by_enb.items()):
            st = self.enbs[enb_id]
            if st.state is EnbState.REGISTERED:
                continue
            deadline = st.hello_period_ms * self.config.liveness_multiplier
            if now - st.last_seen > deadline:
                expired.append(enb_id)
                conn.close()
                self._conns.pop(conn.conn_id, None)
                del self._conn_by_enb[enb_id]
                self._mark_disconnected(enb_id)
        return expired

    def _liveness_loop(self) -> None:
        self.liveness_tick(self.clock())
        self._defer(self.config.liveness_check_ms, self._liveness_loop)

    # -- frame dispatch ---------------------------------------------------------

    def on_frame(self, conn_id: int, data: bytes) -> None:
        self.on_message(conn_id, wire.decode(data))

    def on_message(self, conn_id: int, msg: wire.Message) -> None:
        conn = self._conns.get(conn_id)
        if conn is None:
            return
        if conn.enb_id is None:
            self._first_frame(conn, msg)
            return
        st = self.enbs.get(conn.enb_id)
        if st is not None:
            st.last_seen = self.clock()
        action = msg.action
        if action is wire.Action.HELLO_REQ:
            self._on_hello(conn, msg, st)
        elif msg.event_type is wire.EventType.SINGLE and action in wire.RESPONSE_ACTIONS:
            self._on_response(conn, msg)
        elif action is wire.Action.UE_REPORT_RESP:
            self.ingest_ue_report(conn.enb_id, msg.body)
        elif action is wire.Action.RAN_SLICE_RESP:
            self._ingest_slice_view(conn.enb_id, msg.body)
        elif action is wire.Action.SLICE_MEAS:
            self.ingest_measurement(conn.enb_id, msg.cell_id, msg.body)
        elif action is wire.Action.AC_REQ:
            self._on_ac_request(conn, msg)
        else:
            self.log.emit(self.clock(), "ctrl", "unexpected_frame",
                          enb=conn.enb_id, action=action.name)

    def _first_frame(self, conn: _Conn, msg: wire.Message) -> None:
        enb_id = msg.element_id
        if msg.action is not wire.Action.HELLO_REQ or enb_id not in self.enbs:
            self.log.emit(self.clock(), "ctrl", "connection_refused", enb=enb_id)
            self._conns.pop(conn.conn_id, None)
            conn.close()
            return
        conn.enb_id = enb_id
        old = self._conn_by_enb.get(enb_id)
        if old is not None and old is not conn:
            self._conns.pop(old.conn_id, None)
            old.close()
        self._conn_by_enb[enb_id] = conn
        st = self.enbs[enb_id]
        st.last_seen = self.clock()
        self._on_hello(conn, msg, st)

    def _send(self, conn: _Conn, track: bool = False, **kwargs) -> wire.Message:
        msg = wire.Message(
            element_id=conn.enb_id or 0,
            seq=conn.session.next_seq(),
            **kwargs,
        )
        if track:
            conn.session.track(msg)
        conn.send_bytes(wire.encode(msg))
        return msg

    def _on_hello(self, conn: _Conn, msg: wire.Message, st: EnbConnState) -> None:
        if msg.period_ms:
            st.hello_period_ms = msg.period_ms
        st.last_seen = self.clock()
        first_sync = st.state is EnbState.REGISTERED

        def _reply() -> None:
            if self._conns.get(conn.conn_id) is not conn:
                return
            self._send(
                conn, cell_id=0, xid=msg.xid,
                action=wire.Action.HELLO_RESP, body=wire.HelloResp(),
            )
            if first_sync:
                st.state = EnbState.CONNECTED
                conn.synced_caps = False
                conn.synced_report = False
                self.log.emit(self.clock(), "ctrl", "handshake_started", enb=st.enb_id)
                self._send(
                    conn, track=True, cell_id=0, xid=conn.session.next_xid(),
                    action=wire.Action.CAPS_REQ, body=wire.CapsReq(),
                    opcode=wire.OP_RETRIEVE,
                )
                self._send(
                    conn, track=True, cell_id=0, xid=conn.session.next_xid(),
                    action=wire.Action.UE_REPORT_REQ, body=wire.UeReportReq(),
                    opcode=wire.OP_RETRIEVE,
                )
                self._defer_timeout(
                    self.config.handshake_timeout_ms,
                    lambda: self._handshake_check(conn),
                )

        self._defer(self._delays("ctrl_proc"), _reply)

    def _handshake_check(self, conn: _Conn) -> None:
        if self._conns.get(conn.conn_id) is not conn or conn.enb_id is None:
            return
        st = self.enbs.get(conn.enb_id)
        if st is None or st.state is EnbState.SYNCED:
            return
        self.log.emit(self.clock(), "ctrl", "handshake_timeout", enb=conn.enb_id)
        self._conns.pop(conn.conn_id, None)
        self._conn_by_enb.pop(conn.enb_id, None)
        st.state = EnbState.REGISTERED
        conn.close()

    def _on_response(self, conn: _Conn, msg: wire.Message) -> None:
        try:
            request = conn.session.pair_response(msg)
        except wire.UnknownXidError:
            self.log.emit(self.clock(), "ctrl", "unpaired_response",
                          enb=conn.enb_id, action=msg.action.name, xid=msg.xid)
            return
        st = self.enbs[conn.enb_id]
        action = msg.action
        if action is wire.Action.CAPS_RESP:
            st.caps = msg.body
            conn.synced_caps = True
            self._maybe_synced(conn, st)
        elif action is wire.Action.UE_REPORT_RESP:
            self.ingest_ue_report(conn.enb_id, msg.body)
            conn.synced_report = True
            self._maybe_synced(conn, st)
        elif action is wire.Action.ADD_SLICE_RESP:
            self._on_add_slice_resp(conn.enb_id, msg)
        elif action is wire.Action.REMOVE_SLICE_RESP:
            self._on_remove_slice_resp(conn.enb_id, msg)
        elif action is wire.Action.RAN_SLICE_RESP:
            self._on_ran_slice_resp(conn.enb_id, request, msg)

    def _maybe_synced(self, conn: _Conn, st: EnbConnState) -> None:
        if st.state is EnbState.SYNCED or not (conn.synced_caps and conn.synced_report):
            return
        st.state = EnbState.SYNCED
        self.log.emit(
            self.clock(), "ctrl", "enb_synced", enb=st.enb_id,
            cells=[c.cell_id for c in (st.caps.cells if st.caps else ())],
            slicing=bool(st.caps and st.caps.slicing_supported),
        )
        for record in self.slices.values():
            for cell in record.template.cell_list:
                if cell[0] == st.enb_id and record.cell_status.get(cell) == "degraded":
                    record.cell_status[cell] = "active"

    # -- RAN map / inventory -----------------------------------------------------

    def ran_cells(self) -> Dict[Tuple[int, int], bool]:
        cells: Dict[Tuple[int, int], bool] = {}
        for st in self.enbs.values():
            if st.state is EnbState.SYNCED and st.caps is not None:
                for cap in st.caps.cells:
                    cells[(st.enb_id, cap.cell_id)] = st.caps.slicing_supported
        return cells

    def _resolve_rsi(self, nas_id: str) -> Optional[int]:
        for rsi in sorted(self.slices):
            record = self.slices[rsi]
            if record.state is SliceState.DECOMMISSIONED:
                continue
            if any(str(n) == nas_id for n in record.template.nas_id_list):
                return rsi
        return None

    def ingest_ue_report(self, enb_id: int, report: wire.UeReportResp) -> None:
        """Reports are authoritative: rebuild this eNB's inventory slice."""
        for key in [k for k in self.inventory if k[0] == enb_id]:
            del self.inventory[key]
        seen: Dict[int, wire.UeRecord] = {}
        for ue in report.ues:
            seen[ue.rnti] = ue
            self.inventory[(enb_id, ue.cell_id, ue.rnti)] = UeInventoryEntry(
                enb_id=enb_id,
                cell_id=ue.cell_id,
                rnti=ue.rnti,
                nas_id=str(ue.nas_id),
                plmn_id=ue.plmn_id,
                rsi_id=self._resolve_rsi(str(ue.nas_id)),
                drbs=tuple((d.qci, d.arp) for d in ue.drbs),
            )
        for rsi, pending in self._provisional.items():
            kept = []
            for enb, rnti, drbs in pending:
                if enb == enb_id:
                    rec = seen.get(rnti)
                    if rec is None or rec.drbs:
                        continue  # released, or confirmed by the report
                kept.append((enb, rnti, drbs))
            self._provisional[rsi] = kept

    def ingest_measurement(self, enb_id: int, cell_id: int, meas: wire.SliceMeas) -> None:
        record = self.slices.get(meas.rsi_id)
        if record is None or record.state is SliceState.DECOMMISSIONED:
            self.log.emit(self.clock(), "ctrl", "measurement_dropped",
                          enb=enb_id, rsi=meas.rsi_id)
            return
        entry = {
            "t": self.clock(),
            "enb_id": enb_id,
            "cell_id": cell_id,
            "dl_prb_assigned": meas.dl_prb_assigned,
            "dl_prb_used": meas.dl_prb_used,
            "ul_prb_assigned": meas.ul_prb_assigned,
            "ul_prb_used": meas.ul_prb_used,
            "interval_ms": meas.interval_ms,
        }
        record.measurements.append(entry)
        self._journal({"rec": "measurement", "rsi_id": meas.rsi_id, "m": entry})

    def _ingest_slice_view(self, enb_id: int, view: wire.RanSliceResp) -> None:
        listed = {s.rsi_id for s in view.slices if s.active}
        for rsi in sorted(self.slices):
            record = self.slices[rsi]
            if record.state in (SliceState.DEFINED, SliceState.COMMISSIONED):
                if rsi in listed and enb_id in record.hosting_enbs():
                    record.confirmed.add(enb_id)
                    for cell in record.template.cell_list:
                        if cell[0] == enb_id:
                            record.cell_status[cell] = "active"
                    self._maybe_activate(record)

    # -- slice lifecycle ----------------------------------------------------------

    def _transition(self, record: SliceRecord, new: SliceState) -> None:
        if new not in LEGAL_TRANSITIONS[record.state]:
            raise InvalidStateError(
                f"slice {record.rsi_id}: illegal transition "
                f"{record.state.value} -> {new.value}"
            )
        record.transitions.append((record.state.value, new.value))
        record.state = new
        self.log.emit(self.clock(), "ctrl", "slice_state",
                      rsi=record.rsi_id, state=new.value)
        self._journal({"rec": "slice_state", "rsi_id": record.rsi_id, "state": new.value})

    def _new_job(self, kind: str, rsi_id: int) -> Job:
        job = Job(f"job-{next(self._job_ids)}", kind, rsi_id)
        self.jobs[job.job_id] = job
        return job

    def _conn_of(self, enb_id: int) -> _Conn:
        conn = self._conn_by_enb.get(enb_id)
        if conn is None:
            raise UnknownEnbError(f"eNB {enb_id} is not connected")
        return conn

    def commission_slice(self, doc) -> Tuple[str, int]:
        """Validate and roll out a slice; returns (job id, rsi id).

        The rollout is asynchronous and atomic across eNBs: every hosting
        eNB must acknowledge and then report the slice active, otherwise
        the whole commissioning rolls back.
        """
        tpl = doc if isinstance(doc, RsiTemplate) else template_from_document(doc)
        existing = [
            r.template for r in self.slices.values()
            if r.state is not SliceState.DECOMMISSIONED
        ]
        validate_template(tpl, self.ran_cells(), existing)
        for enb_id in sorted({e for e, _ in tpl.cell_list}):
            st = self.enbs.get(enb_id)
            if st is None or st.state is not EnbState.SYNCED:
                raise UnknownEnbError(f"eNB {enb_id} is not synced")
            self._conn_of(enb_id)
        record = SliceRecord(tpl)
        record.cell_status = {cell: "pending" for cell in tpl.cell_list}
        self.slices[tpl.rsi_id] = record
        self._journal({"rec": "slice_defined", "doc": template_to_document(tpl)})
        job = self._new_job("commission", tpl.rsi_id)
        self.log.emit(self.clock(), "ctrl", "commission_started",
                      rsi=tpl.rsi_id, job=job.job_id)
        for enb_id in record.hosting_enbs():
            conn = self._conn_of(enb_id)
            self._send(
                conn, track=True, cell_id=0, xid=conn.session.next_xid(),
                action=wire.Action.ADD_SLICE_REQ,
                body=wire.AddSliceReq(tpl.rsi_id, tpl),
                opcode=wire.OP_CREATE,
            )
        self._defer_timeout(
            self.config.commit_timeout_ms,
            lambda: self._commission_check(record, job),
        )
        return job.job_id, tpl.rsi_id

    def _on_add_slice_resp(self, enb_id: int, msg: wire.Message) -> None:
        record = self.slices.get(msg.body.rsi_id)
        if record is None:
            return
        job = self._job_for(record.rsi_id, "commission")
        if wire.is_error(msg.opcode):
            self.log.emit(self.clock(), "ctrl", "add_slice_failed",
                          rsi=record.rsi_id, enb=enb_id,
                          code=wire.opcode_name(msg.opcode))
            self._rollback(record, job, f"eNB {enb_id}: {wire.opcode_name(msg.opcode)}")
            return
        record.acked.add(enb_id)
        if record.state is SliceState.DEFINED and record.acked >= set(record.hosting_enbs()):
            self._transition(record, SliceState.COMMISSIONED)
            self._maybe_activate(record)

    def _maybe_activate(self, record: SliceRecord) -> None:
        if record.state is not SliceState.COMMISSIONED:
            return
        if record.confirmed >= set(record.hosting_enbs()):
            self._transition(record, SliceState.ACTIVE)
            job = self._job_for(record.rsi_id, "commission")
            if job is not None and job.state == "pending":
                job.state = "done"

    def _job_for(self, rsi_id: int, kind: str) -> Optional[Job]:
        candidates = [
            j for j in self.jobs.values()
            if j.rsi_id == rsi_id and j.kind == kind and j.state == "pending"
        ]
        return candidates[-1] if candidates else None

    def _commission_check(self, record: SliceRecord, job: Job) -> None:
        if job.state != "pending":
            return
        self._rollback(record, job, "commissioning timed out")

    def _rollback(self, record: SliceRecord, job: Optional[Job], reason: str) -> None:
        if record.state is SliceState.COMMISSIONED:
            self._transition(record, SliceState.DEFINED)
        self.log.emit(self.clock(), "ctrl", "commission_rollback",
                      rsi=record.rsi_id, reason=reason)
        for enb_id in sorted(record.acked):
            conn = self._conn_by_enb.get(enb_id)
            if conn is not None:
                self._send(
                    conn, track=True, cell_id=0, xid=conn.session.next_xid(),
                    action=wire.Action.REMOVE_SLICE_REQ,
                    body=wire.RemoveSliceReq(record.rsi_id),
                    opcode=wire.OP_DELETE,
                )
        record.acked.clear()
        record.confirmed.clear()
        record.cell_status = {c: "pending" for c in record.template.cell_list}
        if job is not None:
            job.state = "failed"
            job.error = reason

    def _require_slice(self, rsi_id: int) -> SliceRecord:
        record = self.slices.get(rsi_id)
        if record is None or record.state is SliceState.DECOMMISSIONED:
            raise UnknownSliceError(f"slice {rsi_id} does not exist")
        return record

    def update_slice(self, rsi_id: int, policy_doc) -> str:
        """Push new descriptors to every hosting eNB (applied at the next
        TTI boundary there); stored descriptors replace on confirmation."""
        record = self._require_slice(rsi_id)
        if record.state not in (SliceState.ACTIVE, SliceState.DEACTIVATED):
            raise InvalidStateError(f"slice {rsi_id} is {record.state.value}")
        policy = (
            policy_doc
            if isinstance(policy_doc, RrmPolicy)
            else rrm_policy_from_document(policy_doc)
        )
        check_bounds_consistent(policy.l3)
        others = [
            r.template for r in self.slices.values()
            if r.rsi_id != rsi_id and r.state is not SliceState.DECOMMISSIONED
        ]
        check_share_headroom(record.template.cell_list, policy.l2, others)
        job = self._new_job("update", rsi_id)
        active = record.state is SliceState.ACTIVE
        for enb_id in record.hosting_enbs():
            conn = self._conn_of(enb_id)
            msg = self._send(
                conn, track=True, cell_id=0, xid=conn.session.next_xid(),
                action=wire.Action.RAN_SLICE_REQ,
                body=wire.RanSliceReq(rsi_id, policy, active),
                opcode=wire.OP_UPDATE,
            )
            self._update_xids[(enb_id, msg.xid)] = job.job_id
        self._pending_updates[job.job_id] = (record, policy, set(record.hosting_enbs()))
        return job.job_id

    def _on_ran_slice_resp(self, enb_id: int, request: wire.Message, msg: wire.Message) -> None:
        self._ingest_slice_view(enb_id, msg.body)
        job_id = self._update_xids.pop((enb_id, request.xid), None)
        if job_id is None or job_id not in self._pending_updates:
            return
        record, policy, waiting = self._pending_updates[job_id]
        waiting.discard(enb_id)
        if not waiting:
            record.template = RsiTemplate(
                record.template.rsi_id,
                record.template.plmn_list,
                record.template.cell_list,
                policy,
                record.template.snssai_list,
                record.template.nas_id_list,
            )
            self._journal({
                "rec": "slice_policy", "rsi_id": record.rsi_id,
                "doc": rrm_policy_to_document(policy),
            })
            self.jobs[job_id].state = "done"
            del self._pending_updates[job_id]
            self.log.emit(self.clock(), "ctrl", "slice_updated",
                          rsi=record.rsi_id, job=job_id)

    def deactivate_slice(self, rsi_id: int) -> None:
        record = self._require_slice(rsi_id)
        if record.state is not SliceState.ACTIVE:
            raise InvalidStateError(f"slice {rsi_id} is {record.state.value}")
        self._transition(record, SliceState.DEACTIVATED)
        self._push_active_flag(record, active=False)

    def activate_slice(self, rsi_id: int) -> None:
        record = self._require_slice(rsi_id)
        if record.state is not SliceState.DEACTIVATED:
            raise InvalidStateError(f"slice {rsi_id} is {record.state.value}")
        self._transition(record, SliceState.ACTIVE)
        self._push_active_flag(record, active=True)

    def _push_active_flag(self, record: SliceRecord, active: bool) -> None:
        for enb_id in record.hosting_enbs():
            conn = self._conn_by_enb.get(enb_id)
            if conn is not None:
                self._send(
                    conn, track=True, cell_id=0, xid=conn.session.next_xid(),
                    action=wire.Action.RAN_SLICE_REQ,
                    body=wire.RanSliceReq(record.rsi_id, record.template.rrm_policy, active),
                    opcode=wire.OP_UPDATE,
                )

    def decommission_slice(self, rsi_id: int) -> str:
        """Terminal removal; hosting eNBs release resources and detach UEs."""
        record = self._require_slice(rsi_id)
        if record.state is SliceState.DEFINED:
            # nothing was rolled out; drop the record outright
            del self.slices[rsi_id]
            self._journal({"rec": "slice_deleted", "rsi_id": rsi_id})
            job = self._new_job("decommission", rsi_id)
            job.state = "done"
            self.log.emit(self.clock(), "ctrl", "slice_deleted", rsi=rsi_id)
            return job.job_id
        if record.state is SliceState.COMMISSIONED:
            raise InvalidStateError("commissioning in progress")
        if record.state is SliceState.ACTIVE:
            self._transition(record, SliceState.DEACTIVATED)
        self._transition(record, SliceState.DECOMMISSIONED)
        self._provisional.pop(rsi_id, None)
        job = self._new_job("decommission", rsi_id)
        waiting = set()
        for enb_id in record.hosting_enbs():
            conn = self._conn_by_enb.get(enb_id)
            if conn is not None:
                waiting.add(enb_id)
                self._send(
                    conn, track=True, cell_id=0, xid=conn.session.next_xid(),
                    action=wire.Action.REMOVE_SLICE_REQ,
                    body=wire.RemoveSliceReq(rsi_id),
                    opcode=wire.OP_DELETE,
                )
        if waiting:
            self._pending_removals[job.job_id] = waiting
        else:
            job.state = "done"
        return job.job_id

    def _on_remove_slice_resp(self, enb_id: int, msg: wire.Message) -> None:
        pending = self._pending_removals
        for job_id, waiting in list(pending.items()):
            job = self.jobs[job_id]
            if job.rsi_id != msg.body.rsi_id:
                continue
            waiting.discard(enb_id)
            if not waiting:
                job.state = "done"
                del pending[job_id]

    # -- centralized admission control ---------------------------------------------

    def slice_counters(self, rsi_id: int) -> SliceCounters:
        """Slice-wide counters: latest UE reports plus provisional grants."""
        record = self._require_slice(rsi_id)
        drbs: Dict[QosProfile, int] = {}
        ues = 0
        for entry in self.inventory.values():
            if entry.rsi_id != rsi_id:
                continue
            ues += 1
            for qci, arp in entry.drbs:
                q = QosProfile(qci, arp)
                drbs[q] = drbs.get(q, 0) + 1
        for _, _, demands in self._provisional.get(rsi_id, []):
            for d in demands:
                drbs[d.qos] = drbs.get(d.qos, 0) + d.count
        load = 0.0
        latest: Dict[Tuple[int, int], dict] = {}
        for m in record.measurements:
            latest[(m["enb_id"], m["cell_id"])] = m
        if latest:
            used = sum(m["dl_prb_used"] for m in latest.values())
            capacity = 0
            cells = {
                (st.enb_id, cap.cell_id): cap.n_prb
                for st in self.enbs.values() if st.caps
                for cap in st.caps.cells
            }
            for (enb_id, cell_id), m in latest.items():
                capacity += cells.get((enb_id, cell_id), 0) * m["interval_ms"]
            if capacity:
                load = 100.0 * used / capacity
        est = self.config.ac_estimates
        bitrate = sum(
            est.bitrate(qos) * n for qos, n in drbs.items()
        )
        return SliceCounters(drbs, ues, load, bitrate)

    def _on_ac_request(self, conn: _Conn, msg: wire.Message) -> None:
        req: wire.AcReq = msg.body
        enb_id = conn.enb_id
        cell_id = msg.cell_id

        def _decide() -> None:
            accepted = False
            entry = self.inventory.get((enb_id, cell_id, req.rnti))
            rsi = entry.rsi_id if entry is not None else None
            record = self.slices.get(rsi) if rsi is not None else None
            if record is not None and record.state is SliceState.ACTIVE:
                decision = evaluate_slice(
                    record.template.rrm_policy.l3,
                    self.slice_counters(rsi),
                    req.drbs,
                    self.config.ac_estimates,
                    new_ues=0,
                )
                accepted = decision is SliceDecision.ACCEPT
                if accepted:
                    self._provisional.setdefault(rsi, []).append(
                        (enb_id, req.rnti, req.drbs)
                    )
            self.log.emit(self.clock(), "ctrl", "ac_decision",
                          enb=enb_id, rnti=req.rnti, rsi=rsi, accepted=accepted)
            if self._conns.get(conn.conn_id) is conn:
                self._send(
                    conn, cell_id=cell_id, xid=msg.xid,
                    action=wire.Action.AC_RESP,
                    body=wire.AcResp(req.rnti, accepted),
                )

        self._defer(self._delays("ctrl_ac_proc"), _decide)

    # -- views -----------------------------------------------------------------

    def enbs_view(self) -> List[dict]:
        out = []
        for enb_id in sorted(self.enbs):
            st = self.enbs[enb_id]
            out.append({
                "enb_id": enb_id,
                "state": st.state.value,
                "last_seen": st.last_seen,
                "slicing_supported": bool(st.caps and st.caps.slicing_supported),
                "cells": [
                    {"cell_id": c.cell_id, "dl_earfcn": c.dl_earfcn,
                     "ul_earfcn": c.ul_earfcn, "n_prb": c.n_prb}
                    for c in (st.caps.cells if st.caps else ())
                ],
                "links": sorted(st.links),
            })
        return out

    def slice_view(self, rsi_id: int) -> dict:
        record = self.slices.get(rsi_id)
        if record is None:
            raise UnknownSliceError(f"slice {rsi_id} does not exist")
        counters = None
        if record.state is not SliceState.DECOMMISSIONED:
            c = self.slice_counters(rsi_id)
            counters = {
                "drbs": sum(c.drbs.values()),
                "ues": c.connected_ues,
                "radio_load_percent": round(c.radio_load_percent, 4),
            }
        return {
            "rsi_id": rsi_id,
            "state": record.state.value,
            "template": template_to_document(record.template),
            "cell_status": {
                f"{e}/{c}": s for (e, c), s in sorted(record.cell_status.items())
            },
            "counters": counters,
        }

    def slices_view(self) -> List[dict]:
        return [self.slice_view(rsi) for rsi in sorted(self.slices)]

    def ues_view(self) -> List[dict]:
        out = []
        for key in sorted(self.inventory):
            e = self.inventory[key]
            out.append({
                "enb_id": e.enb_id, "cell_id": e.cell_id, "rnti": e.rnti,
                "nas_id": e.nas_id, "plmn_id": e.plmn_id, "rsi_id": e.rsi_id,
                "drbs": [{"qci": q, "arp": a} for q, a in e.drbs],
            })
        return out

    def measurements_view(self, rsi_id: int, since: int = 0) -> List[dict]:
        record = self.slices.get(rsi_id)
        if record is None:
            raise UnknownSliceError(f"slice {rsi_id} does not exist")
        return [m for m in record.measurements if m["t"] >= since]

    def job_view(self, job_id: str) -> dict:
        job = self.jobs.get(job_id)
        if job is None:
            raise ControllerError(f"job {job_id} does not exist")
        return {
            "job_id": job.job_id, "kind": job.kind, "rsi_id": job.rsi_id,
            "state": job.state, "error": job.error,
        }
