"""Simulated eNB control plane with the embedded southbound agent.

One `EnbAgent` owns its cells' schedulers, the local slice registry, the
UE inventory, and a single connection to the controller. It runs the
whole attach pipeline: RRC connection setup, EPC attach, context setup
with local admission control (escalating to the controller when slice
scope rules demand it), DRB activation, and the failure/release path.
Every hop and processing step draws its delay from the latency profile,
so per-stage timings are reproducible from (scenario, seed).

The EPC is a stub: a subscriber table plus canned attach/context-setup
exchanges with configurable processing delays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from random import Random
from typing import Callable, Dict, List, Optional, Tuple

from . import mac, wire
from .policy import (
    CellDecision,
    DrbDemand,
    InterSliceAlgo,
    NasId,
    QosProfile,
    RrmPolicy,
    RsiTemplate,
    SliceCounters,
    NominalDemand,
    ZERO_DEMAND,
    evaluate_cell,
)
from .sim import EventLoop, LatencyProfile


class EventLog:
    """Structured per-run event log; one record per signalling message."""

    def __init__(self) -> None:
        self.records: List[dict] = []

    def emit(self, t: int, actor: str, event: str, **details) -> None:
        rec = {"t": t, "actor": actor, "event": event}
        for key in sorted(details):
            rec[key] = details[key]
        self.records.append(rec)


@dataclass(frozen=True)
class CellConfig:
    cell_id: int
    n_prb: int = 50
    dl_earfcn: int = 2850
    ul_earfcn: int = 20850
    tti_ms: int = 1

    def __post_init__(self) -> None:
        if self.n_prb <= 0:
            raise ValueError("n_prb must be positive")


@dataclass
class EnbConfig:
    slicing_supported: bool = True
    hello_period_ms: int = 2000
    meas_interval_ms: int = 1000
    ac_guard_ms: int = 1000
    retry_base_ms: int = 1000
    retry_cap_ms: int = 30000
    rnti_base: int = 0x46
    default_rsi: Optional[int] = None
    work_conserving: bool = True
    cqi_table: Tuple[int, ...] = mac.DEFAULT_CQI_TABLE
    accounting_base: object = "per-tti-capacity"
    ac_estimates: NominalDemand = ZERO_DEMAND


class Stage(IntEnum):
    RRC_SETUP = 0
    RRC_CONNECTED = 1
    CONTEXT_REQUESTED = 2
    AC_PENDING = 3
    DRB_ACTIVE = 4
    RELEASED = 5


class AssociationError(Exception):
    pass


class NoMatchingSliceError(AssociationError):
    pass


class AmbiguousAssociationError(AssociationError):
    pass


@dataclass
class UeProfile:
    """Scenario-side description of one UE handed to its serving eNB."""

    nas_id: NasId
    cell_id: int
    plmn_id: str
    drbs: Tuple[QosProfile, ...] = (QosProfile(7, 9),)
    cqi: object = 10  # int, or an object with value_at(tti) -> int
    traffic: object = None  # None, or an object with step() -> bytes/TTI
    ul_traffic: object = None

    def cqi_at(self, tti: int) -> int:
        if isinstance(self.cqi, int):
            return self.cqi
        return self.cqi.value_at(tti)


@dataclass
class AttachContext:
    rnti: int
    ue: UeProfile
    t_start: int
    stage: Stage = Stage.RRC_SETUP
    rsi_id: Optional[int] = None
    decision_path: str = "none"
    ac_xid: Optional[int] = None
    guard: object = None
    t_ac_sent: Optional[int] = None
    ac_rtt_ms: Optional[int] = None
    rrc_setup_ms: Optional[int] = None
    registration_ms: Optional[int] = None
    accepted: Optional[bool] = None
    reject_reason: Optional[str] = None
    stages: List[dict] = field(default_factory=list)

    def enter(self, stage: Stage, now: int) -> None:
        if stage < self.stage:
            raise AssertionError(f"pipeline went backwards: {self.stage} -> {stage}")
        self.stage = stage
        self.stages.append({"stage": stage.name.lower(), "t": now})


@dataclass
class SliceRegistryEntry:
    template: RsiTemplate
    policy: RrmPolicy
    active: bool = True

    def cells_of(self, enb_id: int) -> List[int]:
        return [c for e, c in self.template.cell_list if e == enb_id]


class EpcStub:
    """Subscriber database plus canned attach/context-setup exchanges."""

    def __init__(
        self,
        loop: EventLoop,
        profile: LatencyProfile,
        rng: Random,
        log: EventLog,
        subscribers: Optional[Dict[str, Tuple[QosProfile, ...]]] = None,
    ):
        self.loop = loop
        self.profile = profile
        self.rng = rng
        self.log = log
        self.subscribers = dict(subscribers or {})

    def provision(self, nas_id: NasId, drbs: Tuple[QosProfile, ...]) -> None:
        self.subscribers[str(nas_id)] = tuple(drbs)

    def _d(self, name: str) -> int:
        return self.profile.draw(name, self.rng)

    def initial_ue_message(self, agent: "EnbAgent", rnti: int, nas_id: NasId) -> None:
        drbs = self.subscribers.get(str(nas_id))
        if drbs is None:
            self.log.emit(self.loop.now, "epc", "attach_reject", nas_id=str(nas_id))
            self.loop.schedule(
                self._d("enb_epc"), lambda: agent.on_attach_reject(rnti)
            )
            return

        def _request_context() -> None:
            self.log.emit(
                self.loop.now, "epc", "initial_context_setup_request",
                nas_id=str(nas_id), rnti=rnti,
            )
            self.loop.schedule(
                self._d("enb_epc"),
                lambda: agent.on_initial_context_setup_request(rnti, drbs),
            )

        self.loop.schedule(self._d("epc_attach_proc"), _request_context)

    def context_setup_response(self, agent: "EnbAgent", rnti: int) -> None:
        self.log.emit(self.loop.now, "epc", "context_setup_confirmed", rnti=rnti)

    def context_setup_failure(self, agent: "EnbAgent", rnti: int) -> None:
        def _release() -> None:
            self.log.emit(self.loop.now, "epc", "ue_context_release_command", rnti=rnti)
            self.loop.schedule(
                self._d("enb_epc"), lambda: agent.on_release_command(rnti)
            )

        self.loop.schedule(self._d("epc_release_proc"), _release)

    def release_complete(self, agent: "EnbAgent", rnti: int) -> None:
        self.log.emit(self.loop.now, "epc", "release_complete", rnti=rnti)


class EnbAgent:
    """The eNB control plane + agent, driven by the simulation loop."""

    def __init__(
        self,
        enb_id: int,
        cells: List[CellConfig],
        config: EnbConfig,
        loop: EventLoop,
        profile: LatencyProfile,
        rng: Random,
        epc: EpcStub,
        log: EventLog,
        connect: Callable[["EnbAgent"], None],
    ):
        self.enb_id = enb_id
        self.cells = {c.cell_id: c for c in cells}
        if len(self.cells) != len(cells):
            raise ValueError("duplicate cell ids")
        self.config = config
        self.loop = loop
        self.profile = profile
        self.rng = rng
        self.epc = epc
        self.log = log
        self._connect = connect

        self.schedulers: Dict[int, mac.CellScheduler] = {
            c.cell_id: mac.CellScheduler(
                c.n_prb, config.cqi_table, config.work_conserving
            )
            for c in cells
        }
        self.registry: Dict[int, SliceRegistryEntry] = {}
        self.contexts: Dict[int, AttachContext] = {}
        # one RNTI space per eNB keeps context lookups unambiguous across cells
        self._next_rnti = config.rnti_base

        self.session = wire.Session()
        self._transport = None
        self._hello_handle = None
        self._backoff = config.retry_base_ms
        self.connected = False
        self.outcomes: List[dict] = []
        self._ul_sources: Dict[int, object] = {}
        # optional per-TTI allocation sink: fn(enb_id, cell_id, TtiStep)
        self.tti_sink: Optional[Callable[[int, int, mac.TtiStep], None]] = None

    # -- plumbing ---------------------------------------------------------

    def _d(self, name: str) -> int:
        return self.profile.draw(name, self.rng)

    @property
    def actor(self) -> str:
        return f"enb{self.enb_id}"

    def start(self) -> None:
        for cell_id in sorted(self.cells):
            self._schedule_tti(cell_id)
        self.loop.schedule(self.config.meas_interval_ms, self._meas_tick)
        self._connect(self)

    def _send(self, msg_kwargs: dict, track: bool = False) -> Optional[wire.Message]:
        if self._transport is None:
            return None
        msg = wire.Message(
            element_id=self.enb_id,
            seq=self.session.next_seq(),
            **msg_kwargs,
        )
        if track:
            self.session.track(msg)
        self._transport.send(wire.encode(msg))
        return msg

    # -- connection/handshake ----------------------------------------------

    def transport_connected(self, transport) -> None:
        self._transport = transport
        self.session = wire.Session()
        self._send_hello()

    def transport_closed(self, transport=None) -> None:
        if transport is not None and transport is not self._transport:
            return  # a superseded connection going away
        self._transport = None
        self.connected = False
        if self._hello_handle is not None:
            self._hello_handle.cancel()
            self._hello_handle = None
        self.log.emit(self.loop.now, self.actor, "connection_lost")
        self.loop.schedule(self._backoff, lambda: self._connect(self))
        self._backoff = min(self._backoff * 2, self.config.retry_cap_ms)

    def _send_hello(self) -> None:
        if self._transport is None:
            return
        self._send(
            dict(
                cell_id=0,
                xid=self.session.next_xid(),
                action=wire.Action.HELLO_REQ,
                body=wire.HelloReq(),
                event_type=wire.EventType.SCHEDULED,
                opcode=wire.OP_RETRIEVE,
                period_ms=self.config.hello_period_ms,
            ),
            track=True,
        )
        self.log.emit(self.loop.now, self.actor, "hello_request")
        self._hello_handle = self.loop.schedule(
            self.config.hello_period_ms, self._send_hello
        )

    def handle_frame(self, data: bytes) -> None:
        msg = wire.decode(data)
        action = msg.action
        if action is wire.Action.HELLO_RESP:
            try:
                self.session.pair_response(msg)
            except wire.UnknownXidError:
                return
            self.connected = True
            self._backoff = self.config.retry_base_ms
        elif action is wire.Action.CAPS_REQ:
            self._reply_caps(msg)
        elif action is wire.Action.UE_REPORT_REQ:
            self._send_ue_report(xid=msg.xid, triggered=False)
        elif action is wire.Action.ADD_SLICE_REQ:
            self.handle_add_slice(msg)
        elif action is wire.Action.REMOVE_SLICE_REQ:
            self.handle_remove_slice(msg)
        elif action is wire.Action.RAN_SLICE_REQ:
            self.handle_ran_slice_request(msg)
        elif action is wire.Action.AC_RESP:
            self._on_ac_resp(msg)
        else:
            self.log.emit(
                self.loop.now, self.actor, "unexpected_frame", action=action.name
            )

    def _reply_caps(self, req: wire.Message) -> None:
        body = wire.CapsResp(
            enb_id=self.enb_id,
            slicing_supported=self.config.slicing_supported,
            cells=tuple(
                wire.CellCaps(c.cell_id, c.dl_earfcn, c.ul_earfcn, c.n_prb)
                for c in sorted(self.cells.values(), key=lambda c: c.cell_id)
            ),
        )
        self._send(
            dict(cell_id=0, xid=req.xid, action=wire.Action.CAPS_RESP, body=body)
        )
        self.log.emit(self.loop.now, self.actor, "capabilities_response")

    def _ue_records(self) -> Tuple[wire.UeRecord, ...]:
        records = []
        for rnti in sorted(self.contexts):
            ctx = self.contexts[rnti]
            if ctx.stage >= Stage.RELEASED or ctx.stage < Stage.RRC_CONNECTED:
                continue
            drbs = ()
            if ctx.stage >= Stage.DRB_ACTIVE:
                drbs = tuple(
                    wire.DrbInfo(i + 1, q.qci, q.arp) for i, q in enumerate(ctx.ue.drbs)
                )
            records.append(
                wire.UeRecord(
                    cell_id=ctx.ue.cell_id,
                    plmn_id=ctx.ue.plmn_id,
                    nas_id=ctx.ue.nas_id,
                    rnti=rnti,
                    drbs=drbs,
                )
            )
        return tuple(records)

    def _send_ue_report(self, xid: Optional[int] = None, triggered: bool = True) -> None:
        body = wire.UeReportResp(self._ue_records())
        self._send(
            dict(
                cell_id=0,
                xid=self.session.next_xid() if xid is None else xid,
                action=wire.Action.UE_REPORT_RESP,
                body=body,
                event_type=wire.EventType.TRIGGERED if triggered else wire.EventType.SINGLE,
            )
        )
        self.log.emit(
            self.loop.now, self.actor, "ue_report",
            ues=[
                {"rnti": r.rnti, "rsi": self.contexts[r.rnti].rsi_id,
                 "drbs": len(r.drbs)}
                for r in body.ues
            ],
        )

    # -- slice registry -----------------------------------------------------

    def _share_in_use(self, cell_id: int, skip_rsi: Optional[int] = None) -> float:
        total = 0.0
        for rsi, entry in self.registry.items():
            if rsi == skip_rsi or cell_id not in entry.cells_of(self.enb_id):
                continue
            l2 = entry.policy.l2
            if l2.inter_slice is InterSliceAlgo.WRR:
                total += l2.share_percent or 0.0
        return total

    def _error_reply(self, req: wire.Message, body, code: int) -> None:
        self._send(
            dict(
                cell_id=req.cell_id,
                xid=req.xid,
                action=wire.RESPONSE_FOR[req.action],
                body=body,
                opcode=wire.error_opcode(code),
            )
        )

    def handle_add_slice(self, req: wire.Message) -> None:
        tpl: RsiTemplate = req.body.template
        rsi = req.body.rsi_id
        resp = wire.AddSliceResp(rsi)
        if not self.config.slicing_supported:
            self._error_reply(req, resp, wire.ERR_UNSUPPORTED)
            return
        if rsi in self.registry:
            self.log.emit(self.loop.now, self.actor, "add_slice_rejected",
                          rsi=rsi, reason="duplicate")
            self._error_reply(req, resp, wire.ERR_DUPLICATE_SLICE)
            return
        cells = [c for e, c in tpl.cell_list if e == self.enb_id and c in self.cells]
        if not cells:
            self._error_reply(req, resp, wire.ERR_MALFORMED)
            return
        l2 = tpl.rrm_policy.l2
        if l2.inter_slice is InterSliceAlgo.WRR:
            for cell_id in cells:
                if self._share_in_use(cell_id) + (l2.share_percent or 0.0) > 100.0:
                    self.log.emit(self.loop.now, self.actor, "add_slice_rejected",
                                  rsi=rsi, reason="share_overflow")
                    self._error_reply(req, resp, wire.ERR_SHARE_OVERFLOW)
                    return
        self.registry[rsi] = SliceRegistryEntry(tpl, tpl.rrm_policy)
        for cell_id in cells:
            self.schedulers[cell_id].add_slice(
                rsi, l2, tpl.rrm_policy.l3.averaging_window_ms
            )
        self.log.emit(self.loop.now, self.actor, "slice_registered", rsi=rsi,
                      cells=cells)
        self._send(
            dict(cell_id=0, xid=req.xid, action=wire.Action.ADD_SLICE_RESP, body=resp)
        )
        # the controller needs the complete view of active slices before the
        # record may turn operational
        self._send_ran_slice_view(xid=None)

    def handle_remove_slice(self, req: wire.Message) -> None:
        rsi = req.body.rsi_id
        resp = wire.RemoveSliceResp(rsi)
        if rsi not in self.registry:
            self._error_reply(req, resp, wire.ERR_UNKNOWN_SLICE)
            return
        detached = [
            rnti
            for rnti, ctx in sorted(self.contexts.items())
            if ctx.rsi_id == rsi and ctx.stage < Stage.RELEASED
        ]
        for rnti in detached:
            self._release_ue(rnti, reason="slice_decommissioned", report=False)
        entry = self.registry.pop(rsi)
        for cell_id in entry.cells_of(self.enb_id):
            if cell_id in self.schedulers:
                self.schedulers[cell_id].remove_slice(rsi)
        self.log.emit(self.loop.now, self.actor, "slice_removed", rsi=rsi,
                      detached=detached)
        if detached:
            self._send_ue_report()
        self._send(
            dict(cell_id=0, xid=req.xid, action=wire.Action.REMOVE_SLICE_RESP, body=resp)
        )

    def handle_ran_slice_request(self, req: wire.Message) -> None:
        rsi = req.body.rsi_id
        if rsi not in self.registry:
            self._error_reply(req, wire.RanSliceResp(()), wire.ERR_UNKNOWN_SLICE)
            return
        entry = self.registry[rsi]
        entry.policy = req.body.policy
        entry.active = req.body.active
        for cell_id in entry.cells_of(self.enb_id):
            sched = self.schedulers.get(cell_id)
            if sched is None:
                continue
            sched.set_policy(
                rsi, entry.policy.l2, entry.policy.l3.averaging_window_ms
            )
            sched.set_active(rsi, entry.active)
        self.log.emit(self.loop.now, self.actor, "slice_updated", rsi=rsi,
                      active=entry.active)
        self._send_ran_slice_view(xid=req.xid)

    def _send_ran_slice_view(self, xid: Optional[int]) -> None:
        statuses = []
        for rsi in sorted(self.registry):
            entry = self.registry[rsi]
            ue_count = sum(
                1
                for ctx in self.contexts.values()
                if ctx.rsi_id == rsi and Stage.RRC_CONNECTED <= ctx.stage < Stage.RELEASED
            )
            statuses.append(
                wire.SliceStatus(rsi, entry.policy, entry.active, ue_count)
            )
        self._send(
            dict(
                cell_id=0,
                xid=self.session.next_xid() if xid is None else xid,
                action=wire.Action.RAN_SLICE_RESP,
                body=wire.RanSliceResp(tuple(statuses)),
                event_type=wire.EventType.SINGLE if xid is not None else wire.EventType.TRIGGERED,
            )
        )
        self.log.emit(self.loop.now, self.actor, "ran_slice_view",
                      slices=[s.rsi_id for s in statuses])

    # -- UE association and attach pipeline ----------------------------------

    def associate_ue(self, nas_id: NasId) -> int:
        """Resolve the slice a subscriber belongs to via NAS-id lists."""
        hits = [
            rsi
            for rsi, entry in sorted(self.registry.items())
            if entry.active and nas_id in entry.template.nas_id_list
        ]
        if len(hits) > 1:
            raise AmbiguousAssociationError(
                f"{nas_id} listed in slices {hits}"
            )
        if hits:
            return hits[0]
        default = self.config.default_rsi
        if default is not None:
            entry = self.registry.get(default)
            if entry is not None and entry.active:
                return default
        raise NoMatchingSliceError(str(nas_id))

    def _alloc_rnti(self) -> int:
        rnti = self._next_rnti
        self._next_rnti = (rnti + 1) & 0xFFFF or self.config.rnti_base
        return rnti

    def power_on_ue(self, ue: UeProfile) -> None:
        """Entry point from the scenario: UE switches on in cell coverage."""
        if ue.cell_id not in self.cells:
            raise ValueError(f"cell {ue.cell_id} not served by eNB {self.enb_id}")
        self.log.emit(self.loop.now, f"ue:{ue.nas_id}", "power_on", cell=ue.cell_id)
        self.loop.schedule(self._d("ue_enb"), lambda: self._on_rrc_request(ue))

    def _on_rrc_request(self, ue: UeProfile) -> None:
        rnti = self._alloc_rnti()
        ctx = AttachContext(rnti=rnti, ue=ue, t_start=self.loop.now)
        self.contexts[rnti] = ctx
        ctx.enter(Stage.RRC_SETUP, self.loop.now)
        self.log.emit(self.loop.now, self.actor, "rrc_connection_request",
                      rnti=rnti, nas_id=str(ue.nas_id))
        # RRC Connection Setup out, Setup Complete back
        delay = self._d("enb_proc") + self._d("ue_enb") + self._d("ue_proc") + self._d("ue_enb")
        self.log.emit(self.loop.now, self.actor, "rrc_connection_setup", rnti=rnti)
        self.loop.schedule(delay, lambda: self._on_rrc_setup_complete(ctx))

    def _on_rrc_setup_complete(self, ctx: AttachContext) -> None:
        now = self.loop.now
        ctx.rrc_setup_ms = now - ctx.t_start
        self.log.emit(now, self.actor, "rrc_connection_setup_complete",
                      rnti=ctx.rnti, rrc_setup_ms=ctx.rrc_setup_ms)
        if self.config.slicing_supported:
            try:
                ctx.rsi_id = self.associate_ue(ctx.ue.nas_id)
            except AssociationError as exc:
                ctx.reject_reason = (
                    "ambiguous_association"
                    if isinstance(exc, AmbiguousAssociationError)
                    else "no_matching_slice"
                )
                self.log.emit(now, self.actor, "association_rejected",
                              rnti=ctx.rnti, reason=ctx.reject_reason)
                self._finish_rejected_before_attach(ctx)
                return
        ctx.enter(Stage.RRC_CONNECTED, now)
        self._send_ue_report()
        self.log.emit(now, self.actor, "initial_ue_message",
                      rnti=ctx.rnti, nas_id=str(ctx.ue.nas_id))
        rnti = ctx.rnti
        nas = ctx.ue.nas_id
        self.loop.schedule(
            self._d("enb_epc"), lambda: self.epc.initial_ue_message(self, rnti, nas)
        )

    def _finish_rejected_before_attach(self, ctx: AttachContext) -> None:
        self.log.emit(self.loop.now, self.actor, "rrc_connection_release",
                      rnti=ctx.rnti)
        ctx.enter(Stage.RELEASED, self.loop.now)
        ctx.accepted = False
        ctx.registration_ms = self.loop.now - ctx.t_start
        self._record_outcome(ctx)

    def on_attach_reject(self, rnti: int) -> None:
        ctx = self.contexts.get(rnti)
        if ctx is None:
            return
        ctx.reject_reason = "not_provisioned"
        self.log.emit(self.loop.now, self.actor, "attach_reject_received", rnti=rnti)
        self._release_ue(rnti, reason="attach_reject")
        ctx.accepted = False
        ctx.registration_ms = self.loop.now - ctx.t_start
        self._record_outcome(ctx)

    def _cell_counters(self, rsi: int, cell_id: int, exclude_rnti: int) -> SliceCounters:
        drbs: Dict[QosProfile, int] = {}
        ues = 0
        for rnti, ctx in self.contexts.items():
            if ctx.rsi_id != rsi or ctx.ue.cell_id != cell_id:
                continue
            if ctx.stage >= Stage.RELEASED or rnti == exclude_rnti:
                continue
            if ctx.stage >= Stage.RRC_CONNECTED:
                ues += 1
            if ctx.stage >= Stage.DRB_ACTIVE:
                for q in ctx.ue.drbs:
                    drbs[q] = drbs.get(q, 0) + 1
        sched = self.schedulers[cell_id]
        load, rate = (
            sched.window_stats(rsi) if rsi in sched.slices else (0.0, 0.0)
        )
        return SliceCounters(drbs, ues, load, rate)

    def on_initial_context_setup_request(
        self, rnti: int, drbs: Tuple[QosProfile, ...]
    ) -> None:
        ctx = self.contexts.get(rnti)
        if ctx is None or ctx.stage >= Stage.RELEASED:
            return
        ctx.ue.drbs = tuple(drbs)
        ctx.enter(Stage.CONTEXT_REQUESTED, self.loop.now)
        self.log.emit(self.loop.now, self.actor, "initial_context_setup_request",
                      rnti=rnti)
        if ctx.rsi_id is None:
            # no slicing on this eNB: legacy admission, always accepted
            self._proceed_context_setup(ctx)
            return
        self.loop.schedule(self._d("enb_ac_local"), lambda: self._local_ac(ctx))

    def _local_ac(self, ctx: AttachContext) -> None:
        entry = self.registry.get(ctx.rsi_id)
        if entry is None or not entry.active:
            ctx.reject_reason = "slice_unavailable"
            self.log.emit(self.loop.now, self.actor, "admission_local",
                          rnti=ctx.rnti, decision="reject_local",
                          reason=ctx.reject_reason)
            self._reject_context(ctx, path="local")
            return
        req = [DrbDemand(1, q) for q in ctx.ue.drbs]
        counters = self._cell_counters(ctx.rsi_id, ctx.ue.cell_id, ctx.rnti)
        decision = evaluate_cell(
            entry.policy.l3, counters, req, self.config.ac_estimates
        )
        self.log.emit(self.loop.now, self.actor, "admission_local",
                      rnti=ctx.rnti, rsi=ctx.rsi_id, decision=decision.value)
        if decision is CellDecision.ACCEPT_LOCAL:
            ctx.decision_path = "local"
            self._proceed_context_setup(ctx)
        elif decision is CellDecision.REJECT_LOCAL:
            ctx.decision_path = "local"
            self._reject_context(ctx, path="local")
        else:
            ctx.decision_path = "central"
            self.loop.schedule(self._d("enb_esc_prep"), lambda: self._send_ac_req(ctx))

    def _send_ac_req(self, ctx: AttachContext) -> None:
        if ctx.stage >= Stage.RELEASED:
            return
        ctx.enter(Stage.AC_PENDING, self.loop.now)
        req = wire.AcReq(
            rnti=ctx.rnti,
            drbs=tuple(DrbDemand(1, q) for q in ctx.ue.drbs),
        )
        msg = self._send(
            dict(
                cell_id=ctx.ue.cell_id,
                xid=self.session.next_xid(),
                action=wire.Action.AC_REQ,
                body=req,
                opcode=wire.OP_CREATE,
            ),
            track=True,
        )
        if msg is None:
            # controller unreachable: treat like a guard expiry
            self._on_ac_timeout(ctx)
            return
        ctx.ac_xid = msg.xid
        ctx.t_ac_sent = self.loop.now
        self.log.emit(self.loop.now, self.actor, "ac_request", rnti=ctx.rnti,
                      rsi=ctx.rsi_id, xid=msg.xid,
                      drbs=[[d.count, d.qos.qci, d.qos.arp] for d in req.drbs])
        ctx.guard = self.loop.schedule(
            self.config.ac_guard_ms, lambda: self._on_ac_timeout(ctx)
        )

    def _on_ac_timeout(self, ctx: AttachContext) -> None:
        if ctx.stage is not Stage.AC_PENDING:
            return
        if ctx.ac_xid is not None:
            self.session.pending.pop(ctx.ac_xid, None)
        ctx.reject_reason = "ac_guard_timeout"
        self.log.emit(self.loop.now, self.actor, "ac_guard_timeout", rnti=ctx.rnti)
        self._reject_context(ctx, path="central")

    def _on_ac_resp(self, msg: wire.Message) -> None:
        try:
            self.session.pair_response(msg)
        except wire.UnknownXidError:
            self.log.emit(self.loop.now, self.actor, "stale_ac_response",
                          xid=msg.xid)
            return
        body: wire.AcResp = msg.body
        ctx = self.contexts.get(body.rnti)
        if ctx is None or ctx.stage is not Stage.AC_PENDING or ctx.ac_xid != msg.xid:
            return
        if ctx.guard is not None:
            ctx.guard.cancel()
            ctx.guard = None
        ctx.ac_rtt_ms = self.loop.now - ctx.t_ac_sent
        self.log.emit(self.loop.now, self.actor, "ac_response", rnti=ctx.rnti,
                      accepted=body.accepted, ac_rtt_ms=ctx.ac_rtt_ms)
        accepted = body.accepted

        def _resume() -> None:
            if ctx.stage >= Stage.RELEASED:
                return
            if accepted:
                self._proceed_context_setup(ctx)
            else:
                ctx.reject_reason = "central_reject"
                self._reject_context(ctx, path="central")

        self.loop.schedule(self._d("enb_esc_resume"), _resume)

    def _proceed_context_setup(self, ctx: AttachContext) -> None:
        def _configured() -> None:
            if ctx.stage >= Stage.RELEASED:
                return
            now = self.loop.now
            self.log.emit(now, self.actor, "ue_context_setup", rnti=ctx.rnti)
            self.log.emit(now, self.actor, "initial_context_setup_response",
                          rnti=ctx.rnti)
            rnti = ctx.rnti
            self.loop.schedule(
                self._d("enb_epc"), lambda: self.epc.context_setup_response(self, rnti)
            )
            self.log.emit(now, self.actor, "rrc_connection_reconfiguration",
                          rnti=ctx.rnti)
            delay = self._d("ue_enb") + self._d("ue_reconf_proc") + self._d("ue_enb")
            self.loop.schedule(delay, lambda: self._on_reconfiguration_complete(ctx))

        self.loop.schedule(self._d("enb_ctx_proc"), _configured)

    def _on_reconfiguration_complete(self, ctx: AttachContext) -> None:
        if ctx.stage >= Stage.RELEASED:
            return
        now = self.loop.now
        ctx.enter(Stage.DRB_ACTIVE, now)
        ctx.accepted = True
        ctx.registration_ms = now - ctx.t_start
        self.log.emit(now, self.actor, "rrc_connection_reconfiguration_complete",
                      rnti=ctx.rnti, registration_ms=ctx.registration_ms)
        if ctx.rsi_id is not None:
            sched = self.schedulers[ctx.ue.cell_id]
            if ctx.rsi_id in sched.slices:
                sched.add_ue(ctx.rsi_id, ctx.rnti, ctx.ue.cqi_at(sched.tti))
                if ctx.ue.ul_traffic is not None:
                    self._ul_sources[ctx.rnti] = ctx.ue.ul_traffic
        self._send_ue_report()
        self._record_outcome(ctx)

    def _reject_context(self, ctx: AttachContext, path: str) -> None:
        now = self.loop.now
        self.log.emit(now, self.actor, "initial_context_setup_failure",
                      rnti=ctx.rnti, path=path)
        rnti = ctx.rnti
        self.loop.schedule(
            self._d("enb_epc"), lambda: self.epc.context_setup_failure(self, rnti)
        )

    def on_release_command(self, rnti: int) -> None:
        ctx = self.contexts.get(rnti)
        if ctx is None or ctx.stage >= Stage.RELEASED:
            return
        self._release_ue(rnti, reason="context_release")
        self.log.emit(self.loop.now, self.actor, "ue_context_release_complete",
                      rnti=rnti)
        self.loop.schedule(
            self._d("enb_epc"), lambda: self.epc.release_complete(self, rnti)
        )
        ctx.accepted = False
        ctx.registration_ms = self.loop.now - ctx.t_start
        self._record_outcome(ctx)

    def _release_ue(self, rnti: int, reason: str, report: bool = True) -> None:
        ctx = self.contexts.get(rnti)
        if ctx is None:
            return
        self.log.emit(self.loop.now, self.actor, "rrc_connection_release",
                      rnti=rnti, reason=reason)
        if ctx.guard is not None:
            ctx.guard.cancel()
            ctx.guard = None
        was_connected = ctx.stage >= Stage.RRC_CONNECTED
        ctx.enter(Stage.RELEASED, self.loop.now)
        sched = self.schedulers.get(ctx.ue.cell_id)
        if sched is not None:
            sched.remove_ue(rnti)
        self._ul_sources.pop(rnti, None)
        if report and was_connected:
            self._send_ue_report()

    def _outcome_dict(self, ctx: AttachContext) -> dict:
        return {
            "nas_id": str(ctx.ue.nas_id),
            "enb_id": self.enb_id,
            "cell_id": ctx.ue.cell_id,
            "rnti": ctx.rnti,
            "rsi_id": ctx.rsi_id,
            "accepted": None if ctx.accepted is None else bool(ctx.accepted),
            "decision_path": ctx.decision_path,
            "reject_reason": ctx.reject_reason,
            "rrc_setup_ms": ctx.rrc_setup_ms,
            "registration_ms": ctx.registration_ms,
            "ac_rtt_ms": ctx.ac_rtt_ms,
            "t_start": ctx.t_start,
            "stages": list(ctx.stages),
        }

    def _record_outcome(self, ctx: AttachContext) -> None:
        self.outcomes.append(self._outcome_dict(ctx))

    def pending_outcomes(self) -> List[dict]:
        """Attaches still in flight (accepted is None); lets a truncated
        run report every UE it saw."""
        decided = {o["rnti"] for o in self.outcomes}
        return [
            self._outcome_dict(ctx)
            for rnti, ctx in sorted(self.contexts.items())
            if rnti not in decided and ctx.accepted is None
        ]

    # -- radio loop -----------------------------------------------------------

    def _schedule_tti(self, cell_id: int) -> None:
        cfg = self.cells[cell_id]

        def _tick() -> None:
            self._run_tti(cell_id)
            self.loop.schedule(cfg.tti_ms, _tick)

        self.loop.schedule(cfg.tti_ms, _tick)

    def _run_tti(self, cell_id: int) -> None:
        sched = self.schedulers[cell_id]
        for rnti in sorted(self.contexts):
            ctx = self.contexts[rnti]
            if ctx.ue.cell_id != cell_id or ctx.stage is not Stage.DRB_ACTIVE:
                continue
            if rnti not in sched.ues:
                continue
            if not isinstance(ctx.ue.cqi, int):
                sched.set_cqi(rnti, ctx.ue.cqi_at(sched.tti))
            if ctx.ue.traffic is not None:
                n_bytes = ctx.ue.traffic.step()
                if n_bytes:
                    sched.enqueue(rnti, 1, n_bytes, mac.DL)
            ul = self._ul_sources.get(rnti)
            if ul is not None:
                n_bytes = ul.step()
                if n_bytes:
                    sched.enqueue(rnti, 1, n_bytes, mac.UL)
        step = sched.step_tti()
        if self.tti_sink is not None and (step.dl.grants or step.ul.grants):
            self.tti_sink(self.enb_id, cell_id, step)

    def attach_ul_source(self, rnti: int, source) -> None:
        self._ul_sources[rnti] = source

    def _meas_tick(self) -> None:
        self.emit_slice_measurements()
        self.loop.schedule(self.config.meas_interval_ms, self._meas_tick)

    def emit_slice_measurements(self) -> None:
        """Gather and reset per-interval counters; one frame per active
        slice per cell."""
        for cell_id in sorted(self.schedulers):
            sched = self.schedulers[cell_id]
            rollup = sched.interval_rollup(self.config.accounting_base)
            for rsi in sorted(rollup):
                entry = self.registry.get(rsi)
                if entry is None or not entry.active:
                    continue
                counters = rollup[rsi]
                body = wire.SliceMeas(
                    rsi_id=rsi,
                    dl_prb_assigned=counters["dl_prb_assigned"],
                    dl_prb_used=counters["dl_prb_used"],
                    ul_prb_assigned=counters["ul_prb_assigned"],
                    ul_prb_used=counters["ul_prb_used"],
                    interval_ms=self.config.meas_interval_ms,
                )
                self._send(
                    dict(
                        cell_id=cell_id,
                        xid=self.session.next_xid(),
                        action=wire.Action.SLICE_MEAS,
                        body=body,
                        event_type=wire.EventType.SCHEDULED,
                        period_ms=self.config.meas_interval_ms,
                    )
                )
                self.log.emit(
                    self.loop.now, self.actor, "slice_measurements",
                    rsi=rsi, cell=cell_id,
                    dl_prb_used=counters["dl_prb_used"],
                    dl_prb_assigned=counters["dl_prb_assigned"],
                    load_percent=round(counters["load_percent"], 4),
                )
