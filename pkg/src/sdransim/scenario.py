"""Scenario ingestion, the deterministic run harness, and reporting.

A scenario file (TOML; the same structure works as a JSON object)
describes the controller config, the eNBs and their cells, the EPC
subscriber list, the slices to provision (with provisioning times), and
the UEs with attach schedule, traffic, and channel quality. `run` boots
everything inside one simulated-time event loop and produces a
machine-readable report; equal (spec, seed) gives byte-identical
reports. `repeat` aggregates per-stage timing statistics over n runs,
split by admission decision path.
"""

from __future__ import annotations

import json
import os
import statistics
from dataclasses import dataclass, field
from random import Random
from typing import Dict, List, Optional, Tuple

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - environment-dependent
    import tomli as tomllib

from importlib import resources

from . import wire
from .controller import Controller, ControllerConfig, ControllerError
from .enb import CellConfig, EnbAgent, EnbConfig, EpcStub, EventLog, UeProfile
from .mac import check_cqi_table
from .policy import (
    NasId,
    NominalDemand,
    PolicyError,
    QosProfile,
)
from .sim import EventLoop, LatencyProfile, SimConnection, profile_from_config


class SpecError(ValueError):
    """Scenario document failed validation; carries the field path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class CbrSource:
    """Constant-bit-rate byte source with exact fractional accounting."""

    def __init__(self, rate_bps: int):
        if rate_bps < 0:
            raise ValueError("rate must be nonnegative")
        self.rate_bps = int(rate_bps)
        self._acc = 0

    def step(self) -> int:
        """Bytes to enqueue this 1 ms TTI (rate/8000, remainders carried)."""
        self._acc += self.rate_bps
        n_bytes, self._acc = divmod(self._acc, 8000)
        return n_bytes


def cbr_source_step(source: CbrSource, _tti: int = 0) -> int:
    return source.step()


class TraceCqi:
    """Per-TTI CQI values from a sequence, cycled."""

    def __init__(self, values):
        values = [int(v) for v in values]
        if not values:
            raise ValueError("empty CQI trace")
        if any(not 1 <= v <= 15 for v in values):
            raise ValueError("CQI trace values must be in 1..15")
        self.values = values

    def value_at(self, tti: int) -> int:
        return self.values[tti % len(self.values)]


@dataclass
class EnbSpec:
    enb_id: int
    cells: List[CellConfig]
    registered: bool = True
    config: EnbConfig = field(default_factory=EnbConfig)


@dataclass
class SliceSpec:
    at_time_ms: int
    template_doc: dict


@dataclass
class UeSpec:
    nas_id: NasId
    enb_id: int
    cell_id: int
    power_on_ms: int
    plmn: str
    drbs: Tuple[QosProfile, ...]
    cqi: object
    cbr_dl_bps: int = 0
    cbr_ul_bps: int = 0


@dataclass
class ScenarioSpec:
    seed: int
    duration_ms: int
    profile: LatencyProfile
    controller: ControllerConfig
    enbs: List[EnbSpec]
    epc_subscribers: List[str]
    slices: List[SliceSpec]
    ues: List[UeSpec]
    accounting_base: object = "per-tti-capacity"


def _req(doc: dict, key: str, path: str):
    if key not in doc:
        raise SpecError(f"{path}.{key}", "missing required field")
    return doc[key]


def _parse_accounting(value, path: str):
    if value in (None, "per-tti-capacity"):
        return "per-tti-capacity"
    if isinstance(value, str) and value.startswith("paper-basis"):
        raise SpecError(path, 'paper-basis needs a divisor: {kind="paper-basis", divisor=N}')
    if isinstance(value, dict):
        if value.get("kind") != "paper-basis" or "divisor" not in value:
            raise SpecError(path, 'expected "per-tti-capacity" or {kind="paper-basis", divisor=N}')
        return ("paper-basis", int(value["divisor"]))
    raise SpecError(path, f"cannot parse accounting base {value!r}")


def _parse_estimates(doc: dict) -> NominalDemand:
    def _table(sub: dict, path: str) -> Dict[int, float]:
        out = {}
        for k, v in sub.items():
            try:
                out[int(k)] = float(v)
            except (TypeError, ValueError):
                raise SpecError(f"{path}.{k}", "expected qci -> number") from None
        return out

    return NominalDemand(
        _table(doc.get("load_percent", {}), "estimates.load_percent"),
        _table(doc.get("bitrate_bps", {}), "estimates.bitrate_bps"),
    )


def spec_from_document(doc: dict, base_dir: str = ".") -> ScenarioSpec:
    if not isinstance(doc, dict):
        raise SpecError("scenario", "expected a table/object")
    seed = int(doc.get("seed", 1))
    duration = int(_req(doc, "duration_ms", "scenario"))
    if duration <= 0:
        raise SpecError("scenario.duration_ms", "must be positive")
    lat = doc.get("latency", {})
    if isinstance(lat, dict):
        lat_cfg = lat.get("delays") or lat.get("profile")
    else:
        lat_cfg = lat
    try:
        profile = profile_from_config(lat_cfg)
    except ValueError as exc:
        raise SpecError("scenario.latency", str(exc)) from exc

    ctrl_doc = doc.get("controller", {})
    estimates = _parse_estimates(doc.get("estimates", {}))
    controller = ControllerConfig(
        handshake_timeout_ms=int(ctrl_doc.get("handshake_timeout_ms", 5000)),
        commit_timeout_ms=int(ctrl_doc.get("commit_timeout_ms", 5000)),
        liveness_multiplier=int(ctrl_doc.get("liveness_multiplier", 3)),
        liveness_check_ms=int(ctrl_doc.get("liveness_check_ms", 500)),
        ac_estimates=estimates,
    )
    accounting = _parse_accounting(doc.get("accounting_base"), "scenario.accounting_base")

    enb_defaults = doc.get("enb_defaults", {})
    enbs: List[EnbSpec] = []
    for i, e in enumerate(doc.get("enbs", [])):
        path = f"scenario.enbs[{i}]"
        enb_id = int(_req(e, "enb_id", path))
        cells = []
        for j, c in enumerate(e.get("cells", [])):
            cpath = f"{path}.cells[{j}]"
            try:
                cells.append(
                    CellConfig(
                        cell_id=int(_req(c, "cell_id", cpath)),
                        n_prb=int(c.get("n_prb", 50)),
                        dl_earfcn=int(c.get("dl_earfcn", 2850)),
                        ul_earfcn=int(c.get("ul_earfcn", 20850)),
                    )
                )
            except ValueError as exc:
                raise SpecError(cpath, str(exc)) from exc
        if not cells:
            raise SpecError(f"{path}.cells", "an eNB needs at least one cell")
        merged = {**enb_defaults, **e}
        try:
            cqi_table = check_cqi_table(merged.get("cqi_table", EnbConfig.cqi_table))
        except (TypeError, ValueError) as exc:
            raise SpecError(f"{path}.cqi_table", str(exc)) from None
        cfg = EnbConfig(
            slicing_supported=bool(merged.get("slicing_supported", True)),
            hello_period_ms=int(merged.get("hello_period_ms", 2000)),
            meas_interval_ms=int(merged.get("meas_interval_ms", 1000)),
            ac_guard_ms=int(merged.get("ac_guard_ms", 1000)),
            default_rsi=merged.get("default_rsi"),
            work_conserving=bool(merged.get("work_conserving", True)),
            cqi_table=cqi_table,
            accounting_base=accounting,
            ac_estimates=estimates,
        )
        enbs.append(EnbSpec(enb_id, cells, bool(e.get("registered", True)), cfg))
    if not enbs:
        raise SpecError("scenario.enbs", "at least one eNB is required")
    cell_keys = {(e.enb_id, c.cell_id) for e in enbs for c in e.cells}

    slices = []
    for i, s in enumerate(doc.get("slices", [])):
        path = f"scenario.slices[{i}]"
        slices.append(
            SliceSpec(int(s.get("at_time_ms", 0)), _req(s, "template", path))
        )

    subscribers = [str(s) for s in doc.get("epc", {}).get("subscribers", [])]

    ues = []
    for i, u in enumerate(doc.get("ues", [])):
        path = f"scenario.ues[{i}]"
        try:
            nas = NasId.parse(_req(u, "nas_id", path))
        except PolicyError as exc:
            raise SpecError(f"{path}.nas_id", str(exc)) from exc
        enb_id = int(_req(u, "enb_id", path))
        cell_id = int(_req(u, "cell_id", path))
        if (enb_id, cell_id) not in cell_keys:
            raise SpecError(f"{path}.cell_id", f"cell ({enb_id}, {cell_id}) is not defined")
        power_on = int(_req(u, "power_on_ms", path))
        if not 0 <= power_on <= duration:
            raise SpecError(f"{path}.power_on_ms", "outside the scenario duration")
        drbs = []
        for j, d in enumerate(u.get("drbs", [{"qci": 7, "arp": 9}])):
            try:
                drbs.append(QosProfile(int(d["qci"]), int(d["arp"])))
            except (KeyError, PolicyError) as exc:
                raise SpecError(f"{path}.drbs[{j}]", str(exc)) from exc
        cqi_doc = u.get("cqi", 10)
        if isinstance(cqi_doc, dict):
            if "trace_file" in cqi_doc:
                trace_path = os.path.join(base_dir, cqi_doc["trace_file"])
                try:
                    with open(trace_path, encoding="utf-8") as fh:
                        values = [int(line) for line in fh if line.strip()]
                except (OSError, ValueError) as exc:
                    raise SpecError(f"{path}.cqi.trace_file", str(exc)) from exc
            else:
                values = _req(cqi_doc, "trace", f"{path}.cqi")
            try:
                cqi: object = TraceCqi(values)
            except ValueError as exc:
                raise SpecError(f"{path}.cqi", str(exc)) from exc
        else:
            cqi = int(cqi_doc)
            if not 1 <= cqi <= 15:
                raise SpecError(f"{path}.cqi", "must be in 1..15")
        plmn = str(u.get("plmn", nas.value[:5] if nas.kind == "imsi" else "00000"))
        ues.append(
            UeSpec(
                nas_id=nas, enb_id=enb_id, cell_id=cell_id, power_on_ms=power_on,
                plmn=plmn, drbs=tuple(drbs), cqi=cqi,
                cbr_dl_bps=int(u.get("cbr_dl_bps", 0)),
                cbr_ul_bps=int(u.get("cbr_ul_bps", 0)),
            )
        )

    return ScenarioSpec(
        seed=seed,
        duration_ms=duration,
        profile=profile,
        controller=controller,
        enbs=enbs,
        epc_subscribers=subscribers,
        slices=slices,
        ues=ues,
        accounting_base=accounting,
    )


def load_spec(path: str) -> ScenarioSpec:
    base_dir = os.path.dirname(os.path.abspath(path))
    if str(path).endswith(".json"):
        with open(path, encoding="utf-8") as fh:
            return spec_from_document(json.load(fh), base_dir)
    with open(path, "rb") as fh:
        return spec_from_document(tomllib.load(fh), base_dir)


def section_v_document() -> dict:
    """The built-in reproduction scenario document (see `replay-paper`)."""
    data = resources.files("sdransim.data").joinpath("section_v.toml").read_bytes()
    return tomllib.loads(data.decode("utf-8"))


def section_v_spec() -> ScenarioSpec:
    return spec_from_document(section_v_document())


class SimRun:
    """One executed scenario: report plus full access to the internals."""

    def __init__(self, spec: ScenarioSpec, seed: Optional[int] = None,
                 collect_tti: bool = False):
        self.spec = spec
        self.seed = spec.seed if seed is None else seed
        self.loop = EventLoop()
        self.rng = Random(self.seed)
        self.log = EventLog()
        self.wire_trace: List[dict] = []
        self.tti_trace: List[dict] = []
        self.provisioning_errors: List[dict] = []
        self.connections: Dict[int, SimConnection] = {}
        self._collect_tti = collect_tti

        profile = spec.profile
        self.controller = Controller(
            config=spec.controller,
            clock=lambda: self.loop.now,
            defer=self.loop.schedule,
            delays=lambda name: profile.draw(name, self.rng),
            log=self.log,
        )
        self.epc = EpcStub(self.loop, profile, self.rng, self.log)
        self.agents: Dict[int, EnbAgent] = {}
        for espec in spec.enbs:
            agent = EnbAgent(
                enb_id=espec.enb_id,
                cells=espec.cells,
                config=espec.config,
                loop=self.loop,
                profile=profile,
                rng=self.rng,
                epc=self.epc,
                log=self.log,
                connect=self._connect_agent,
            )
            if collect_tti:
                agent.tti_sink = self._tti_sink
            self.agents[espec.enb_id] = agent
            if espec.registered:
                self.controller.register_enb(espec.enb_id)

        for uspec in spec.ues:
            if str(uspec.nas_id) in spec.epc_subscribers:
                self.epc.provision(uspec.nas_id, uspec.drbs)

    # -- wiring ---------------------------------------------------------------

    def _tti_sink(self, enb_id: int, cell_id: int, step) -> None:
        for direction, alloc in (("dl", step.dl), ("ul", step.ul)):
            for g in alloc.grants:
                self.tti_trace.append({
                    "tti": step.tti, "enb_id": enb_id, "cell_id": cell_id,
                    "dir": direction, "rsi_id": g.rsi_id, "rnti": g.rnti,
                    "prbs": g.prbs, "bits": g.bits,
                })

    def _tap(self, src: str, dst: str):
        def tap(arrival: int, data: bytes) -> None:
            try:
                msg = wire.decode(data)
            except wire.WireError:  # pragma: no cover - we only send valid frames
                return
            self.wire_trace.append({
                "t": arrival,
                "src": src,
                "dst": dst,
                "action": msg.action.name,
                "cell_id": msg.cell_id,
                "xid": msg.xid,
                "seq": msg.seq,
                "hex": data.hex(),
            })

        return tap

    def _connect_agent(self, agent: EnbAgent) -> None:
        profile = self.spec.profile
        conn = SimConnection(
            self.loop,
            latency=lambda: profile.draw("enb_ctrl", self.rng),
            tap_a_to_b=self._tap(agent.actor, "ctrl"),
            tap_b_to_a=self._tap("ctrl", agent.actor),
        )
        self.connections[agent.enb_id] = conn
        conn_id = self.controller.connection_opened(conn.send_from_b, conn.close)
        conn.on_b_receive = lambda data: self.controller.on_frame(conn_id, data)
        conn.on_b_close = lambda: self.controller.connection_closed(conn_id)

        class _Transport:
            def __init__(self, c: SimConnection):
                self._c = c

            def send(self, data: bytes) -> None:
                self._c.send_from_a(data)

            def close(self) -> None:
                self._c.close()

        transport = _Transport(conn)
        conn.on_a_receive = lambda data: agent.handle_frame(data)
        conn.on_a_close = lambda: agent.transport_closed(transport)
        agent.transport_connected(transport)

    # -- execution -------------------------------------------------------------

    def execute(self) -> "SimRun":
        for agent in self.agents.values():
            agent.start()
        for i, sspec in enumerate(self.spec.slices):
            doc = sspec.template_doc

            def _provision(doc=doc, idx=i) -> None:
                try:
                    self.controller.commission_slice(doc)
                except (PolicyError, ControllerError) as exc:
                    self.provisioning_errors.append(
                        {"slice_index": idx, "t": self.loop.now, "error": str(exc)}
                    )
                    self.log.emit(self.loop.now, "ctrl", "commission_rejected",
                                  error=str(exc))

            self.loop.schedule_at(sspec.at_time_ms, _provision)
        for uspec in self.spec.ues:
            agent = self.agents[uspec.enb_id]
            profile = UeProfile(
                nas_id=uspec.nas_id,
                cell_id=uspec.cell_id,
                plmn_id=uspec.plmn,
                drbs=uspec.drbs,
                cqi=uspec.cqi,
                traffic=CbrSource(uspec.cbr_dl_bps) if uspec.cbr_dl_bps else None,
                ul_traffic=CbrSource(uspec.cbr_ul_bps) if uspec.cbr_ul_bps else None,
            )
            self.loop.schedule_at(
                uspec.power_on_ms, lambda a=agent, p=profile: a.power_on_ue(p)
            )
        self.loop.run_until(self.spec.duration_ms)
        return self

    # -- reporting ---------------------------------------------------------------

    def outcomes(self) -> List[dict]:
        merged = []
        for enb_id in sorted(self.agents):
            agent = self.agents[enb_id]
            merged.extend(agent.outcomes)
            merged.extend(agent.pending_outcomes())
        merged.sort(key=lambda o: (o["t_start"], o["enb_id"], o["rnti"]))
        return merged

    def wire_counts(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for rec in self.wire_trace:
            counts[rec["action"]] = counts.get(rec["action"], 0) + 1
        return dict(sorted(counts.items()))

    @property
    def report(self) -> dict:
        slices = {}
        for rsi in sorted(self.controller.slices):
            record = self.controller.slices[rsi]
            slices[str(rsi)] = {
                "state": record.state.value,
                "measurements": list(record.measurements),
            }
        return {
            "schema": "sdransim-report/1",
            "seed": self.seed,
            "duration_ms": self.spec.duration_ms,
            "outcomes": self.outcomes(),
            "slices": slices,
            "wire_counts": self.wire_counts(),
            "provisioning_errors": list(self.provisioning_errors),
            "event_count": len(self.log.records),
        }

    def report_json(self) -> str:
        return json.dumps(self.report, sort_keys=True, indent=2) + "\n"

    def events_jsonl(self) -> str:
        return "".join(json.dumps(rec) + "\n" for rec in self.log.records)

    def wire_jsonl(self) -> str:
        return "".join(json.dumps(rec) + "\n" for rec in self.wire_trace)

    def tti_jsonl(self) -> str:
        return "".join(json.dumps(rec) + "\n" for rec in self.tti_trace)


def run(spec: ScenarioSpec, seed: Optional[int] = None,
        collect_tti: bool = False) -> SimRun:
    """Execute one scenario deterministically."""
    return SimRun(spec, seed, collect_tti).execute()


def _stats(values: List[int]) -> dict:
    if not values:
        return {"count": 0, "mean": None, "stddev": None}
    return {
        "count": len(values),
        "mean": statistics.fmean(values),
        "stddev": statistics.pstdev(values),
    }


def repeat(spec: ScenarioSpec, n: int) -> dict:
    """Run n times (seeds seed+0 .. seed+n-1) and aggregate timing stats.

    Statistics cover accepted attaches, split by decision path
    (none / local / central), so no-AC baselines, local decisions, and
    centralized decisions can be compared directly.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rrc: Dict[str, List[int]] = {"none": [], "local": [], "central": []}
    registration: Dict[str, List[int]] = {"none": [], "local": [], "central": []}
    ac_rtt: List[int] = []
    runs = []
    for i in range(n):
        sim = run(spec, seed=spec.seed + i)
        runs.append(sim)
        for outcome in sim.outcomes():
            if not outcome["accepted"]:
                continue
            path = outcome["decision_path"]
            rrc[path].append(outcome["rrc_setup_ms"])
            registration[path].append(outcome["registration_ms"])
            if outcome["ac_rtt_ms"] is not None:
                ac_rtt.append(outcome["ac_rtt_ms"])
    return {
        "runs": n,
        "rrc_setup_ms": {path: _stats(v) for path, v in rrc.items()},
        "registration_ms": {path: _stats(v) for path, v in registration.items()},
        "ac_roundtrip_ms": _stats(ac_rtt),
        "_runs": runs,
    }
