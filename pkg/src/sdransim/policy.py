"""RAN-slice templates and the slice-aware admission-control policy.

A slice is provisioned from a template carrying identifiers (PLMNs,
S-NSSAIs, target cells, associated subscriber NAS ids) and an RRM policy:

* L3 descriptor — capacity rules for admission control. Each rule bounds
  one metric (radio load %, aggregated bit rate, DRB count, UE count) for
  bearers matching a set of (QCI, ARP) pairs, at cell or slice scope, as a
  minimum guarantee or a maximum limit.
* L2 descriptor — inter-slice scheduling (RR, or WRR with a resource
  share) and intra-slice scheduling (RR, PF, max C/I).
* L1 descriptor — carried as an opaque blob; nothing here interprets it.

Admission is split: `evaluate_cell` is the eNB-local decision (accept
within the per-cell guarantee, reject on a per-cell limit, otherwise
escalate when slice-scope rules exist), `evaluate_slice` is the
centralized decision against slice-wide counters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence, Tuple


class PolicyError(ValueError):
    """Base for template/policy validation failures."""


class DuplicateIdError(PolicyError):
    pass


class UnknownCellError(PolicyError):
    pass


class SlicingUnsupportedError(PolicyError):
    pass


class InconsistentBoundsError(PolicyError):
    pass


class ShareOverflowError(PolicyError):
    pass


class DocumentError(PolicyError):
    """Malformed provisioning document; carries the offending field path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class QosProfile:
    """The two mandatory bearer QoS attributes."""

    qci: int
    arp: int

    def __post_init__(self) -> None:
        if not 1 <= self.qci <= 255:
            raise PolicyError(f"qci {self.qci} out of range 1..255")
        if not 1 <= self.arp <= 15:
            raise PolicyError(f"arp {self.arp} out of range 1..15")


@dataclass(frozen=True)
class QosMatch:
    """A set of (qci, arp) pairs; None is the wildcard component."""

    pairs: frozenset

    def __post_init__(self) -> None:
        if not self.pairs:
            raise PolicyError("QoS match must carry at least one pair")
        for qci, arp in self.pairs:
            if qci is not None and not 1 <= qci <= 255:
                raise PolicyError(f"match qci {qci} out of range")
            if arp is not None and not 1 <= arp <= 15:
                raise PolicyError(f"match arp {arp} out of range")

    def matches(self, q: QosProfile) -> bool:
        return any(
            (qci is None or qci == q.qci) and (arp is None or arp == q.arp)
            for qci, arp in self.pairs
        )

    @property
    def is_wildcard(self) -> bool:
        return (None, None) in self.pairs

    @staticmethod
    def of(*pairs) -> "QosMatch":
        return QosMatch(frozenset(pairs))


WILDCARD_MATCH = QosMatch.of((None, None))


class Metric(Enum):
    RADIO_LOAD_PERCENT = "radio_load_percent"
    AGGREGATED_BITRATE_BPS = "bitrate_bps"
    DRB_COUNT = "drb_count"
    UE_COUNT = "ue_count"


class Scope(Enum):
    CELL = "cell"
    SLICE = "slice"


class Bound(Enum):
    MIN = "min"
    MAX = "max"


@dataclass(frozen=True)
class CapacityRule:
    """One L3 constraint: metric x QoS match x scope x min/max bound."""

    metric: Metric
    match: QosMatch
    scope: Scope
    bound: Bound
    value: float

    def __post_init__(self) -> None:
        if self.value < 0:
            raise PolicyError("rule value must be nonnegative")
        if self.metric is Metric.RADIO_LOAD_PERCENT and self.value > 100:
            raise PolicyError("radio load bound exceeds 100%")
        if self.metric is Metric.UE_COUNT and self.match != WILDCARD_MATCH:
            raise PolicyError("UE-count rules carry the wildcard match only")


@dataclass(frozen=True)
class L3Descriptor:
    rules: Tuple[CapacityRule, ...] = ()
    averaging_window_ms: int = 1000

    def __post_init__(self) -> None:
        if self.averaging_window_ms <= 0:
            raise PolicyError("averaging window must be positive")
        object.__setattr__(self, "rules", tuple(self.rules))


class InterSliceAlgo(Enum):
    RR = "rr"
    WRR = "wrr"


class IntraSliceAlgo(Enum):
    RR = "rr"
    PF = "pf"
    MAX_CI = "max_ci"


@dataclass(frozen=True)
class L2Descriptor:
    inter_slice: InterSliceAlgo = InterSliceAlgo.RR
    share_percent: Optional[float] = None
    intra_slice: IntraSliceAlgo = IntraSliceAlgo.RR

    def __post_init__(self) -> None:
        if self.inter_slice is InterSliceAlgo.WRR:
            if self.share_percent is None or not 0 < self.share_percent <= 100:
                raise PolicyError("WRR requires a share in (0, 100]")
        elif self.share_percent is not None:
            raise PolicyError("share_percent is only valid with WRR")


@dataclass(frozen=True)
class RrmPolicy:
    l3: L3Descriptor = field(default_factory=L3Descriptor)
    l2: L2Descriptor = field(default_factory=L2Descriptor)
    l1_opaque: bytes = b""


@dataclass(frozen=True)
class NasId:
    """Tagged subscriber identity (permanent IMSI or temporary TMSI)."""

    kind: str
    value: str

    def __post_init__(self) -> None:
        if self.kind not in ("imsi", "tmsi"):
            raise PolicyError(f"unknown NAS id kind {self.kind!r}")
        if not self.value:
            raise PolicyError("empty NAS id value")

    def __str__(self) -> str:
        return f"{self.kind}:{self.value}"

    @staticmethod
    def parse(text: str) -> "NasId":
        kind, sep, value = str(text).partition(":")
        if not sep:
            raise PolicyError(f"NAS id {text!r} must look like 'imsi:<digits>'")
        return NasId(kind, value)


@dataclass(frozen=True)
class Snssai:
    plmn: str
    sst: int
    sd: Optional[int] = None

    def __post_init__(self) -> None:
        if not 0 <= self.sst <= 255:
            raise PolicyError("sst out of range 0..255")
        if self.sd is not None and not 0 <= self.sd <= 0xFFFFFF:
            raise PolicyError("sd out of range (24-bit)")


@dataclass(frozen=True)
class RsiTemplate:
    """Everything needed to provision one RAN slice instance."""

    rsi_id: int
    plmn_list: Tuple[str, ...]
    cell_list: Tuple[Tuple[int, int], ...]  # (enb_id, cell_id)
    rrm_policy: RrmPolicy
    snssai_list: Tuple[Snssai, ...] = ()
    nas_id_list: Tuple[NasId, ...] = ()

    def __post_init__(self) -> None:
        if self.rsi_id < 0 or self.rsi_id > 0xFFFFFFFF:
            raise PolicyError("rsi_id out of 32-bit range")
        object.__setattr__(self, "plmn_list", tuple(self.plmn_list))
        object.__setattr__(self, "cell_list", tuple(tuple(c) for c in self.cell_list))
        object.__setattr__(self, "snssai_list", tuple(self.snssai_list))
        object.__setattr__(self, "nas_id_list", tuple(self.nas_id_list))
        if not self.cell_list:
            raise PolicyError("cell_list must not be empty")


@dataclass(frozen=True)
class DrbDemand:
    """A requested batch of identical DRBs."""

    count: int
    qos: QosProfile

    def __post_init__(self) -> None:
        if self.count < 1:
            raise PolicyError("DRB demand count must be >= 1")


@dataclass(frozen=True)
class SliceCounters:
    """Utilization snapshot for one slice at cell or slice scope."""

    drbs: Mapping[QosProfile, int] = field(default_factory=dict)
    connected_ues: int = 0
    radio_load_percent: float = 0.0
    aggregated_bitrate_bps: float = 0.0

    def drb_count(self, match: QosMatch) -> int:
        return sum(n for qos, n in self.drbs.items() if match.matches(qos))


@dataclass(frozen=True)
class NominalDemand:
    """Per-QCI admission-time estimates for load/bitrate rules.

    The radio load and bit rate a new DRB will consume cannot be observed
    before it carries traffic, so rules on those metrics evaluate requests
    with these configured nominal values (defaulting to zero).
    """

    load_percent_by_qci: Mapping[int, float] = field(default_factory=dict)
    bitrate_bps_by_qci: Mapping[int, float] = field(default_factory=dict)

    def load(self, qos: QosProfile) -> float:
        return self.load_percent_by_qci.get(qos.qci, 0.0)

    def bitrate(self, qos: QosProfile) -> float:
        return self.bitrate_bps_by_qci.get(qos.qci, 0.0)


ZERO_DEMAND = NominalDemand()


class CellDecision(Enum):
    ACCEPT_LOCAL = "accept_local"
    ESCALATE = "escalate"
    REJECT_LOCAL = "reject_local"


class SliceDecision(Enum):
    ACCEPT = "accept"
    REJECT = "reject"


def matches(match: QosMatch, q: QosProfile) -> bool:
    return match.matches(q)


def _rule_applies(rule: CapacityRule, req: Sequence[DrbDemand], new_ues: int) -> bool:
    if rule.metric is Metric.UE_COUNT:
        return new_ues > 0
    return any(rule.match.matches(d.qos) for d in req)


def _post_value(
    rule: CapacityRule,
    counters: SliceCounters,
    req: Sequence[DrbDemand],
    estimates: NominalDemand,
    new_ues: int,
) -> float:
    matching = [d for d in req if rule.match.matches(d.qos)]
    if rule.metric is Metric.DRB_COUNT:
        return counters.drb_count(rule.match) + sum(d.count for d in matching)
    if rule.metric is Metric.UE_COUNT:
        return counters.connected_ues + new_ues
    if rule.metric is Metric.RADIO_LOAD_PERCENT:
        added = sum(d.count * estimates.load(d.qos) for d in matching)
        return counters.radio_load_percent + added
    added = sum(d.count * estimates.bitrate(d.qos) for d in matching)
    return counters.aggregated_bitrate_bps + added


def evaluate_cell(
    l3: L3Descriptor,
    cell: SliceCounters,
    req: Sequence[DrbDemand],
    estimates: NominalDemand = ZERO_DEMAND,
    new_ues: int = 1,
) -> CellDecision:
    """eNB-local admission decision against cell-scope counters.

    The request is admitted or rejected atomically (all listed DRBs or
    none). Order of checks:

    1. Any applicable cell-scope maximum exceeded post-admission ->
       REJECT_LOCAL.
    2. The request fits entirely inside the cell-scope minimum guarantees
       (at least one applicable minimum rule, and post-admission values
       stay within every applicable one) -> ACCEPT_LOCAL with no
       controller interaction.
    3. Guarantee exhausted (or none applicable) and any slice-scope rule
       exists -> ESCALATE to the centralized decision.
    4. Otherwise -> ACCEPT_LOCAL (no constraint applies).
    """
    applicable = [
        r for r in l3.rules if r.scope is Scope.CELL and _rule_applies(r, req, new_ues)
    ]
    for rule in applicable:
        if rule.bound is Bound.MAX:
            if _post_value(rule, cell, req, estimates, new_ues) > rule.value:
                return CellDecision.REJECT_LOCAL
    minimums = [r for r in applicable if r.bound is Bound.MIN]
    if minimums and all(
        _post_value(r, cell, req, estimates, new_ues) <= r.value for r in minimums
    ):
        return CellDecision.ACCEPT_LOCAL
    if any(r.scope is Scope.SLICE for r in l3.rules):
        return CellDecision.ESCALATE
    return CellDecision.ACCEPT_LOCAL


def evaluate_slice(
    l3: L3Descriptor,
    slice_counters: SliceCounters,
    req: Sequence[DrbDemand],
    estimates: NominalDemand = ZERO_DEMAND,
    new_ues: int = 1,
) -> SliceDecision:
    """Centralized decision: reject iff an applicable slice-wide maximum
    would be exceeded post-admission."""
    for rule in l3.rules:
        if rule.scope is not Scope.SLICE or rule.bound is not Bound.MAX:
            continue
        if not _rule_applies(rule, req, new_ues):
            continue
        if _post_value(rule, slice_counters, req, estimates, new_ues) > rule.value:
            return SliceDecision.REJECT
    return SliceDecision.ACCEPT


def validate_template(
    tpl: RsiTemplate,
    cells: Mapping[Tuple[int, int], bool],
    existing: Iterable[RsiTemplate],
) -> RsiTemplate:
    """Authorize a template against the current RAN map and slice set.

    `cells` maps (enb_id, cell_id) to its slicing-capability flag for
    every cell known from capability reports; `existing` holds the
    templates of all non-decommissioned slices.
    """
    existing = list(existing)
    if any(e.rsi_id == tpl.rsi_id for e in existing):
        raise DuplicateIdError(f"slice {tpl.rsi_id} already exists")
    for cell in tpl.cell_list:
        if cell not in cells:
            raise UnknownCellError(f"cell {cell} is not in the RAN map")
        if not cells[cell]:
            raise SlicingUnsupportedError(f"cell {cell} does not support slicing")
    check_bounds_consistent(tpl.rrm_policy.l3)
    check_share_headroom(tpl.cell_list, tpl.rrm_policy.l2, existing)
    return tpl


def check_bounds_consistent(l3: L3Descriptor) -> None:
    """Tightest Min must not exceed tightest Max per (metric, match, scope)."""
    bounds: dict = {}
    for rule in l3.rules:
        key = (rule.metric, rule.match, rule.scope)
        entry = bounds.setdefault(key, {})
        if rule.bound is Bound.MAX:
            entry[Bound.MAX] = min(entry.get(Bound.MAX, rule.value), rule.value)
        else:
            entry[Bound.MIN] = max(entry.get(Bound.MIN, rule.value), rule.value)
    for (metric, match, scope), entry in bounds.items():
        if Bound.MIN in entry and Bound.MAX in entry and entry[Bound.MIN] > entry[Bound.MAX]:
            raise InconsistentBoundsError(
                f"min {entry[Bound.MIN]:g} > max {entry[Bound.MAX]:g} for "
                f"({metric.value}, {scope.value})"
            )


def check_share_headroom(
    cell_list: Sequence[Tuple[int, int]],
    l2: L2Descriptor,
    existing: Iterable[RsiTemplate],
) -> None:
    """WRR shares of all slices sharing any cell must sum to <= 100%."""
    if l2.inter_slice is not InterSliceAlgo.WRR:
        return
    for cell in cell_list:
        total = l2.share_percent or 0.0
        for other in existing:
            ol2 = other.rrm_policy.l2
            if tuple(cell) in other.cell_list and ol2.inter_slice is InterSliceAlgo.WRR:
                total += ol2.share_percent or 0.0
        if total > 100.0:
            raise ShareOverflowError(
                f"WRR shares on cell {tuple(cell)} sum to {total:g}% (> 100%)"
            )


# ----------------------------------------------------------------------
# Provisioning documents
#
# Templates travel as plain JSON-able dicts: the REST body, the CLI file
# format, and the [slices.template] tables of scenario files all share
# this schema (see docs/template.md).

def _doc_get(doc: Mapping, key: str, path: str, required: bool = True, default=None):
    if key not in doc:
        if required:
            raise DocumentError(f"{path}.{key}", "missing required field")
        return default
    return doc[key]


def _match_from_document(pairs, path: str) -> QosMatch:
    if not isinstance(pairs, (list, tuple)) or not pairs:
        raise DocumentError(path, "match must be a nonempty list of [qci, arp] pairs")
    out = []
    for i, pair in enumerate(pairs):
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise DocumentError(f"{path}[{i}]", "expected a [qci, arp] pair")
        qci, arp = pair
        out.append(
            (None if qci in ("*", None) else int(qci), None if arp in ("*", None) else int(arp))
        )
    try:
        return QosMatch.of(*out)
    except PolicyError as exc:
        raise DocumentError(path, str(exc)) from exc


def _rule_from_document(doc: Mapping, path: str) -> CapacityRule:
    metric_name = _doc_get(doc, "metric", path)
    try:
        metric = Metric(metric_name)
    except ValueError:
        raise DocumentError(f"{path}.metric", f"unknown metric {metric_name!r}") from None
    match = _match_from_document(doc.get("match", [["*", "*"]]), f"{path}.match")
    try:
        scope = Scope(_doc_get(doc, "scope", path))
        bound = Bound(_doc_get(doc, "bound", path))
    except ValueError as exc:
        raise DocumentError(path, str(exc)) from None
    try:
        return CapacityRule(metric, match, scope, bound, float(_doc_get(doc, "value", path)))
    except PolicyError as exc:
        raise DocumentError(f"{path}.value", str(exc)) from exc


def rrm_policy_from_document(doc: Mapping, path: str = "rrm_policy") -> RrmPolicy:
    l3_doc = _doc_get(doc, "l3", path, required=False, default={})
    rules = tuple(
        _rule_from_document(r, f"{path}.l3.rules[{i}]")
        for i, r in enumerate(l3_doc.get("rules", []))
    )
    try:
        l3 = L3Descriptor(rules, int(l3_doc.get("averaging_window_ms", 1000)))
    except PolicyError as exc:
        raise DocumentError(f"{path}.l3", str(exc)) from exc

    l2_doc = _doc_get(doc, "l2", path, required=False, default={})
    inter_name = l2_doc.get("inter_slice", "rr")
    try:
        inter = InterSliceAlgo(inter_name)
        intra = IntraSliceAlgo(l2_doc.get("intra_slice", "rr"))
    except ValueError as exc:
        raise DocumentError(f"{path}.l2", str(exc)) from None
    share = l2_doc.get("share_percent")
    try:
        l2 = L2Descriptor(inter, None if share is None else float(share), intra)
    except PolicyError as exc:
        raise DocumentError(f"{path}.l2", str(exc)) from exc

    l1_hex = doc.get("l1_opaque", "")
    try:
        l1 = bytes.fromhex(l1_hex) if l1_hex else b""
    except ValueError as exc:
        raise DocumentError(f"{path}.l1_opaque", "expected a hex string") from exc
    return RrmPolicy(l3, l2, l1)


def template_from_document(doc: Mapping) -> RsiTemplate:
    if not isinstance(doc, Mapping):
        raise DocumentError("template", "expected an object")
    rsi_id = int(_doc_get(doc, "rsi_id", "template"))
    plmns = tuple(str(p) for p in _doc_get(doc, "plmn_list", "template"))
    cells_doc = _doc_get(doc, "cell_list", "template")
    cell_list = []
    for i, c in enumerate(cells_doc):
        try:
            cell_list.append((int(c["enb_id"]), int(c["cell_id"])))
        except (KeyError, TypeError) as exc:
            raise DocumentError(
                f"template.cell_list[{i}]", "expected {enb_id, cell_id}"
            ) from exc
    snssais = []
    for i, s in enumerate(doc.get("snssai_list", [])):
        try:
            snssais.append(
                Snssai(str(s["plmn"]), int(s["sst"]), int(s["sd"]) if "sd" in s else None)
            )
        except (KeyError, TypeError, PolicyError) as exc:
            raise DocumentError(f"template.snssai_list[{i}]", str(exc)) from exc
    nas_ids = []
    for i, n in enumerate(doc.get("nas_id_list", [])):
        try:
            nas_ids.append(NasId.parse(n))
        except PolicyError as exc:
            raise DocumentError(f"template.nas_id_list[{i}]", str(exc)) from exc
    policy = rrm_policy_from_document(
        _doc_get(doc, "rrm_policy", "template", required=False, default={})
    )
    try:
        return RsiTemplate(
            rsi_id=rsi_id,
            plmn_list=plmns,
            cell_list=tuple(cell_list),
            rrm_policy=policy,
            snssai_list=tuple(snssais),
            nas_id_list=tuple(nas_ids),
        )
    except PolicyError as exc:
        raise DocumentError("template", str(exc)) from exc


def _match_to_document(match: QosMatch) -> list:
    pairs = sorted(
        match.pairs, key=lambda p: (p[0] is None, p[0] or 0, p[1] is None, p[1] or 0)
    )
    return [["*" if q is None else q, "*" if a is None else a] for q, a in pairs]


def rrm_policy_to_document(policy: RrmPolicy) -> dict:
    doc: dict = {
        "l3": {
            "averaging_window_ms": policy.l3.averaging_window_ms,
            "rules": [
                {
                    "metric": r.metric.value,
                    "match": _match_to_document(r.match),
                    "scope": r.scope.value,
                    "bound": r.bound.value,
                    "value": r.value,
                }
                for r in policy.l3.rules
            ],
        },
        "l2": {
            "inter_slice": policy.l2.inter_slice.value,
            "intra_slice": policy.l2.intra_slice.value,
        },
    }
    if policy.l2.share_percent is not None:
        doc["l2"]["share_percent"] = policy.l2.share_percent
    if policy.l1_opaque:
        doc["l1_opaque"] = policy.l1_opaque.hex()
    return doc


def template_to_document(tpl: RsiTemplate) -> dict:
    return {
        "rsi_id": tpl.rsi_id,
        "plmn_list": list(tpl.plmn_list),
        "snssai_list": [
            {"plmn": s.plmn, "sst": s.sst, **({"sd": s.sd} if s.sd is not None else {})}
            for s in tpl.snssai_list
        ],
        "cell_list": [{"enb_id": e, "cell_id": c} for e, c in tpl.cell_list],
        "rrm_policy": rrm_policy_to_document(tpl.rrm_policy),
        "nas_id_list": [str(n) for n in tpl.nas_id_list],
    }
