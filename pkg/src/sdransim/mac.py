"""Per-TTI radio resource allocation with slice awareness.

Every 1 ms TTI the cell's PRBs are first partitioned between slices
(inter-slice: RR equal split, or WRR by configured share), then each
slice's PRBs are granted to its backlogged UEs (intra-slice: RR ring,
PF, or max C/I), PRB by PRB, at whole-PRB resolution. A UE is never
granted more than what drains its queues; unused PRBs return to a
work-conserving pool that other backlogged slices may borrow from, so a
slice's used PRBs can exceed its assigned quota within an interval.

Accounting per slice per direction: `prb_assigned` accumulates the
partition quota, `prb_used` the PRBs that actually carried data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .policy import InterSliceAlgo, IntraSliceAlgo, L2Descriptor


class BadCqiError(ValueError):
    pass


# Bits per PRB per TTI, indexed by CQI 1..15. A monotone placeholder table
# (see docs/cqi-table.md); replaceable per scenario.
DEFAULT_CQI_TABLE: Tuple[int, ...] = (
    16, 24, 40, 64, 96, 128, 160, 208, 256, 304, 360, 424, 488, 552, 616,
)

DL = "dl"
UL = "ul"


def check_cqi_table(table: Sequence[int]) -> Tuple[int, ...]:
    table = tuple(int(v) for v in table)
    if len(table) != 15:
        raise ValueError("CQI table needs exactly 15 entries")
    if any(v <= 0 for v in table):
        raise ValueError("CQI table entries must be positive")
    if any(b < a for a, b in zip(table, table[1:])):
        raise ValueError("CQI table must be monotone nondecreasing")
    return table


def cqi_to_bits(cqi: int, prbs: int, table: Sequence[int] = DEFAULT_CQI_TABLE) -> int:
    """Achievable bits in one TTI for `prbs` PRBs at channel quality `cqi`."""
    if not 1 <= cqi <= 15:
        raise BadCqiError(f"cqi {cqi} out of range 1..15")
    return prbs * table[cqi - 1]


def inter_slice_partition(
    entries: Sequence[Tuple[int, L2Descriptor]],
    n_prb: int,
    backlogged: Sequence[int],
    work_conserving: bool = True,
    cursor: int = 0,
) -> Tuple[Dict[int, int], int]:
    """Split the cell's PRBs between slices for one TTI.

    `entries` lists (rsi_id, l2 descriptor) for every schedulable slice;
    `backlogged` the rsi_ids with queued data. WRR slices get
    floor(share% * n_prb); RR slices split the unclaimed headroom
    equally. With work conservation on, idle slices donate their quota
    and all leftover PRBs go one-by-one, rotating with `cursor`, to
    backlogged slices; otherwise leftovers idle. Returns (quota per
    rsi_id, advanced cursor).
    """
    entries = sorted(entries, key=lambda e: e[0])
    backlogged_set = set(backlogged)
    quotas: Dict[int, int] = {}
    rr_ids = [rsi for rsi, l2 in entries if l2.inter_slice is InterSliceAlgo.RR]
    wrr_total = 0
    for rsi, l2 in entries:
        if l2.inter_slice is InterSliceAlgo.WRR:
            quotas[rsi] = int(l2.share_percent * n_prb // 100)
            wrr_total += quotas[rsi]
    if rr_ids:
        headroom = max(n_prb - wrr_total, 0)
        each = headroom // len(rr_ids)
        for rsi in rr_ids:
            quotas[rsi] = each
    leftover = n_prb - sum(quotas.values())

    if work_conserving:
        targets = sorted(rsi for rsi in quotas if rsi in backlogged_set)
        if targets:
            for rsi in list(quotas):
                if rsi not in backlogged_set:
                    leftover += quotas[rsi]
                    quotas[rsi] = 0
            for _ in range(leftover):
                quotas[targets[cursor % len(targets)]] += 1
                cursor += 1
    return quotas, cursor


@dataclass
class UeSched:
    """Per-UE radio state the scheduler works from."""

    rnti: int
    rsi_id: int
    cqi: int
    pf_avg_rate: float
    queues: Dict[str, Dict[int, int]] = field(
        default_factory=lambda: {DL: {}, UL: {}}
    )

    def backlog(self, direction: str) -> int:
        return sum(self.queues[direction].values())

    def drain(self, direction: str, bits: int) -> None:
        """Serve `bits`, emptying lower-numbered DRB queues first."""
        for drb_id in sorted(self.queues[direction]):
            if bits <= 0:
                break
            take = min(bits, self.queues[direction][drb_id])
            self.queues[direction][drb_id] -= take
            bits -= take


def _pick(
    algo: IntraSliceAlgo,
    eligible: List[UeSched],
    table: Sequence[int],
    cursor: int,
    all_ues: List[UeSched],
) -> Tuple[UeSched, int]:
    """Choose the UE for the next PRB; ties break on lowest RNTI."""
    if algo is IntraSliceAlgo.RR:
        n = len(all_ues)
        eligible_set = {u.rnti for u in eligible}
        for k in range(n):
            ue = all_ues[(cursor + k) % n]
            if ue.rnti in eligible_set:
                return ue, cursor + k + 1
        raise AssertionError("no eligible UE")  # pragma: no cover
    if algo is IntraSliceAlgo.PF:
        best = max(
            eligible,
            key=lambda u: (table[u.cqi - 1] / max(u.pf_avg_rate, 1e-9), -u.rnti),
        )
        return best, cursor
    best = max(eligible, key=lambda u: (table[u.cqi - 1], -u.rnti))
    return best, cursor


def intra_slice_schedule(
    algo: IntraSliceAlgo,
    quota: int,
    ues: Sequence[UeSched],
    table: Sequence[int] = DEFAULT_CQI_TABLE,
    cursor: int = 0,
    direction: str = DL,
    remaining: Optional[Dict[int, int]] = None,
) -> Tuple[Dict[int, List[int]], int, int]:
    """Grant up to `quota` PRBs to the slice's UEs, PRB by PRB.

    Returns ({rnti: [prbs, bits]}, leftover PRBs, advanced RR cursor).
    Grants stop once every queue is drained; callers pass `remaining`
    (rnti -> bits still queued) to share drain state across passes,
    otherwise it is snapshotted from the UE queues.
    """
    all_ues = sorted(ues, key=lambda u: u.rnti)
    if remaining is None:
        remaining = {u.rnti: u.backlog(direction) for u in all_ues}
    grants: Dict[int, List[int]] = {}
    granted = 0
    for _ in range(quota):
        eligible = [u for u in all_ues if remaining.get(u.rnti, 0) > 0]
        if not eligible:
            break
        ue, cursor = _pick(algo, eligible, table, cursor, all_ues)
        bits = min(table[ue.cqi - 1], remaining[ue.rnti])
        remaining[ue.rnti] -= bits
        entry = grants.setdefault(ue.rnti, [0, 0])
        entry[0] += 1
        entry[1] += bits
        granted += 1
    return grants, quota - granted, cursor


@dataclass(frozen=True)
class Grant:
    rsi_id: int
    rnti: int
    prbs: int
    bits: int


@dataclass(frozen=True)
class TtiAllocation:
    """One TTI's outcome for one direction."""

    quotas: Dict[int, int]
    grants: Tuple[Grant, ...]


@dataclass(frozen=True)
class TtiStep:
    tti: int
    dl: TtiAllocation
    ul: TtiAllocation


@dataclass
class _SliceState:
    rsi_id: int
    l2: L2Descriptor
    window_ms: int
    active: bool = True
    rr_cursor: Dict[str, int] = field(default_factory=lambda: {DL: 0, UL: 0})
    assigned: Dict[str, int] = field(default_factory=lambda: {DL: 0, UL: 0})
    used: Dict[str, int] = field(default_factory=lambda: {DL: 0, UL: 0})
    bits_served: Dict[str, int] = field(default_factory=lambda: {DL: 0, UL: 0})
    # (tti, prbs, bits) samples for the averaging-window counters
    window: List[Tuple[int, int, int]] = field(default_factory=list)


PF_EWMA_TTIS = 100


class CellScheduler:
    """Owns one cell's scheduling state; stepped once per TTI by its eNB."""

    def __init__(
        self,
        n_prb: int,
        cqi_table: Sequence[int] = DEFAULT_CQI_TABLE,
        work_conserving: bool = True,
    ):
        if n_prb <= 0:
            raise ValueError("n_prb must be positive")
        self.n_prb = n_prb
        self.table = check_cqi_table(cqi_table)
        self.work_conserving = work_conserving
        self.tti = 0
        self.slices: Dict[int, _SliceState] = {}
        self.ues: Dict[int, UeSched] = {}
        self._inter_cursor = {DL: 0, UL: 0}
        self._pool_cursor = {DL: 0, UL: 0}
        self._interval_ttis = 0
        self._ul_active = False

    # -- registry -------------------------------------------------------

    def add_slice(self, rsi_id: int, l2: L2Descriptor, window_ms: int = 1000) -> None:
        if rsi_id in self.slices:
            raise ValueError(f"slice {rsi_id} already scheduled")
        self.slices[rsi_id] = _SliceState(rsi_id, l2, window_ms)

    def remove_slice(self, rsi_id: int) -> None:
        self.slices.pop(rsi_id, None)
        for rnti in [r for r, u in self.ues.items() if u.rsi_id == rsi_id]:
            del self.ues[rnti]

    def set_policy(self, rsi_id: int, l2: L2Descriptor, window_ms: Optional[int] = None) -> None:
        state = self.slices[rsi_id]
        state.l2 = l2
        if window_ms is not None:
            state.window_ms = window_ms

    def set_active(self, rsi_id: int, active: bool) -> None:
        self.slices[rsi_id].active = active

    def add_ue(self, rsi_id: int, rnti: int, cqi: int) -> None:
        if rnti in self.ues:
            raise ValueError(f"rnti {rnti:#x} already scheduled")
        if not 1 <= cqi <= 15:
            raise BadCqiError(f"cqi {cqi} out of range")
        self.ues[rnti] = UeSched(rnti, rsi_id, cqi, float(self.table[cqi - 1]))

    def remove_ue(self, rnti: int) -> None:
        self.ues.pop(rnti, None)

    def set_cqi(self, rnti: int, cqi: int) -> None:
        if not 1 <= cqi <= 15:
            raise BadCqiError(f"cqi {cqi} out of range")
        self.ues[rnti].cqi = cqi

    def enqueue(self, rnti: int, drb_id: int, n_bytes: int, direction: str = DL) -> None:
        queues = self.ues[rnti].queues[direction]
        queues[drb_id] = queues.get(drb_id, 0) + 8 * n_bytes
        if direction == UL:
            self._ul_active = True

    def queue_bits(self, rnti: int, direction: str = DL) -> int:
        return self.ues[rnti].backlog(direction)

    # -- scheduling -----------------------------------------------------

    def _slice_ues(self, rsi_id: int) -> List[UeSched]:
        return sorted(
            (u for u in self.ues.values() if u.rsi_id == rsi_id),
            key=lambda u: u.rnti,
        )

    def _allocate(self, direction: str) -> TtiAllocation:
        schedulable = sorted(r for r, s in self.slices.items() if s.active)
        entries = [(r, self.slices[r].l2) for r in schedulable]
        backlogged = [
            r
            for r in schedulable
            if any(u.backlog(direction) > 0 for u in self._slice_ues(r))
        ]
        quotas, self._inter_cursor[direction] = inter_slice_partition(
            entries,
            self.n_prb,
            backlogged,
            self.work_conserving,
            self._inter_cursor[direction],
        )

        remaining = {u.rnti: u.backlog(direction) for u in self.ues.values()}
        per_ue: Dict[int, List[int]] = {}
        pool = 0
        for rsi in schedulable:
            state = self.slices[rsi]
            grants, leftover, state.rr_cursor[direction] = intra_slice_schedule(
                state.l2.intra_slice,
                quotas.get(rsi, 0),
                self._slice_ues(rsi),
                self.table,
                state.rr_cursor[direction],
                direction,
                remaining,
            )
            pool += leftover
            for rnti, (prbs, bits) in grants.items():
                entry = per_ue.setdefault(rnti, [0, 0])
                entry[0] += prbs
                entry[1] += bits

        if self.work_conserving:
            while pool > 0:
                needy = sorted(
                    rsi
                    for rsi in schedulable
                    if any(remaining.get(u.rnti, 0) > 0 for u in self._slice_ues(rsi))
                )
                if not needy:
                    break
                rsi = needy[self._pool_cursor[direction] % len(needy)]
                self._pool_cursor[direction] += 1
                state = self.slices[rsi]
                grants, _, state.rr_cursor[direction] = intra_slice_schedule(
                    state.l2.intra_slice,
                    1,
                    self._slice_ues(rsi),
                    self.table,
                    state.rr_cursor[direction],
                    direction,
                    remaining,
                )
                pool -= 1
                for rnti, (prbs, bits) in grants.items():
                    entry = per_ue.setdefault(rnti, [0, 0])
                    entry[0] += prbs
                    entry[1] += bits

        grant_list = []
        for rnti in sorted(per_ue):
            prbs, bits = per_ue[rnti]
            ue = self.ues[rnti]
            ue.drain(direction, bits)
            grant_list.append(Grant(ue.rsi_id, rnti, prbs, bits))

        for rsi in schedulable:
            state = self.slices[rsi]
            used = sum(g.prbs for g in grant_list if g.rsi_id == rsi)
            bits = sum(g.bits for g in grant_list if g.rsi_id == rsi)
            state.assigned[direction] += quotas.get(rsi, 0)
            state.used[direction] += used
            state.bits_served[direction] += bits
            if direction == DL:
                state.window.append((self.tti, used, bits))
                horizon = self.tti - state.window_ms
                while state.window and state.window[0][0] <= horizon:
                    state.window.pop(0)
        return TtiAllocation(quotas, tuple(grant_list))

    def step_tti(self) -> TtiStep:
        """Run one 1 ms TTI: partition, grant, drain, account."""
        dl = self._allocate(DL)
        if self._ul_active:
            ul = self._allocate(UL)
        else:
            ul = TtiAllocation({r: 0 for r in self.slices}, ())
        step = TtiStep(self.tti, dl, ul)
        self._update_pf(step)
        self.tti += 1
        self._interval_ttis += 1
        return step

    # -- accounting -----------------------------------------------------

    def window_stats(self, rsi_id: int) -> Tuple[float, float]:
        """(radio load %, served bit rate b/s) over the slice's averaging
        window, from downlink samples."""
        state = self.slices[rsi_id]
        if not state.window:
            return 0.0, 0.0
        span = min(state.window_ms, self.tti) or 1
        prbs = sum(s[1] for s in state.window)
        bits = sum(s[2] for s in state.window)
        load = 100.0 * prbs / (self.n_prb * span)
        return load, bits * 1000.0 / span

    def interval_rollup(self, accounting_base=None) -> Dict[int, dict]:
        """Collect and reset per-slice interval counters.

        `accounting_base`: None or "per-tti-capacity" divides used PRBs by
        n_prb x elapsed TTIs; ("paper-basis", divisor) divides by the
        configured divisor.
        """
        ttis = self._interval_ttis
        if accounting_base in (None, "per-tti-capacity"):
            base = self.n_prb * max(ttis, 1)
        elif isinstance(accounting_base, (tuple, list)) and accounting_base[0] == "paper-basis":
            base = int(accounting_base[1])
        else:
            raise ValueError(f"unknown accounting base {accounting_base!r}")
        out = {}
        for rsi in sorted(self.slices):
            state = self.slices[rsi]
            out[rsi] = {
                "dl_prb_assigned": state.assigned[DL],
                "dl_prb_used": state.used[DL],
                "ul_prb_assigned": state.assigned[UL],
                "ul_prb_used": state.used[UL],
                "load_percent": 100.0 * state.used[DL] / base,
                "interval_ttis": ttis,
            }
            state.assigned = {DL: 0, UL: 0}
            state.used = {DL: 0, UL: 0}
            state.bits_served = {DL: 0, UL: 0}
        self._interval_ttis = 0
        return out

    def _update_pf(self, step: TtiStep) -> None:
        """EWMA update of every UE's average served rate, once per TTI."""
        served = {g.rnti: g.bits for g in step.dl.grants}
        a = 1.0 - 1.0 / PF_EWMA_TTIS
        b = 1.0 / PF_EWMA_TTIS
        for ue in self.ues.values():
            ue.pf_avg_rate = max(a * ue.pf_avg_rate + b * served.get(ue.rnti, 0), 1e-9)
