"""Scheduler semantics: partitioning, intra-slice policies, CQI mapping,
accounting, and the PRB-level invariants."""

from random import Random

import pytest

from sdransim import mac
from sdransim.mac import (
    DEFAULT_CQI_TABLE,
    BadCqiError,
    CellScheduler,
    UeSched,
    check_cqi_table,
    cqi_to_bits,
    inter_slice_partition,
    intra_slice_schedule,
)
from sdransim.policy import InterSliceAlgo, IntraSliceAlgo, L2Descriptor

WRR60 = L2Descriptor(InterSliceAlgo.WRR, 60.0, IntraSliceAlgo.RR)
WRR40 = L2Descriptor(InterSliceAlgo.WRR, 40.0, IntraSliceAlgo.RR)
RR = L2Descriptor()


# ----------------------------------------------------------------------
# inter_slice_partition

def test_wrr_both_backlogged():
    quotas, _ = inter_slice_partition([(1, WRR60), (2, WRR40)], 50, [1, 2])
    assert quotas == {1: 30, 2: 20}


def test_wrr_idle_slice_donates_when_work_conserving():
    quotas, _ = inter_slice_partition([(1, WRR60), (2, WRR40)], 50, [1])
    assert quotas == {1: 50, 2: 0}


def test_wrr_no_donation_when_not_work_conserving():
    quotas, _ = inter_slice_partition(
        [(1, WRR60), (2, WRR40)], 50, [1], work_conserving=False
    )
    assert quotas == {1: 30, 2: 20}


def test_rr_three_slices_rotating_remainder():
    entries = [(1, RR), (2, RR), (3, RR)]
    cursor = 0
    totals = {1: 0, 2: 0, 3: 0}
    per_tti = []
    for _ in range(3):
        quotas, cursor = inter_slice_partition(entries, 50, [1, 2, 3], cursor=cursor)
        per_tti.append(quotas)
        for rsi, q in quotas.items():
            totals[rsi] += q
    assert sorted(per_tti[0].values()) == [16, 17, 17]
    assert totals == {1: 50, 2: 50, 3: 50}


def test_mixed_wrr_and_rr_split_headroom():
    quotas, _ = inter_slice_partition(
        [(1, WRR60), (2, RR), (3, RR)], 50, [], work_conserving=False
    )
    assert quotas == {1: 30, 2: 10, 3: 10}


def test_all_idle_keeps_base_quotas():
    quotas, _ = inter_slice_partition([(1, WRR60), (2, WRR40)], 50, [])
    assert quotas == {1: 30, 2: 20}


# ----------------------------------------------------------------------
# intra_slice_schedule

def ue(rnti, cqi, backlog_bits, rsi=1):
    u = UeSched(rnti, rsi, cqi, float(DEFAULT_CQI_TABLE[cqi - 1]))
    u.queues[mac.DL][1] = backlog_bits
    return u


def test_rr_fair_split():
    ues = [ue(1, 10, 10**9), ue(2, 10, 10**9)]
    grants, leftover, _ = intra_slice_schedule(IntraSliceAlgo.RR, 20, ues)
    assert grants[1][0] == 10 and grants[2][0] == 10
    assert leftover == 0


def test_max_ci_takes_all():
    ues = [ue(1, 15, 10**9), ue(2, 3, 10**9)]
    grants, _, _ = intra_slice_schedule(IntraSliceAlgo.MAX_CI, 50, ues)
    assert grants == {1: [50, 50 * DEFAULT_CQI_TABLE[14]]}


def test_max_ci_tie_breaks_lowest_rnti():
    ues = [ue(5, 9, 10**9), ue(3, 9, 10**9)]
    grants, _, _ = intra_slice_schedule(IntraSliceAlgo.MAX_CI, 10, ues)
    assert grants == {3: [10, 10 * DEFAULT_CQI_TABLE[8]]}


def test_grants_capped_by_queue():
    bits = DEFAULT_CQI_TABLE[9]
    ues = [ue(1, 10, 3 * bits + 1)]
    grants, leftover, _ = intra_slice_schedule(IntraSliceAlgo.RR, 50, ues)
    assert grants[1][0] == 4  # 3 full PRBs + 1 for the tail bit
    assert grants[1][1] == 3 * bits + 1
    assert leftover == 46


def test_pf_matches_rr_under_identical_channels():
    # long-run throughput split within 1% of even over 10,000 TTIs
    cell = CellScheduler(50)
    cell.add_slice(1, L2Descriptor(InterSliceAlgo.WRR, 100.0, IntraSliceAlgo.PF))
    cell.add_ue(1, 1, 10)
    cell.add_ue(1, 2, 10)
    served = {1: 0, 2: 0}
    for _ in range(10_000):
        cell.enqueue(1, 1, 10**6)
        cell.enqueue(2, 1, 10**6)
        step = cell.step_tti()
        for g in step.dl.grants:
            served[g.rnti] += g.prbs
    total = served[1] + served[2]
    assert total == 50 * 10_000
    assert abs(served[1] - served[2]) / total < 0.01


# ----------------------------------------------------------------------
# cqi_to_bits

def test_zero_prbs_zero_bits():
    for cqi in range(1, 16):
        assert cqi_to_bits(cqi, 0) == 0


def test_bad_cqi():
    with pytest.raises(BadCqiError):
        cqi_to_bits(0, 10)
    with pytest.raises(BadCqiError):
        cqi_to_bits(16, 10)


def test_table_monotonicity_enforced_on_load():
    with pytest.raises(ValueError):
        check_cqi_table([10] * 7 + [5] + [10] * 7)
    with pytest.raises(ValueError):
        check_cqi_table([10] * 14)


def test_default_table_supports_video_stream():
    # one 3 Mb/s stream fits a full 10 MHz cell at top CQI with load < 100%
    per_second_capacity = DEFAULT_CQI_TABLE[14] * 50 * 1000
    assert per_second_capacity >= 3_000_000
    assert 3_000_000 / per_second_capacity < 1.0


# ----------------------------------------------------------------------
# step_tti and accounting

def test_empty_cell_all_zero():
    cell = CellScheduler(50)
    cell.add_slice(1, WRR60)
    step = cell.step_tti()
    assert step.dl.grants == ()
    assert sum(step.dl.quotas.values()) <= 50


def _oracle_used_per_second(rate_bps, n_prb, bits_per_prb, seconds, start_tti=0):
    """Independent straight-line replay of a single-UE cell."""
    acc = 0
    queue = 0
    used = []
    for _ in range(seconds * 1000):
        acc += rate_bps
        new_bytes, acc = divmod(acc, 8000)
        queue += 8 * new_bytes
        grant = 0
        while grant < n_prb and queue > 0:
            queue -= min(bits_per_prb, queue)
            grant += 1
        used.append(grant)
    return [sum(used[i * 1000:(i + 1) * 1000]) for i in range(seconds)]


def test_cbr_drain_matches_bruteforce_oracle():
    rate, cqi, seconds = 3_000_000, 10, 5
    cell = CellScheduler(50)
    cell.add_slice(1, L2Descriptor(InterSliceAlgo.WRR, 100.0, IntraSliceAlgo.RR))
    cell.add_ue(1, 0x46, cqi)
    acc = 0
    got = []
    for second in range(seconds):
        for _ in range(1000):
            acc += rate
            n_bytes, acc = divmod(acc, 8000)
            if n_bytes:
                cell.enqueue(0x46, 1, n_bytes)
            cell.step_tti()
        got.append(cell.interval_rollup()[1]["dl_prb_used"])
    want = _oracle_used_per_second(rate, 50, DEFAULT_CQI_TABLE[cqi - 1], seconds)
    assert got == want


def test_two_ues_strictly_increase_usage():
    def run(n_ues):
        cell = CellScheduler(50)
        cell.add_slice(1, L2Descriptor(InterSliceAlgo.WRR, 100.0, IntraSliceAlgo.RR))
        for i in range(n_ues):
            cell.add_ue(1, 0x46 + i, 10)
        for _ in range(1000):
            for i in range(n_ues):
                cell.enqueue(0x46 + i, 1, 375)
            cell.step_tti()
        return cell.interval_rollup()[1]["dl_prb_used"]

    one, two = run(1), run(2)
    assert two > one


def test_prb_conservation_random_cells():
    rng = Random(99)
    for _ in range(40):
        n_prb = rng.randint(6, 50)
        wc = rng.random() < 0.5
        cell = CellScheduler(n_prb, work_conserving=wc)
        shares = [30.0, 30.0, 40.0]
        for rsi in range(1, rng.randint(2, 4)):
            cell.add_slice(rsi, L2Descriptor(
                InterSliceAlgo.WRR, shares[rsi - 1],
                rng.choice(list(IntraSliceAlgo)),
            ))
            for u in range(rng.randint(0, 3)):
                rnti = rsi * 16 + u
                cell.add_ue(rsi, rnti, rng.randint(1, 15))
        for tti in range(50):
            for rnti in list(cell.ues):
                if rng.random() < 0.6:
                    cell.enqueue(rnti, 1, rng.randint(0, 4000))
            step = cell.step_tti()
            granted = sum(g.prbs for g in step.dl.grants)
            assert granted <= n_prb
            assert sum(step.dl.quotas.values()) <= n_prb
            seen = [g.rnti for g in step.dl.grants]
            assert len(seen) == len(set(seen))
            if not wc:
                per_slice = {}
                for g in step.dl.grants:
                    per_slice[g.rsi_id] = per_slice.get(g.rsi_id, 0) + g.prbs
                for rsi, prbs in per_slice.items():
                    assert prbs <= step.dl.quotas[rsi]


def test_work_conservation():
    # any nonempty queue means at least one PRB granted that TTI
    cell = CellScheduler(50)
    cell.add_slice(1, WRR60)
    cell.add_slice(2, WRR40)
    cell.add_ue(2, 0x50, 1)
    cell.enqueue(0x50, 1, 10)
    step = cell.step_tti()
    assert sum(g.prbs for g in step.dl.grants) >= 1


def test_wrr_enforcement_window_without_work_conservation():
    # saturated slices: over any window each slice's grant total equals its
    # share of the cell within one PRB per TTI
    cell = CellScheduler(50, work_conserving=False)
    cell.add_slice(1, WRR60)
    cell.add_slice(2, WRR40)
    cell.add_ue(1, 1, 10)
    cell.add_ue(2, 2, 10)
    window = 200
    got = {1: 0, 2: 0}
    for _ in range(window):
        cell.enqueue(1, 1, 10**6)
        cell.enqueue(2, 1, 10**6)
        step = cell.step_tti()
        for g in step.dl.grants:
            got[g.rnti] += g.prbs
    assert abs(got[1] - 0.6 * 50 * window) <= window
    assert abs(got[2] - 0.4 * 50 * window) <= window


def test_isolation_under_load_changes():
    """Work-conserving off: slice A's usage is bit-identical no matter what
    slice B offers."""

    def run(b_rate_bytes):
        cell = CellScheduler(50, work_conserving=False)
        cell.add_slice(1, WRR60)
        cell.add_slice(2, WRR40)
        cell.add_ue(1, 1, 10)
        cell.add_ue(2, 2, 10)
        usage = []
        for second in range(3):
            for _ in range(1000):
                cell.enqueue(1, 1, 900)
                if b_rate_bytes:
                    cell.enqueue(2, 1, b_rate_bytes)
                cell.step_tti()
            usage.append(cell.interval_rollup()[1]["dl_prb_used"])
        return usage

    assert run(0) == run(400) == run(4000)


def test_queue_stability_below_capacity():
    # CBR below the slice's service rate keeps the queue bounded over
    # 100,000 TTIs
    cell = CellScheduler(50)
    cell.add_slice(1, L2Descriptor(InterSliceAlgo.WRR, 100.0, IntraSliceAlgo.RR))
    cell.add_ue(1, 1, 10)
    acc = 0
    max_queue = 0
    for _ in range(100_000):
        acc += 3_000_000
        n_bytes, acc = divmod(acc, 8000)
        cell.enqueue(1, 1, n_bytes)
        cell.step_tti()
        max_queue = max(max_queue, cell.queue_bits(1))
    capacity_per_tti = 50 * DEFAULT_CQI_TABLE[9]
    assert max_queue <= 2 * max(3_000, capacity_per_tti)


def test_borrowing_lets_used_exceed_assigned():
    # slice 1 barely loaded, slice 2 saturated: 2 borrows 1's leftovers, so
    # its used PRBs exceed its assigned quota for the interval
    cell = CellScheduler(50)
    cell.add_slice(1, WRR60)
    cell.add_slice(2, WRR40)
    cell.add_ue(1, 1, 10)
    cell.add_ue(2, 2, 10)
    for _ in range(100):
        cell.enqueue(1, 1, 40)        # ~1 PRB worth
        cell.enqueue(2, 1, 10**6)     # saturated
        cell.step_tti()
    rollup = cell.interval_rollup()
    assert rollup[2]["dl_prb_used"] > rollup[2]["dl_prb_assigned"]
    assert rollup[1]["dl_prb_used"] < rollup[1]["dl_prb_assigned"]
    # cell-wide usage per interval never exceeds capacity
    total_used = sum(r["dl_prb_used"] for r in rollup.values())
    assert total_used <= 50 * 100


def test_interval_rollup_paper_basis():
    cell = CellScheduler(50)
    cell.add_slice(1, L2Descriptor(InterSliceAlgo.WRR, 100.0, IntraSliceAlgo.RR))
    cell.add_ue(1, 1, 15)
    # feed exactly 1745 PRBs worth of traffic at top CQI
    bits = 1745 * DEFAULT_CQI_TABLE[14]
    cell.enqueue(1, 1, bits // 8)
    for _ in range(1000):
        cell.step_tti()
    rollup = cell.interval_rollup(("paper-basis", 10_000))
    assert rollup[1]["dl_prb_used"] == 1745
    assert rollup[1]["load_percent"] == pytest.approx(17.45)


def test_interval_rollup_zero_and_full():
    cell = CellScheduler(50)
    cell.add_slice(1, L2Descriptor(InterSliceAlgo.WRR, 100.0, IntraSliceAlgo.RR))
    for _ in range(100):
        cell.step_tti()
    assert cell.interval_rollup()[1]["load_percent"] == 0.0
    cell.add_ue(1, 1, 10)
    for _ in range(100):
        cell.enqueue(1, 1, 10**6)
        cell.step_tti()
    assert cell.interval_rollup()[1]["load_percent"] == pytest.approx(100.0)


def test_ul_counters_mirror_when_configured():
    cell = CellScheduler(50)
    cell.add_slice(1, L2Descriptor(InterSliceAlgo.WRR, 100.0, IntraSliceAlgo.RR))
    cell.add_ue(1, 1, 10)
    for _ in range(10):
        cell.enqueue(1, 1, 375, mac.UL)
        cell.step_tti()
    rollup = cell.interval_rollup()
    assert rollup[1]["ul_prb_used"] > 0
    assert rollup[1]["dl_prb_used"] == 0


def test_inactive_slice_gets_no_quota():
    cell = CellScheduler(50)
    cell.add_slice(1, WRR60)
    cell.add_slice(2, WRR40)
    cell.add_ue(1, 1, 10)
    cell.add_ue(2, 2, 10)
    cell.set_active(2, False)
    cell.enqueue(1, 1, 10**6)
    cell.enqueue(2, 1, 10**6)
    step = cell.step_tti()
    assert step.dl.quotas.get(2, 0) == 0
    assert all(g.rsi_id == 1 for g in step.dl.grants)
