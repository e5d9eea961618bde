"""Deterministic discrete-event kernel and latency modeling.

Simulated time is integer milliseconds. A single global event queue drives
every component (controller, eNBs, UEs, TTI ticks); ties are broken by
insertion order, so a run is fully determined by (scenario, seed).
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from random import Random
from typing import Callable, Optional


class EventHandle:
    """Cancellation token for a scheduled callback."""

    __slots__ = ("cancelled",)

    def __init__(self) -> None:
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class EventLoop:
    """Min-heap event loop over integer-millisecond simulated time."""

    def __init__(self) -> None:
        self.now = 0
        self._seq = 0
        self._heap: list[tuple[int, int, EventHandle, Callable[[], None]]] = []

    def schedule(self, delay_ms: int, fn: Callable[[], None]) -> EventHandle:
        return self.schedule_at(self.now + int(delay_ms), fn)

    def schedule_at(self, t_ms: int, fn: Callable[[], None]) -> EventHandle:
        if t_ms < self.now:
            raise ValueError(f"cannot schedule in the past ({t_ms} < {self.now})")
        handle = EventHandle()
        self._seq += 1
        heapq.heappush(self._heap, (int(t_ms), self._seq, handle, fn))
        return handle

    def run_until(self, t_end_ms: int) -> None:
        """Run every event with time <= t_end_ms, then set now = t_end_ms."""
        while self._heap and self._heap[0][0] <= t_end_ms:
            t, _, handle, fn = heapq.heappop(self._heap)
            self.now = t
            if not handle.cancelled:
                fn()
        self.now = max(self.now, t_end_ms)

    def run_all(self, limit: int = 10_000_000) -> None:
        steps = 0
        while self._heap:
            t, _, handle, fn = heapq.heappop(self._heap)
            self.now = t
            if not handle.cancelled:
                fn()
            steps += 1
            if steps > limit:
                raise RuntimeError("event-loop step limit exceeded")


@dataclass(frozen=True)
class Delay:
    """A configurable delay: constant, or integer-uniform jitter in [lo, hi]."""

    lo: int
    hi: int

    def __post_init__(self) -> None:
        if self.lo < 0 or self.hi < self.lo:
            raise ValueError(f"bad delay bounds [{self.lo}, {self.hi}]")

    @property
    def mean(self) -> float:
        return (self.lo + self.hi) / 2

    def draw(self, rng: Random) -> int:
        if self.lo == self.hi:
            return self.lo
        return rng.randint(self.lo, self.hi)

    @staticmethod
    def const(v: int) -> "Delay":
        return Delay(v, v)

    @staticmethod
    def parse(value) -> "Delay":
        """Accept 7, [5, 9], or {"lo": 5, "hi": 9}."""
        if isinstance(value, Delay):
            return value
        if isinstance(value, int):
            return Delay.const(value)
        if isinstance(value, (list, tuple)) and len(value) == 2:
            return Delay(int(value[0]), int(value[1]))
        if isinstance(value, dict):
            return Delay(int(value["lo"]), int(value["hi"]))
        raise ValueError(f"cannot parse delay spec {value!r}")


# Every hop and processing step in the attach/signalling pipeline, by name.
_DELAY_NAMES = (
    "ue_enb",            # UE <-> eNB radio-leg message latency
    "enb_epc",           # eNB <-> EPC link latency
    "enb_ctrl",          # eNB <-> controller link latency
    "enb_proc",          # eNB handling of an RRC/S1 message
    "ue_proc",           # UE processing during RRC connection setup
    "ue_reconf_proc",    # UE processing of RRC connection reconfiguration
    "epc_attach_proc",   # EPC: initial UE message -> initial context setup request
    "epc_release_proc",  # EPC: context setup failure -> release command
    "enb_ctx_proc",      # eNB context setup + security + E-RAB configuration
    "enb_ac_local",      # eNB-local admission evaluation
    "enb_esc_prep",      # eNB work before emitting an AC request
    "enb_esc_resume",    # eNB work after the AC response arrives
    "ctrl_ac_proc",      # controller admission decision processing
    "ctrl_proc",         # controller handling of any other southbound frame
)


@dataclass(frozen=True)
class LatencyProfile:
    """Named delay table for every hop and processing step."""

    name: str
    delays: dict

    def __post_init__(self) -> None:
        missing = [n for n in _DELAY_NAMES if n not in self.delays]
        if missing:
            raise ValueError(f"latency profile missing delays: {missing}")

    def draw(self, name: str, rng: Random) -> int:
        return self.delays[name].draw(rng)

    def mean(self, name: str) -> float:
        return self.delays[name].mean

    def centralized_extra_ms(self) -> float:
        """Mean extra registration time on the centralized AC path."""
        return sum(
            self.mean(n)
            for n in ("enb_esc_prep", "enb_ctrl", "ctrl_ac_proc", "enb_ctrl", "enb_esc_resume")
        )

    def ac_roundtrip_ms(self) -> float:
        """Mean AC request emission -> AC response receipt interval."""
        return self.mean("enb_ctrl") + self.mean("ctrl_ac_proc") + self.mean("enb_ctrl")


# Fitted so that, over repeated runs, mean RRC setup ~= 50 ms and mean whole
# registration ~= 410 ms (no AC) / 428 ms (local AC) / 619 ms (centralized AC),
# with the AC request/response exchange pinned at exactly 112 ms.
_PAPER_CALIBRATED = {
    "ue_enb": Delay(13, 17),
    "enb_epc": Delay(22, 28),
    "enb_ctrl": Delay.const(26),
    "enb_proc": Delay(9, 11),
    "ue_proc": Delay(9, 11),
    "ue_reconf_proc": Delay(45, 55),
    "epc_attach_proc": Delay(130, 150),
    "epc_release_proc": Delay.const(20),
    "enb_ctx_proc": Delay(85, 95),
    "enb_ac_local": Delay(15, 21),
    "enb_esc_prep": Delay(35, 45),
    "enb_esc_resume": Delay(34, 44),
    "ctrl_ac_proc": Delay.const(60),
    "ctrl_proc": Delay.const(2),
}


def paper_calibrated_profile() -> LatencyProfile:
    return LatencyProfile("paper-calibrated", dict(_PAPER_CALIBRATED))


def zero_jitter_profile() -> LatencyProfile:
    """The calibrated profile with every delay collapsed to its mean."""
    delays = {n: Delay.const(round(d.mean)) for n, d in _PAPER_CALIBRATED.items()}
    return LatencyProfile("zero-jitter", delays)


def profile_from_config(cfg) -> LatencyProfile:
    """Build a profile from a scenario document value.

    Accepts the builtin names or a table of per-delay overrides on top of
    the zero-jitter baseline.
    """
    if cfg is None or cfg == "paper-calibrated":
        return paper_calibrated_profile()
    if cfg == "zero-jitter":
        return zero_jitter_profile()
    if isinstance(cfg, dict):
        base = dict(zero_jitter_profile().delays)
        for key, value in cfg.items():
            if key not in base:
                raise ValueError(f"unknown latency name {key!r}")
            base[key] = Delay.parse(value)
        return LatencyProfile("custom", base)
    raise ValueError(f"cannot parse latency profile {cfg!r}")


class SimLink:
    """One direction of a reliable, ordered channel with per-message latency.

    Delivery preserves ordering (FIFO) even when per-message latency draws
    would reorder: a message never arrives before an earlier one.
    """

    def __init__(
        self,
        loop: EventLoop,
        latency: Callable[[], int],
        deliver: Callable[[bytes], None],
        tap: Optional[Callable[[int, bytes], None]] = None,
    ) -> None:
        self.loop = loop
        self.latency = latency
        self.deliver = deliver
        self.tap = tap
        self.drop_filter: Optional[Callable[[bytes], bool]] = None
        self._last_arrival = 0
        self._open = True

    def send(self, data: bytes) -> None:
        if not self._open:
            return
        if self.drop_filter is not None and self.drop_filter(data):
            return
        arrival = max(self.loop.now + self.latency(), self._last_arrival)
        self._last_arrival = arrival
        self.loop.schedule_at(arrival, lambda: self._arrive(data))

    def _arrive(self, data: bytes) -> None:
        if self._open:
            if self.tap is not None:
                self.tap(self.loop.now, data)
            self.deliver(data)

    def close(self) -> None:
        self._open = False


class SimConnection:
    """Duplex connection between an agent and the controller.

    Each side gets a `send` half; closing either side schedules the peer's
    on_close callback (transport errors are modeled as connection loss).
    """

    def __init__(
        self,
        loop: EventLoop,
        latency: Callable[[], int],
        tap_a_to_b: Optional[Callable[[int, bytes], None]] = None,
        tap_b_to_a: Optional[Callable[[int, bytes], None]] = None,
    ):
        self.loop = loop
        self._a_to_b = SimLink(loop, latency, self._deliver_b, tap_a_to_b)
        self._b_to_a = SimLink(loop, latency, self._deliver_a, tap_b_to_a)
        self.on_a_receive: Callable[[bytes], None] = lambda data: None
        self.on_b_receive: Callable[[bytes], None] = lambda data: None
        self.on_a_close: Callable[[], None] = lambda: None
        self.on_b_close: Callable[[], None] = lambda: None
        self._closed = False

    def _deliver_a(self, data: bytes) -> None:
        self.on_a_receive(data)

    def _deliver_b(self, data: bytes) -> None:
        self.on_b_receive(data)

    def send_from_a(self, data: bytes) -> None:
        self._a_to_b.send(data)

    def send_from_b(self, data: bytes) -> None:
        self._b_to_a.send(data)

    @property
    def closed(self) -> bool:
        return self._closed

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._a_to_b.close()
        self._b_to_a.close()
        on_a, on_b = self.on_a_close, self.on_b_close
        self.loop.schedule(0, on_a)
        self.loop.schedule(0, on_b)
