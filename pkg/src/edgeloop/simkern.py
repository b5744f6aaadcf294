"""Discrete-event kernel: integer-microsecond time, event queue, node clocks, seeded streams.

Simulated true time is an integer count of microseconds. Events are ordered by
``(fire_at, sequence)`` where ``sequence`` is the insertion counter, so two
events never compare equal and simultaneous events fire in insertion order.
"""

from __future__ import annotations

import csv
import hashlib
import heapq
import io
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np

SimTime = int


class EventKind(str, Enum):
    FRAME_ARRIVAL = "frame-arrival"
    SLOT_START = "slot-start"
    TASK_RELEASE = "task-release"
    CONTAINER_DONE = "container-done"
    CRASH = "crash"
    REJUVENATE = "rejuvenate"
    TIMER = "timer"


class SchedulingError(ValueError):
    """Raised when an event is scheduled before the current simulated time."""


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


@dataclass(order=True)
class Event:
    fire_at: SimTime
    sequence: int
    target: str = field(compare=False)
    kind: EventKind = field(compare=False)
    action: Optional[Callable[["Event"], None]] = field(default=None, compare=False, repr=False)
    detail: str = field(default="", compare=False)
    data: object = field(default=None, compare=False, repr=False)


@dataclass
class NodeClock:
    """Local clock of one node relative to simulated true time.

    ``offset`` is local minus true time in microseconds at ``last_sync``;
    ``drift`` is the rate error in parts per million.
    """

    offset: float = 0.0
    drift: float = 0.0
    last_sync: SimTime = 0

    def __post_init__(self):
        if self.drift <= -1e6:
            raise ValueError("drift must exceed -1e6 ppm for a monotone clock")

    def exact(self, true_time: float) -> float:
        return true_time + self.offset + self.drift * (true_time - self.last_sync) / 1e6

    def local_time(self, true_time: float) -> int:
        return round_half_up(self.exact(true_time))

    def to_true(self, local: float) -> float:
        """Inverse of :meth:`exact`."""
        rate = 1.0 + self.drift / 1e6
        return (local - self.offset + self.drift * self.last_sync / 1e6) / rate

    def error(self, true_time: float) -> float:
        return self.exact(true_time) - true_time

    def adjust(self, correction: float, at: SimTime) -> None:
        """Subtract ``correction`` microseconds from the clock at true time ``at``."""
        self.offset = self.exact(at) - at - correction
        self.last_sync = at


def local_time(clock: NodeClock, true_time: SimTime) -> int:
    return clock.local_time(true_time)


def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest(), "little")


def derive_rng(root_seed: int, label: str, index: int = 0) -> np.random.Generator:
    """Independent stream for one stochastic consumer.

    The stream depends only on ``(root_seed, label, index)``, never on how many
    other streams were created before it.
    """
    ss = np.random.SeedSequence(entropy=int(root_seed), spawn_key=(_label_key(label), int(index)))
    return np.random.Generator(np.random.PCG64(ss))


class Simulator:
    """Single-threaded event loop with an optional structured event log."""

    def __init__(self, seed: int = 0, trace: bool = False):
        self.seed = seed
        self.now: SimTime = 0
        self._queue: list[Event] = []
        self._next_seq = 0
        self._cancelled: set[int] = set()
        self.trace = trace
        self.log: list[tuple[int, str, str, str]] = []
        self.processed = 0

    def schedule(
        self,
        fire_at: SimTime,
        target: str,
        kind: EventKind,
        action: Optional[Callable[[Event], None]] = None,
        detail: str = "",
        data: object = None,
    ) -> int:
        fire_at = int(fire_at)
        if fire_at < self.now:
            raise SchedulingError(f"event at t={fire_at} is in the past (now={self.now})")
        seq = self._next_seq
        self._next_seq += 1
        heapq.heappush(self._queue, Event(fire_at, seq, target, kind, action, detail, data))
        return seq

    def schedule_in(self, delay: int, target: str, kind: EventKind, action=None, detail: str = "", data=None) -> int:
        return self.schedule(self.now + int(delay), target, kind, action, detail, data)

    def cancel(self, event_id: int) -> None:
        self._cancelled.add(event_id)

    def pending(self) -> int:
        return len(self._queue)

    def pop(self) -> Optional[Event]:
        while self._queue:
            ev = heapq.heappop(self._queue)
            if ev.sequence in self._cancelled:
                self._cancelled.discard(ev.sequence)
                continue
            return ev
        return None

    def step(self) -> Optional[Event]:
        ev = self.pop()
        if ev is None:
            return None
        assert ev.fire_at >= self.now, "time went backwards"
        self.now = ev.fire_at
        self.processed += 1
        if self.trace:
            self.log.append((ev.fire_at, ev.target, ev.kind.value, ev.detail))
        if ev.action is not None:
            ev.action(ev)
        return ev

    def run(self, until: Optional[SimTime] = None, stop: Optional[Callable[[], bool]] = None) -> None:
        while self._queue:
            if until is not None and self._queue[0].fire_at > until:
                self.now = max(self.now, until)
                break
            self.step()
            if stop is not None and stop():
                break

    def rng(self, label: str, index: int = 0) -> np.random.Generator:
        return derive_rng(self.seed, label, index)

    def event_log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true_time_us", "node", "kind", "detail"])
        w.writerows(self.log)
        return buf.getvalue()
