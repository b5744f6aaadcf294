"""Time-triggered 802.11 over a cyclic TDMA schedule.

There is no carrier sense, no backoff and no retransmission. Nodes transmit at
their slot start as read on their own clock; overlap in true time is a
collision that destroys every overlapping frame. An optional enforcement gate
suppresses bursts that leave the sender's slot. It judges the burst on the
global time base, i.e. true time shifted by the median clock error of the up
nodes: clock sync bounds how far nodes drift apart, not how far the ensemble
drifts from true time, and a single faulty clock cannot move the median.

Timing: each frame occupies ``bits / bit_rate + IFS`` microseconds (the IFS is a
trailing gap). On-air intervals are kept as exact reals; arrival events fire
at the next whole microsecond at or after the exact frame end, so interval
bookkeeping is always complete before an arrival is processed.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .simkern import EventKind, NodeClock, Simulator, round_half_up

BROADCAST = "*"


class FrameKind(str, Enum):
    DATA = "data"
    SYNC = "sync"
    COMMAND = "command"


class ScheduleError(ValueError):
    pass


class SyncError(ValueError):
    pass


@dataclass(frozen=True)
class RadioConfig:
    bit_rate: float = 400e6
    ifs_us: float = 1.0
    max_frame_payload: int = 2304
    overhead_bytes: int = 28
    loss_probability: float = 0.0

    def __post_init__(self):
        if not self.bit_rate > 0:
            raise ValueError("bit_rate must be positive")
        if self.ifs_us < 0 or self.overhead_bytes < 0 or self.max_frame_payload <= 0:
            raise ValueError("ifs, overhead and max payload must be non-negative (payload positive)")
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ValueError("loss_probability must lie in [0, 1]")


@dataclass
class Frame:
    src: str
    dst: str
    payload_bytes: int
    overhead_bytes: int = 28
    timestamp: int = 0
    kind: FrameKind = FrameKind.DATA
    replica_index: int = 0
    seq: int = 0
    fragment: int = 0
    fragments: int = 1
    content: bytes = b""
    collided: bool = field(default=False, repr=False)

    @property
    def size(self) -> int:
        return self.payload_bytes + self.overhead_bytes


def _tx_time(size_bytes: int, radio: RadioConfig) -> float:
    return size_bytes * 8 / radio.bit_rate * 1e6 + radio.ifs_us


def frame_tx_time(frame: Frame, radio: RadioConfig) -> float:
    return _tx_time(frame.payload_bytes + frame.overhead_bytes, radio)


def fragment(payload_bytes: int, radio: RadioConfig) -> int:
    if payload_bytes < 0:
        raise ValueError("payload must be non-negative")
    return -(-payload_bytes // radio.max_frame_payload)


def burst_tx_bound(payload_bytes: int, radio: RadioConfig, replication: int = 1) -> float:
    """Time to send a payload as consecutive frames, each carrying per-frame overhead and IFS."""
    n = fragment(payload_bytes, radio)
    if n == 0:
        return 0.0
    full = _tx_time(radio.max_frame_payload + radio.overhead_bytes, radio)
    last = _tx_time(payload_bytes - (n - 1) * radio.max_frame_payload + radio.overhead_bytes, radio)
    return replication * ((n - 1) * full + last)


def calibrate_overhead(payload_bytes: int, target_us: float, radio: RadioConfig,
                       max_overhead: int = 256) -> tuple[int, float, float]:
    """Integer per-frame overhead whose burst bound is closest to ``target_us``.

    Returns ``(overhead_bytes, bound_us, residual_us)`` with residual = bound - target.
    """
    best = None
    for ov in range(max_overhead + 1):
        b = burst_tx_bound(payload_bytes, RadioConfig(radio.bit_rate, radio.ifs_us, radio.max_frame_payload, ov))
        if best is None or abs(b - target_us) < abs(best[1] - target_us):
            best = (ov, b)
    return best[0], best[1], best[1] - target_us


def make_frames(src: str, content: bytes, radio: RadioConfig, kind: FrameKind = FrameKind.DATA,
                seq: int = 0, dst: str = BROADCAST, replication: int = 1) -> list[Frame]:
    """Split ``content`` into frames, repeated ``replication`` times (copies back to back)."""
    n = max(fragment(len(content), radio), 1)
    chunk = radio.max_frame_payload
    frames = []
    for copy in range(replication):
        for i in range(n):
            part = content[i * chunk:(i + 1) * chunk]
            frames.append(Frame(src, dst, len(part), radio.overhead_bytes, 0, kind, copy, seq, i, n, part))
    return frames


@dataclass(frozen=True)
class Slot:
    owner: str
    start: int
    length: int


@dataclass
class TdmaSchedule:
    cycle_length: int
    slots: list[Slot]
    guard_time: int = 50

    def __post_init__(self):
        self.slots = sorted((s if isinstance(s, Slot) else Slot(*s) for s in self.slots), key=lambda s: s.start)
        self.validate()

    def validate(self, max_transmission: Optional[dict[str, float]] = None) -> None:
        """Slots must stay disjoint when each is widened by half a guard on both sides.

        Equivalently consecutive slots, including across the cycle wrap, are at
        least one guard time apart.
        """
        if self.cycle_length <= 0:
            raise ScheduleError("cycle length must be positive")
        if self.guard_time < 0:
            raise ScheduleError("guard time must be non-negative")
        if not self.slots:
            raise ScheduleError("schedule has no slots")
        for s in self.slots:
            if s.length <= 0 or s.start < 0 or s.start + s.length > self.cycle_length:
                raise ScheduleError(f"slot {s} does not fit in the cycle")
        n = len(self.slots)
        for i, a in enumerate(self.slots):
            b = self.slots[(i + 1) % n]
            b_start = b.start + (self.cycle_length if i == n - 1 else 0)
            if a.start + a.length + self.guard_time > b_start:
                raise ScheduleError(f"slots {a} and {b} are closer than the guard time {self.guard_time}")
        if max_transmission:
            for owner, need in max_transmission.items():
                own = self.slots_of(owner)
                if not own:
                    raise ScheduleError(f"node {owner!r} owns no slot")
                if max(s.length for s in own) < need:
                    raise ScheduleError(f"slots of {owner!r} are shorter than its longest burst {need:.2f} us")

    @property
    def owners(self) -> list[str]:
        seen = []
        for s in self.slots:
            if s.owner not in seen:
                seen.append(s.owner)
        return seen

    def slots_of(self, node: str) -> list[Slot]:
        return [s for s in self.slots if s.owner == node]

    def slot_index(self, slot: Slot) -> int:
        return self.slots.index(slot)

    def slot_at(self, t: float) -> Optional[Slot]:
        phase = t % self.cycle_length
        for s in self.slots:
            if s.start <= phase < s.start + s.length:
                return s
        return None

    @classmethod
    def uniform(cls, owners: list[str], cycle_length: int, guard_time: int) -> "TdmaSchedule":
        pitch = cycle_length // len(owners)
        return cls(cycle_length, [Slot(o, i * pitch, pitch - guard_time) for i, o in enumerate(owners)], guard_time)


def next_slot(schedule: TdmaSchedule, node: str, local_now: int) -> int:
    """Earliest start of one of ``node``'s slots at or after ``local_now`` (local time)."""
    own = schedule.slots_of(node)
    if not own:
        raise ScheduleError(f"node {node!r} is not in the schedule")
    cyc = schedule.cycle_length
    best = None
    for s in own:
        k = -(-(local_now - s.start) // cyc)
        t = s.start + k * cyc
        if best is None or t < best:
            best = t
    return best


def own_slot_at(schedule: TdmaSchedule, node: str, local_start: int) -> Slot:
    phase = local_start % schedule.cycle_length
    for s in schedule.slots_of(node):
        if s.start == phase:
            return s
    raise ScheduleError(f"{local_start} is not a slot start of {node!r}")


def estimate_offset(expected_arrival: float, actual_arrival: float) -> float:
    """Positive when the frame arrives later than this node's clock predicts."""
    return actual_arrival - expected_arrival


def fta_sync(estimates: list[float], k: int) -> int:
    """Fault-tolerant average: drop the k smallest and k largest, average the rest."""
    if k < 0:
        raise SyncError("k must be non-negative")
    if len(estimates) <= 2 * k:
        raise SyncError(f"need more than {2 * k} estimates, got {len(estimates)}")
    kept = sorted(estimates)[k:len(estimates) - k]
    return round_half_up(sum(kept) / len(kept))


class ClockSync:
    """Per-node offset estimates from timestamped sync frames, corrected by FTA."""

    def __init__(self, clocks: dict[str, NodeClock], radio: RadioConfig, k: int = 1):
        self.clocks = clocks
        self.radio = radio
        self.k = k
        self.estimates: dict[str, list[float]] = {n: [] for n in clocks}
        self.corrections: list[tuple[int, str, int]] = []

    def observe(self, receiver: str, frame: Frame, arrival_exact: float) -> float:
        expected = frame.timestamp + frame_tx_time(frame, self.radio)
        actual = self.clocks[receiver].local_time(arrival_exact)
        est = estimate_offset(expected, actual)
        self.estimates[receiver].append(est)
        return est

    def resync(self, node: str, now: int) -> Optional[int]:
        ests = self.estimates[node] + [0.0]
        self.estimates[node] = []
        if len(ests) <= 2 * self.k:
            return None
        corr = fta_sync(ests, self.k)
        self.clocks[node].adjust(corr, now)
        self.corrections.append((now, node, corr))
        return corr


@dataclass
class Burst:
    src: str
    frames: list[Frame]
    start: float
    end: float
    slot_index: int
    suppressed: bool = False

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class _OnAir:
    src: str
    start: float
    end: float
    frame: Frame
    burst: int


TRACE_HEADER = ["true_time_us", "event", "src", "dst", "frame_kind", "bytes", "slot_index"]


class Network:
    """Shared broadcast medium driven by a :class:`Simulator`."""

    def __init__(self, sim: Simulator, schedule: TdmaSchedule, radio: RadioConfig,
                 clocks: dict[str, NodeClock], enforcement: bool = True,
                 rng: Optional[np.random.Generator] = None):
        self.sim = sim
        self.schedule = schedule
        self.radio = radio
        self.clocks = clocks
        self.enforcement = enforcement
        self.rng = rng if rng is not None else sim.rng("net-loss")
        self.handlers: dict[str, Callable[[Frame, float], None]] = {}
        self.up: dict[str, bool] = {n: True for n in clocks}
        self.bursts: list[Burst] = []
        self.collisions: list[tuple[int, str, str]] = []
        self.violations: list[tuple[int, str]] = []
        self.rows: list[tuple] = []
        self._on_air: list[_OnAir] = []

    def attach(self, node: str, handler: Callable[[Frame, float], None]) -> None:
        self.handlers[node] = handler

    def _row(self, t, event, src, dst, frame_kind, nbytes, slot_index):
        self.rows.append((int(t), event, src, dst, frame_kind, nbytes, slot_index))

    def global_time(self, t: float) -> float:
        """True time ``t`` as read on the global time base (median clock of the up nodes)."""
        errs = sorted(c.error(t) for n, c in self.clocks.items() if self.up.get(n, False))
        if not errs:
            return t
        mid = len(errs) // 2
        return t + (errs[mid] if len(errs) % 2 else (errs[mid - 1] + errs[mid]) / 2.0)

    def _allowed(self, src: str, start: float, end: float) -> bool:
        """Gate on the global time base, each slot widened by half a guard per side."""
        half = self.schedule.guard_time / 2.0
        cyc = self.schedule.cycle_length
        ls = self.global_time(start)
        le = ls + (end - start)
        for s in self.schedule.slots_of(src):
            c = math.floor((ls - s.start + half) / cyc)
            lo = c * cyc + s.start - half
            if ls >= lo and le <= lo + s.length + 2 * half:
                return True
        return False

    def _slot_index_at(self, src: str, t: float) -> int:
        s = self.schedule.slot_at(self.global_time(t) + self.schedule.guard_time / 2.0)
        return self.schedule.slot_index(s) if s is not None else -1

    def transmit(self, node: str, frames: list[Frame], at: Optional[int] = None) -> Optional[Burst]:
        """Send ``frames`` back to back now, or at local time ``at`` of ``node``."""
        if at is not None:
            t_true = math.ceil(self.clocks[node].to_true(at) - 1e-9)
            self.sim.schedule(max(t_true, self.sim.now), node, EventKind.TIMER,
                              lambda ev: self.transmit(node, frames), detail=f"tx {len(frames)} frames")
            return None
        if not self.up.get(node, False) or not frames:
            return None
        now = self.sim.now
        radio = self.radio
        durations = [frame_tx_time(f, radio) for f in frames]
        start = float(now)
        end = start + sum(durations)
        slot_index = self._slot_index_at(node, start)
        burst = Burst(node, frames, start, end, slot_index)
        if self.enforcement and not self._allowed(node, start, end):
            burst.suppressed = True
            self.violations.append((now, node))
            self._row(now, "violation", node, BROADCAST, frames[0].kind.value, sum(f.size for f in frames), slot_index)
            self.bursts.append(burst)
            return burst
        bid = len(self.bursts)
        self.bursts.append(burst)
        self._on_air = [a for a in self._on_air if a.end > start]
        t = start
        clock = self.clocks[node]
        hit_bursts = set()
        for f, d in zip(frames, durations):
            if f.kind is FrameKind.SYNC:
                f.timestamp = clock.local_time(t)
            air = _OnAir(node, t, t + d, f, bid)
            for other in self._on_air:
                if other.src != node and other.start < air.end and air.start < other.end:
                    other.frame.collided = True
                    f.collided = True
                    if other.burst not in hit_bursts:
                        hit_bursts.add(other.burst)
                        self.collisions.append((now, other.src, node))
                        self._row(now, "collision", other.src, node, f.kind.value, f.size, slot_index)
            self._on_air.append(air)
            self._row(round_half_up(t), "tx_start", node, f.dst, f.kind.value, f.size, slot_index)
            arrive = t + d
            self.sim.schedule(math.ceil(arrive - 1e-9), node, EventKind.FRAME_ARRIVAL, self._arrive,
                              detail=f"{f.kind.value} seq={f.seq} frag={f.fragment} copy={f.replica_index}",
                              data=(f, arrive, slot_index))
            t = arrive
        return burst

    def _arrive(self, ev) -> None:
        frame, arrive, slot_index = ev.data
        now = self.sim.now
        self._row(now, "tx_end", frame.src, frame.dst, frame.kind.value, frame.size, slot_index)
        for node in self.handlers:
            if node == frame.src or not self.up.get(node, False):
                continue
            if frame.collided:
                self._row(now, "drop", frame.src, node, frame.kind.value, frame.size, slot_index)
                continue
            if self.radio.loss_probability > 0 and self.rng.random() < self.radio.loss_probability:
                self._row(now, "drop", frame.src, node, frame.kind.value, frame.size, slot_index)
                continue
            self._row(now, "rx", frame.src, node, frame.kind.value, frame.size, slot_index)
            self.handlers[node](frame, arrive)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        w.writerows(self.rows)
        return buf.getvalue()


def on_air_overlaps(bursts: list[Burst]) -> list[tuple[int, int]]:
    """Pairs of delivered bursts from distinct nodes whose intervals intersect (sweep over start times)."""
    live = sorted((b.start, b.end, i, b.src) for i, b in enumerate(bursts) if not b.suppressed)
    out = []
    active: list[tuple[float, int, str]] = []
    for start, end, i, src in live:
        active = [a for a in active if a[0] > start]
        for a_end, j, a_src in active:
            if a_src != src:
                out.append((j, i))
        active.append((end, i, src))
    return out
