"""Virtual-time scheduling, a wall-clock stand-in, and the link jitter model.

All simulation time is integer nanoseconds so tick arithmetic is exact.
"""

from __future__ import annotations

import heapq
import itertools
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000


def ms_to_ns(ms: float) -> int:
    return int(round(ms * NS_PER_MS))


def s_to_ns(s: float) -> int:
    return int(round(s * NS_PER_S))


@dataclass(order=True)
class ScheduledEvent:
    """Heap entry ordered by (time, priority, insertion order)."""

    time_ns: int
    priority: int
    order: int
    action: Callable[[], object] = field(compare=False)
    label: str = field(compare=False, default="")
    cancelled: bool = field(compare=False, default=False)

    def cancel(self) -> None:
        self.cancelled = True


class Clock(Protocol):
    mode: str

    @property
    def now_ns(self) -> int: ...

    def schedule(self, t_ns: int, action: Callable[[], object], *, priority: int = 0, label: str = "") -> ScheduledEvent: ...

    def run_until(self, t_end_ns: int) -> list[ScheduledEvent]: ...


class VirtualClock:
    """Deterministic discrete-event scheduler.

    Events at the same time run in ascending ``priority``, then in the order
    they were scheduled. Time never moves backwards.
    """

    mode = "virtual"

    def __init__(self, start_ns: int = 0, *, keep_log: bool = False) -> None:
        if start_ns < 0:
            raise ValueError("start_ns must be >= 0")
        self._now = start_ns
        self._queue: list[ScheduledEvent] = []
        self._counter = itertools.count()
        self.keep_log = keep_log
        self.log: list[tuple[int, str]] = []

    @property
    def now_ns(self) -> int:
        return self._now

    @property
    def pending(self) -> int:
        return sum(1 for e in self._queue if not e.cancelled)

    def schedule(self, t_ns: int, action: Callable[[], object], *, priority: int = 0, label: str = "") -> ScheduledEvent:
        t_ns = int(t_ns)
        if t_ns < self._now:
            raise ValueError(f"cannot schedule at {t_ns} ns, now is {self._now} ns")
        event = ScheduledEvent(t_ns, priority, next(self._counter), action, label)
        heapq.heappush(self._queue, event)
        return event

    def schedule_in(self, delay_ns: int, action: Callable[[], object], **kwargs) -> ScheduledEvent:
        return self.schedule(self._now + int(delay_ns), action, **kwargs)

    def next_time(self) -> int | None:
        while self._queue and self._queue[0].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0].time_ns if self._queue else None

    def _dispatch(self, event: ScheduledEvent) -> None:
        self._now = event.time_ns
        if self.keep_log:
            self.log.append((event.time_ns, event.label))
        event.action()

    def run_until(self, t_end_ns: int) -> list[ScheduledEvent]:
        """Dispatch every event with time <= ``t_end_ns``, then advance to it."""
        dispatched = []
        while self._queue and self._queue[0].time_ns <= t_end_ns:
            event = heapq.heappop(self._queue)
            if event.cancelled:
                continue
            self._dispatch(event)
            dispatched.append(event)
        self._now = max(self._now, int(t_end_ns))
        return dispatched

    def run(self, max_events: int | None = None) -> int:
        """Run until the queue drains (or ``max_events`` dispatches)."""
        n = 0
        while self.next_time() is not None and (max_events is None or n < max_events):
            self._dispatch(heapq.heappop(self._queue))
            n += 1
        return n


class WallClock(VirtualClock):
    """Same interface, paced by the host monotonic clock. Best effort only:
    events run late if the host is busy, never early."""

    mode = "wall"

    def __init__(self) -> None:
        super().__init__()
        self._origin = time.monotonic_ns()

    @property
    def now_ns(self) -> int:
        return max(self._now, time.monotonic_ns() - self._origin)

    def schedule(self, t_ns, action, *, priority=0, label=""):
        # late scheduling is normal in wall mode; clamp instead of raising
        return super().schedule(max(int(t_ns), self._now), action, priority=priority, label=label)

    def _sleep_until(self, t_ns: int) -> None:
        delay = t_ns - (time.monotonic_ns() - self._origin)
        if delay > 0:
            time.sleep(delay / NS_PER_S)

    def _dispatch(self, event: ScheduledEvent) -> None:
        self._sleep_until(event.time_ns)
        super()._dispatch(event)

    def run_until(self, t_end_ns: int) -> list[ScheduledEvent]:
        dispatched = super().run_until(t_end_ns)
        self._sleep_until(t_end_ns)
        return dispatched


def make_clock(mode: str) -> VirtualClock:
    if mode == "virtual":
        return VirtualClock()
    if mode == "wall":
        return WallClock()
    raise ValueError(f"unknown clock mode {mode!r}")


# ---------------------------------------------------------------------------
# Latency model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JitterModel:
    """Two-point transit latency: ``base_ms``, or ``base_ms + tail_extra_ms``
    with probability ``tail_prob``."""

    base_ms: float = 22.0
    tail_prob: float = 0.1
    tail_extra_ms: float = 5.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.base_ms < 0:
            raise ValueError("base_ms must be >= 0")
        if not 0.0 <= self.tail_prob <= 1.0:
            raise ValueError("tail_prob must be in [0, 1]")
        if self.tail_extra_ms < 0:
            raise ValueError("tail_extra_ms must be >= 0")

    @classmethod
    def constant(cls, ms: float) -> JitterModel:
        return cls(base_ms=ms, tail_prob=0.0, tail_extra_ms=0.0)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def sample_latency(model: JitterModel, rng: np.random.Generator) -> float:
    """One transit time in milliseconds."""
    # always draw, so the stream position does not depend on tail_prob
    tail = rng.random() < model.tail_prob
    return model.base_ms + model.tail_extra_ms if tail else model.base_ms


@dataclass
class LatencySample:
    seq: int
    t_send_ns: int
    t_arrive_ns: int
    handled_tick: int | None = None
    period_ns: int | None = None

    def __post_init__(self) -> None:
        if self.t_arrive_ns < self.t_send_ns:
            raise ValueError("arrival before send")

    @property
    def transit_ms(self) -> float:
        return (self.t_arrive_ns - self.t_send_ns) / NS_PER_MS

    @property
    def end_to_end_ms(self) -> float | None:
        """Send to the start of the control tick that handled the frame."""
        if self.handled_tick is None or self.period_ns is None:
            return None
        return (self.handled_tick * self.period_ns - self.t_send_ns) / NS_PER_MS


class LinkClosed(ConnectionError):
    pass


class SimLink:
    """One-way in-process stream link with sampled transit latency.

    Delivery is FIFO like a stream socket: a chunk never overtakes an earlier
    one. ``deliver(data, t_arrive_ns)`` runs on the clock at arrival time.
    """

    def __init__(
        self,
        clock: VirtualClock,
        model: JitterModel,
        deliver: Callable[[bytes, int], None],
        *,
        rng: np.random.Generator | None = None,
        fifo: bool = True,
        name: str = "link",
    ) -> None:
        self.clock = clock
        self.model = model
        self.deliver = deliver
        self.rng = rng if rng is not None else model.rng()
        self.fifo = fifo
        self.name = name
        self.closed = False
        self.samples: list[LatencySample] = []
        self._last_arrival = 0

    def close(self) -> None:
        self.closed = True

    def send(self, data: bytes, seq: int = -1) -> LatencySample:
        if self.closed:
            raise LinkClosed(f"{self.name} is closed")
        t_send = self.clock.now_ns
        t_arrive = t_send + ms_to_ns(sample_latency(self.model, self.rng))
        if self.fifo:
            t_arrive = max(t_arrive, self._last_arrival)
            self._last_arrival = t_arrive
        sample = LatencySample(seq, t_send, t_arrive)
        self.samples.append(sample)
        payload = bytes(data)
        self.clock.schedule(t_arrive, lambda: self.deliver(payload, t_arrive), label=f"{self.name}:arrive")
        return sample
