"""The NRT ("Vision PC") side: per-entity goal lanes and arm request modes.

Base, gripper and arm goals each travel on their own lane. A lane sends its
next goal only once the current one is terminal, so lanes serialize their own
goals but run concurrently with each other. Replies are routed back to goal
handles by goal seq.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .protocol import (
    Ack,
    ArmRefSample,
    Body,
    Feedback,
    Frame,
    FrameParser,
    GoalArmTrajectory,
    GoalBase,
    GoalGripper,
    ProtocolError,
    Result,
    Side,
    Status,
    encode,
)
from .simkit import NS_PER_S, LinkClosed, VirtualClock
from .trajmath import JointTrajectory, linear_resample


class GoalState(enum.IntEnum):
    PENDING = 0
    ACTIVE = 1
    SUCCEEDED = 2
    FAILED = 3
    TIMED_OUT = 4

    @property
    def terminal(self) -> bool:
        return self >= GoalState.SUCCEEDED


class Link(Protocol):
    closed: bool

    def send(self, data: bytes, seq: int = -1) -> object: ...


@dataclass
class GoalHandle:
    lane: str
    body: Body | None
    submit_ns: int
    seq: int | None = None
    state: GoalState = GoalState.PENDING
    status: int | None = None
    sent_ns: int | None = None
    ack_ns: int | None = None
    result_ns: int | None = None
    deadline_ns: int | None = None
    feedback: list[tuple[int, float]] = field(default_factory=list)
    samples: list[GoalHandle] = field(default_factory=list)
    rate_hz: float | None = None
    stream: StreamPlan | None = field(default=None, repr=False)

    @property
    def terminal(self) -> bool:
        return self.state.terminal

    @property
    def succeeded(self) -> bool:
        return self.state is GoalState.SUCCEEDED

    def advance(self, state: GoalState, status: int | None = None) -> None:
        if self.terminal or state <= self.state:
            raise ValueError(f"illegal goal transition {self.state.name} -> {state.name}")
        self.state = state
        if status is not None:
            self.status = status


@dataclass(frozen=True, eq=False)
class StreamPlan:
    positions: np.ndarray
    side: Side
    action_window: bool


@dataclass(frozen=True)
class SingleTrajectory:
    pass


@dataclass(frozen=True)
class Stream:
    rate_hz: float
    interpolate: bool = False

    def __post_init__(self) -> None:
        if not self.rate_hz > 0:
            raise ValueError("rate_hz must be > 0")


ArmRequestMode = SingleTrajectory | Stream


def stream_positions(traj: JointTrajectory, rate_hz: float, interpolate: bool) -> np.ndarray:
    """Positions a stream emits: the linearly interpolated grid, or raw waypoints.

    The interpolated grid holds exactly floor(D * rate) + 1 samples.
    """
    if not rate_hz > 0:
        raise ValueError("rate_hz must be > 0")
    if not interpolate:
        return traj.positions.copy()
    n = int(np.floor(traj.duration * rate_hz + 1e-9)) + 1
    points = linear_resample(traj, 1.0 / rate_hz)[:n]
    return np.array([p.q for p in points])


def emission_offsets_ns(n: int, rate_hz: float) -> list[int]:
    return [int(round(i * NS_PER_S / rate_hz)) for i in range(n)]


class NrtClient:
    """Goal lanes over a byte link, driven by a (virtual or wall) clock.

    With ``action_window`` set, each streamed sample is a goal that succeeds
    iff its Result arrives before the next sample is issued. Without it
    samples are fire-and-forget.
    """

    LANES = ("base", "gripper", "arm")

    def __init__(self, clock: VirtualClock, link: Link | None = None, *, side: Side = Side.LEFT) -> None:
        self.clock = clock
        self.link = link
        self.side = side
        self.parser = FrameParser()
        self._seq = 0
        self._queues: dict[str, deque[GoalHandle]] = {lane: deque() for lane in self.LANES}
        self._active: dict[str, GoalHandle | None] = {lane: None for lane in self.LANES}
        self._by_seq: dict[int, GoalHandle] = {}
        self.sent: list[Frame] = []
        self.decode_errors = 0

    # -- wire ---------------------------------------------------------------

    @property
    def connected(self) -> bool:
        return self.link is not None and not self.link.closed

    def _send(self, body: Body) -> Frame:
        if not self.connected:
            raise LinkClosed("link is not connected")
        self._seq += 1
        frame = Frame(self._seq, self.clock.now_ns, body)
        self.link.send(encode(frame), frame.seq)
        self.sent.append(frame)
        return frame

    def on_bytes(self, data: bytes, t_arrival_ns: int) -> None:
        self.parser.feed(data)
        while True:
            try:
                for frame in self.parser.frames():
                    self._route(frame.body, t_arrival_ns)
                return
            except ProtocolError:
                self.decode_errors += 1

    def _route(self, body: Body, t_ns: int) -> None:
        handle = self._by_seq.get(getattr(body, "goal_seq", -1))
        if handle is None or handle.terminal:
            return
        if isinstance(body, Ack):
            handle.ack_ns = t_ns
        elif isinstance(body, Feedback):
            handle.feedback.append((t_ns, body.progress))
        elif isinstance(body, Result):
            handle.result_ns = t_ns
            if handle.deadline_ns is not None and t_ns >= handle.deadline_ns:
                handle.advance(GoalState.TIMED_OUT, body.status)
            elif body.status == Status.OK:
                handle.advance(GoalState.SUCCEEDED, body.status)
            else:
                handle.advance(GoalState.FAILED, body.status)
            self._finished(handle)

    # -- lanes --------------------------------------------------------------

    @staticmethod
    def lane_of(body: Body) -> str:
        if isinstance(body, GoalBase):
            return "base"
        if isinstance(body, GoalGripper):
            return "gripper"
        if isinstance(body, GoalArmTrajectory):
            return "arm"
        raise TypeError(f"{type(body).__name__} is not a goal")

    def submit(self, goal: Body) -> GoalHandle:
        """Queue ``goal`` on its entity lane and start it if the lane is idle."""
        if not self.connected:
            raise LinkClosed("link is not connected")
        handle = GoalHandle(self.lane_of(goal), goal, self.clock.now_ns)
        self._enqueue(handle)
        return handle

    def _enqueue(self, handle: GoalHandle) -> None:
        self._queues[handle.lane].append(handle)
        self._dispatch(handle.lane)

    def _dispatch(self, lane: str) -> None:
        if self._active[lane] is not None or not self._queues[lane]:
            return
        handle = self._queues[lane].popleft()
        self._active[lane] = handle
        handle.advance(GoalState.ACTIVE)
        if handle.stream is not None:
            self._start_stream(handle)
            return
        frame = self._send(handle.body)
        handle.seq = frame.seq
        handle.sent_ns = frame.t_send_ns
        self._by_seq[frame.seq] = handle

    def _finished(self, handle: GoalHandle) -> None:
        if self._active.get(handle.lane) is handle:
            self._active[handle.lane] = None
            self._dispatch(handle.lane)

    def active(self, lane: str) -> GoalHandle | None:
        return self._active[lane]

    def queued(self, lane: str) -> int:
        return len(self._queues[lane])

    # -- arm request modes --------------------------------------------------

    def send_single_trajectory(self, traj: JointTrajectory, side: Side | None = None) -> GoalHandle:
        side = self.side if side is None else side
        goal = GoalArmTrajectory(
            side,
            traj.dof,
            tuple(float(t) for t in traj.times),
            tuple(tuple(float(x) for x in row) for row in traj.positions),
        )
        return self.submit(goal)

    def stream_arm_refs(
        self,
        traj: JointTrajectory,
        rate_hz: float,
        interpolate: bool,
        side: Side | None = None,
        *,
        action_window: bool = True,
    ) -> GoalHandle:
        """Emit ArmRefSample frames at ``rate_hz``; returns the stream's handle.

        Per-sample handles are in ``handle.samples``; the stream handle
        succeeds once every sample has been issued and its window closed.
        """
        if not self.connected:
            raise LinkClosed("link is not connected")
        if traj is None or len(traj) == 0:
            raise ValueError("empty trajectory")
        positions = stream_positions(traj, rate_hz, interpolate)
        plan = StreamPlan(positions, self.side if side is None else side, action_window)
        handle = GoalHandle("arm", None, self.clock.now_ns, rate_hz=float(rate_hz), stream=plan)
        self._enqueue(handle)
        return handle

    def request_arm(self, traj: JointTrajectory, mode: ArmRequestMode, **kwargs) -> GoalHandle:
        if isinstance(mode, Stream):
            return self.stream_arm_refs(traj, mode.rate_hz, mode.interpolate, **kwargs)
        return self.send_single_trajectory(traj, **kwargs)

    def _start_stream(self, handle: GoalHandle) -> None:
        positions, side, window = handle.stream.positions, handle.stream.side, handle.stream.action_window
        t0 = self.clock.now_ns
        offsets = emission_offsets_ns(len(positions), handle.rate_hz)
        period_ns = int(round(NS_PER_S / handle.rate_hz))
        dof = positions.shape[1]

        def emit(i: int) -> None:
            if not self.connected:
                handle.advance(GoalState.FAILED)
                self._finished(handle)
                return
            frame = self._send(ArmRefSample(side, dof, tuple(float(x) for x in positions[i])))
            if i + 1 < len(offsets):
                deadline = t0 + offsets[i + 1]
                self.clock.schedule(deadline, lambda: emit(i + 1), label="nrt:stream")
            else:
                deadline = frame.t_send_ns + period_ns
            if window:
                sample = GoalHandle("arm", frame.body, frame.t_send_ns, seq=frame.seq, state=GoalState.ACTIVE)
                sample.sent_ns = frame.t_send_ns
                sample.deadline_ns = deadline
                sample.rate_hz = handle.rate_hz
                handle.samples.append(sample)
                self._by_seq[frame.seq] = sample
                # the window closes before the next issuance at the same instant
                self.clock.schedule(deadline, lambda: self._close_window(sample), priority=-1, label="nrt:window")
            if i + 1 == len(offsets):
                self.clock.schedule(deadline, lambda: self._end_stream(handle), label="nrt:stream-end")

        emit(0)

    def _close_window(self, sample: GoalHandle) -> None:
        if not sample.terminal:
            sample.advance(GoalState.TIMED_OUT)

    def _end_stream(self, handle: GoalHandle) -> None:
        if not handle.terminal:
            handle.advance(GoalState.SUCCEEDED, Status.OK)
            self._finished(handle)

    # -- waiting ------------------------------------------------------------

    def await_result(self, handle: GoalHandle, timeout: float) -> GoalState:
        """Advance the clock until ``handle`` is terminal or ``timeout`` seconds pass."""
        deadline = self.clock.now_ns + int(round(timeout * NS_PER_S))

        def expire() -> None:
            if not handle.terminal:
                if handle.state is GoalState.PENDING:
                    self._queues[handle.lane].remove(handle)
                handle.advance(GoalState.TIMED_OUT)
                self._finished(handle)

        timer = self.clock.schedule(deadline, expire, priority=100, label="nrt:timeout")
        while not handle.terminal:
            nxt = self.clock.next_time()
            if nxt is None:
                break
            self.clock.run(max_events=1)
        timer.cancel()
        return handle.state
