"""The RT ("Motion PC") side of the bridge.

An ingestion task decodes frames and drops them into a :class:`Mailbox`
tagged with the control tick that will handle them. The control task runs
every 5 ms: it turns mailbox contents into per-arm joint references (quintic
resampling for whole trajectories, zero-order hold for streamed samples) and
drives a 1 kHz servo model with the linearly upsampled reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

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
from .simkit import NS_PER_S, LatencySample, VirtualClock
from .trajmath import DEFAULT_DOF, JointTrajectory, assign_waypoint_derivatives, build_spline, sample_times

CONTROL_PERIOD_NS = 5_000_000
MOTOR_PERIOD_NS = 1_000_000
MAX_BASE_SPEED = 3.5 / 3.6  # m/s
# Control ticks run after comms events scheduled for the same instant.
TICK_PRIORITY = 10


def quantize_arrival(t_arrival_ns: int, period_ns: int = CONTROL_PERIOD_NS) -> int:
    """Index of the first control tick at or after ``t_arrival_ns``."""
    if period_ns <= 0:
        raise ValueError("period must be > 0")
    return -(-int(t_arrival_ns) // int(period_ns))


# ---------------------------------------------------------------------------
# Mailbox
# ---------------------------------------------------------------------------


@dataclass
class MailboxEntry:
    frame: Frame
    t_arrival_ns: int
    handled_tick: int


def entity_key(body: Body) -> str | None:
    if isinstance(body, (GoalArmTrajectory, ArmRefSample)):
        return f"arm:{Side(body.side).name.lower()}"
    if isinstance(body, GoalGripper):
        return f"gripper:{Side(body.side).name.lower()}"
    if isinstance(body, GoalBase):
        return "base"
    return None


class Mailbox:
    """Latest-value handoff between ingestion and control, guarded by seq.

    Entries become visible at their handled tick. Writes with a seq not above
    the last accepted one for that entity are dropped.
    """

    def __init__(self) -> None:
        self._slots: dict[str, list[MailboxEntry]] = {}
        self.last_seq: dict[str, int] = {}
        self.stale_dropped = 0

    def put(self, key: str, entry: MailboxEntry) -> bool:
        if entry.frame.seq <= self.last_seq.get(key, -1):
            self.stale_dropped += 1
            return False
        self.last_seq[key] = entry.frame.seq
        self._slots.setdefault(key, []).append(entry)
        return True

    def take(self, key: str, tick: int) -> list[MailboxEntry]:
        """Remove and return the entries visible at ``tick``, oldest first."""
        slot = self._slots.get(key)
        if not slot:
            return []
        visible = [e for e in slot if e.handled_tick <= tick]
        if visible:
            self._slots[key] = [e for e in slot if e.handled_tick > tick]
        return visible

    def peek(self, key: str) -> MailboxEntry | None:
        slot = self._slots.get(key)
        return slot[-1] if slot else None


def comms_ingest(
    mailbox: Mailbox, frame: Frame, t_arrival_ns: int, period_ns: int = CONTROL_PERIOD_NS
) -> MailboxEntry | None:
    """Store ``frame`` for the tick that will handle it; None if not stored."""
    key = entity_key(frame.body)
    if key is None:
        return None
    entry = MailboxEntry(frame, int(t_arrival_ns), quantize_arrival(t_arrival_ns, period_ns))
    return entry if mailbox.put(key, entry) else None


# ---------------------------------------------------------------------------
# Servo
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ServoParams:
    omega_n: float = 40.0  # rad/s
    zeta: float = 1.0
    # Feed the reference slope into the damping term (tracking PD servo).
    velocity_feedforward: bool = True

    def __post_init__(self) -> None:
        if not self.omega_n > 0:
            raise ValueError("omega_n must be > 0")
        if not self.zeta > 0:
            raise ValueError("zeta must be > 0")


@dataclass(frozen=True, eq=False)
class ServoState:
    theta: np.ndarray
    theta_dot: np.ndarray
    params: ServoParams = ServoParams()

    @classmethod
    def at_rest(cls, q, params: ServoParams = ServoParams()) -> ServoState:
        q = np.array(q, dtype=float)
        return cls(q, np.zeros_like(q), params)


def motor_step(servo: ServoState, reference, dt: float = 1e-3, ref_velocity=0.0) -> ServoState:
    """Advance the joint model one motor period (semi-implicit Euler).

    ``theta_dd = wn^2 (ref - theta) + 2 zeta wn (ref_velocity - theta_dot)``;
    with ``ref_velocity = 0`` this is the plain critically damped plant.
    """
    wn = servo.params.omega_n
    accel = wn * wn * (reference - servo.theta) + 2.0 * servo.params.zeta * wn * (ref_velocity - servo.theta_dot)
    theta_dot = servo.theta_dot + accel * dt
    theta = servo.theta + theta_dot * dt
    return ServoState(theta, theta_dot, servo.params)


# ---------------------------------------------------------------------------
# Base and grippers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BaseState:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    wz: float = 0.0

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)


def clamp_base_velocity(vx: float, vy: float, limit: float = MAX_BASE_SPEED) -> tuple[float, float]:
    speed = math.hypot(vx, vy)
    if speed <= limit:
        return vx, vy
    scale = limit / speed
    return vx * scale, vy * scale


def base_step(state: BaseState, goal: GoalBase | None, dt: float) -> BaseState:
    """Integrate a body-frame velocity command; linear speed is clamped."""
    if goal is None:
        return replace(state, vx=0.0, vy=0.0, wz=0.0)
    vx, vy = clamp_base_velocity(goal.vx, goal.vy)
    wz = goal.wz
    c, s = math.cos(state.yaw), math.sin(state.yaw)
    return BaseState(
        x=state.x + (c * vx - s * vy) * dt,
        y=state.y + (s * vx + c * vy) * dt,
        yaw=state.yaw + wz * dt,
        vx=vx,
        vy=vy,
        wz=wz,
    )


def gripper_step(position: float, goal: GoalGripper | None, dt: float, rate: float = 2.0) -> float:
    """Slew toward the goal position at ``rate`` per second, within [0, 1]."""
    if goal is None:
        return position
    target = min(max(goal.position, 0.0), 1.0)
    step = rate * dt
    if abs(target - position) <= step + 1e-12:
        return target
    return position + math.copysign(step, target - position)


# ---------------------------------------------------------------------------
# Motion generation
# ---------------------------------------------------------------------------


@dataclass
class MotionState:
    """Per-arm reference generator."""

    reference: np.ndarray
    samples: np.ndarray | None = None  # (n, dof) references, one per tick
    start_tick: int = 0
    goal_seq: int | None = None
    mode: str = "idle"  # idle | spline | stream
    applied_seq: int | None = None

    @property
    def active(self) -> bool:
        return self.samples is not None


def trajectory_from_goal(goal: GoalArmTrajectory) -> JointTrajectory:
    times = np.asarray(goal.times, dtype=float)
    return JointTrajectory.from_arrays(times - times[0], np.asarray(goal.positions, dtype=float))


def plan_references(traj: JointTrajectory, period_s: float) -> np.ndarray:
    """Quintic-interpolated references on the control grid, final waypoint included."""
    if len(traj) == 1:
        return traj.positions.copy()
    spline = build_spline(assign_waypoint_derivatives(traj))
    p, _, _ = spline.evaluate(sample_times(spline.t_start, spline.t_end, period_s))
    return p


def motion_tick(
    state: MotionState,
    mailbox: Mailbox,
    tick: int,
    key: str,
    period_ns: int = CONTROL_PERIOD_NS,
    feedback_every: int = 20,
) -> list[Body]:
    """Update ``state.reference`` for ``tick`` and return the replies to send.

    A new trajectory goal is acknowledged now and starts on the next tick; a
    streamed sample is applied immediately and held until the next one.
    """
    replies: list[Body] = []
    entries = mailbox.take(key, tick)
    goals = [e for e in entries if isinstance(e.frame.body, GoalArmTrajectory)]
    refs = [e for e in entries if isinstance(e.frame.body, ArmRefSample)]
    newest = max(entries, key=lambda e: e.frame.seq) if entries else None

    def preempt_active() -> None:
        if state.active and state.goal_seq is not None:
            replies.append(Result(state.goal_seq, Status.PREEMPTED))
        state.samples = None
        state.goal_seq = None

    # superseded goals never start
    for e in goals:
        if e is not newest:
            replies.append(Result(e.frame.seq, Status.PREEMPTED))
    for e in refs:
        if e is not newest:
            replies.append(Result(e.frame.seq, Status.PREEMPTED))

    if newest is not None:
        body = newest.frame.body
        if isinstance(body, GoalArmTrajectory):
            preempt_active()
            try:
                if body.dof != state.reference.size:
                    raise ValueError("dof mismatch")
                samples = plan_references(trajectory_from_goal(body), period_ns / NS_PER_S)
            except ValueError:
                replies.append(Result(newest.frame.seq, Status.REJECTED))
            else:
                replies.append(Ack(newest.frame.seq))
                state.samples = samples
                state.start_tick = tick + 1
                state.goal_seq = newest.frame.seq
                state.mode = "spline"
        else:
            preempt_active()
            if body.dof != state.reference.size:
                replies.append(Result(newest.frame.seq, Status.REJECTED))
            else:
                state.reference = np.array(body.q, dtype=float)
                state.mode = "stream"
                state.applied_seq = newest.frame.seq
                replies.append(Result(newest.frame.seq, Status.OK))

    if state.active and tick >= state.start_tick:
        j = tick - state.start_tick
        last = len(state.samples) - 1
        state.reference = state.samples[min(j, last)].copy()
        state.applied_seq = state.goal_seq
        if j >= last:
            replies.append(Result(state.goal_seq, Status.OK))
            state.samples = None
            state.goal_seq = None
            state.mode = "idle"
        elif feedback_every and j % feedback_every == 0 and j > 0:
            replies.append(Feedback(state.goal_seq, j / last))
    return replies


# ---------------------------------------------------------------------------
# Controller
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RtParams:
    control_period_ns: int = CONTROL_PERIOD_NS
    motor_period_ns: int = MOTOR_PERIOD_NS
    dof: int = DEFAULT_DOF
    servo: ServoParams = ServoParams()
    gripper_rate: float = 2.0  # full strokes per second
    feedback_every: int = 20  # ticks

    def __post_init__(self) -> None:
        if self.control_period_ns % self.motor_period_ns:
            raise ValueError("control period must be a multiple of the motor period")

    @property
    def substeps(self) -> int:
        return self.control_period_ns // self.motor_period_ns


@dataclass
class TickLog:
    ticks: list[int] = field(default_factory=list)
    reference: list[np.ndarray] = field(default_factory=list)
    measured: list[np.ndarray] = field(default_factory=list)
    applied_seq: list[int | None] = field(default_factory=list)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return np.array(self.ticks), np.array(self.reference), np.array(self.measured)


class RtController:
    """Motion PC model: mailbox ingestion plus the 200 Hz / 1 kHz control loop."""

    def __init__(self, params: RtParams = RtParams(), send: Callable[[bytes, int], object] | None = None, initial_q=None):
        self.params = params
        self.send = send
        q0 = np.zeros(params.dof) if initial_q is None else np.array(initial_q, dtype=float)
        self.mailbox = Mailbox()
        self.parser = FrameParser()
        self.arms = {side: ServoState.at_rest(q0, params.servo) for side in ("left", "right")}
        self.motion = {side: MotionState(q0.copy()) for side in ("left", "right")}
        self._prev_ref = {side: q0.copy() for side in ("left", "right")}
        self.base = BaseState()
        self.base_goal: tuple[int, GoalBase, int] | None = None  # (seq, goal, end tick)
        self.grippers = {"left": 0.0, "right": 0.0}
        self.gripper_goals: dict[str, tuple[int, GoalGripper] | None] = {"left": None, "right": None}
        self.logs = {side: TickLog() for side in ("left", "right")}
        self.latency: list[LatencySample] = []
        self.decode_errors = 0
        self.ignored_frames = 0
        self.last_tick: int | None = None
        self._seq = 0
        self._clock: VirtualClock | None = None

    # -- ingestion task -----------------------------------------------------

    def on_bytes(self, data: bytes, t_arrival_ns: int) -> None:
        """Feed received bytes; decode errors are counted, never raised."""
        self.parser.feed(data)
        while True:
            try:
                for frame in self.parser.frames():
                    self.ingest(frame, t_arrival_ns)
                return
            except ProtocolError:
                self.decode_errors += 1

    def ingest(self, frame: Frame, t_arrival_ns: int) -> MailboxEntry | None:
        entry = comms_ingest(self.mailbox, frame, t_arrival_ns, self.params.control_period_ns)
        if entry is None:
            if entity_key(frame.body) is None:
                self.ignored_frames += 1
            return None
        self.latency.append(
            LatencySample(
                frame.seq,
                min(frame.t_send_ns, t_arrival_ns),
                t_arrival_ns,
                entry.handled_tick,
                self.params.control_period_ns,
            )
        )
        return entry

    # -- control task -------------------------------------------------------

    def _reply(self, body: Body, tick: int) -> None:
        if self.send is None:
            return
        self._seq += 1
        t_ns = tick * self.params.control_period_ns
        self.send(encode(Frame(self._seq, t_ns, body)), self._seq)

    def tick(self, k: int) -> None:
        p = self.params
        period_s = p.control_period_ns / NS_PER_S
        dt = p.motor_period_ns / NS_PER_S
        for side in ("left", "right"):
            motion = self.motion[side]
            for body in motion_tick(motion, self.mailbox, k, f"arm:{side}", p.control_period_ns, p.feedback_every):
                self._reply(body, k)
            ref, prev = motion.reference, self._prev_ref[side]
            slope = (ref - prev) / period_s if p.servo.velocity_feedforward else 0.0
            servo = self.arms[side]
            n = p.substeps
            # 1 kHz grid of the linear interpolation; each substep is forced
            # by the reference at its start time
            for j in range(n):
                servo = motor_step(servo, prev + (ref - prev) * (j / n), dt, slope)
            self.arms[side] = servo
            self._prev_ref[side] = ref.copy()
            log = self.logs[side]
            log.ticks.append(k)
            log.reference.append(ref.copy())
            log.measured.append(servo.theta.copy())
            log.applied_seq.append(motion.applied_seq)
        self._tick_base(k, period_s)
        for side in ("left", "right"):
            self._tick_gripper(side, k, period_s)
        self.last_tick = k

    def _tick_base(self, k: int, period_s: float) -> None:
        entries = self.mailbox.take("base", k)
        if entries:
            newest = entries[-1]
            if self.base_goal is not None:
                self._reply(Result(self.base_goal[0], Status.PREEMPTED), k)
            goal = newest.frame.body
            n_ticks = int(round(goal.duration / period_s))
            self.base_goal = (newest.frame.seq, goal, k + n_ticks)
            self._reply(Ack(newest.frame.seq), k)
        if self.base_goal is None:
            self.base = base_step(self.base, None, period_s)
            return
        seq, goal, end = self.base_goal
        if k >= end:
            self.base = base_step(self.base, None, period_s)
            self.base_goal = None
            self._reply(Result(seq), k)
        else:
            self.base = base_step(self.base, goal, period_s)

    def _tick_gripper(self, side: str, k: int, period_s: float) -> None:
        entries = self.mailbox.take(f"gripper:{side}", k)
        if entries:
            newest = entries[-1]
            current = self.gripper_goals[side]
            if current is not None:
                self._reply(Result(current[0], Status.PREEMPTED), k)
            self.gripper_goals[side] = (newest.frame.seq, newest.frame.body)
            self._reply(Ack(newest.frame.seq), k)
        current = self.gripper_goals[side]
        if current is None:
            return
        seq, goal = current
        self.grippers[side] = gripper_step(self.grippers[side], goal, period_s, self.params.gripper_rate)
        if self.grippers[side] == goal.position:
            self.gripper_goals[side] = None
            self._reply(Result(seq), k)

    # -- scheduling ---------------------------------------------------------

    def attach(self, clock: VirtualClock, first_tick: int = 0) -> None:
        """Run ``tick`` on ``clock`` every control period, forever."""
        self._clock = clock
        period = self.params.control_period_ns

        def run(k: int) -> None:
            self.tick(k)
            clock.schedule((k + 1) * period, lambda: run(k + 1), priority=TICK_PRIORITY, label="rt:tick")

        clock.schedule(first_tick * period, lambda: run(first_tick), priority=TICK_PRIORITY, label="rt:tick")
