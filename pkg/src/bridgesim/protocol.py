"""Binary wire protocol between the NRT client and the RT controller.

Frame layout, little-endian::

    u32 length | u8 msg_type | u32 seq | u64 t_send_ns | payload

``length`` counts every byte after itself. Payloads:

=================  ===============================================
GoalBase           f64 vx, f64 vy, f64 wz, f64 duration
GoalGripper        u8 side, f64 position
GoalArmTrajectory  u8 side, u16 dof, u32 n, n x (f64 t, dof x f64 q)
ArmRefSample       u8 side, u16 dof, dof x f64 q
Ack / Result       u32 goal_seq, u8 status
Feedback           u32 goal_seq, f64 progress
=================  ===============================================

Angles are degrees, times seconds, velocities m/s and rad/s.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator, Union

LENGTH = struct.Struct("<I")
HEADER = struct.Struct("<BIQ")
HEADER_SIZE = HEADER.size  # 13
MAX_PAYLOAD = (1 << 24) - 1
MAX_LENGTH = HEADER_SIZE + MAX_PAYLOAD

U32_MAX = (1 << 32) - 1
U64_MAX = (1 << 64) - 1


class MsgType(enum.IntEnum):
    GOAL_BASE = 1
    GOAL_GRIPPER = 2
    GOAL_ARM_TRAJECTORY = 3
    ARM_REF_SAMPLE = 4
    ACK = 5
    FEEDBACK = 6
    RESULT = 7


class Side(enum.IntEnum):
    LEFT = 0
    RIGHT = 1


class Status(enum.IntEnum):
    OK = 0
    FAILED = 1
    PREEMPTED = 2
    REJECTED = 3


class ProtocolError(Exception):
    """Base class for wire-format errors."""


class IncompleteFrame(ProtocolError):
    pass


class UnknownMessageType(ProtocolError):
    pass


class LengthMismatch(ProtocolError):
    pass


class CountMismatch(ProtocolError):
    pass


class InvalidMessage(ProtocolError, ValueError):
    """A message that cannot be put on the wire."""


# ---------------------------------------------------------------------------
# Message bodies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GoalBase:
    vx: float
    vy: float
    wz: float
    duration: float

    TYPE = MsgType.GOAL_BASE

    def validate(self) -> None:
        _finite(self.vx, self.vy, self.wz, self.duration)
        if self.duration < 0:
            raise InvalidMessage("duration must be >= 0")


@dataclass(frozen=True)
class GoalGripper:
    side: Side
    position: float

    TYPE = MsgType.GOAL_GRIPPER

    def validate(self) -> None:
        _finite(self.position)
        if not 0.0 <= self.position <= 1.0:
            raise InvalidMessage("gripper position must be in [0, 1]")


@dataclass(frozen=True)
class GoalArmTrajectory:
    side: Side
    dof: int
    times: tuple[float, ...]
    positions: tuple[tuple[float, ...], ...]

    TYPE = MsgType.GOAL_ARM_TRAJECTORY

    @property
    def count(self) -> int:
        return len(self.times)

    def validate(self) -> None:
        if not 1 <= self.dof <= 0xFFFF:
            raise InvalidMessage("dof must be in 1..65535")
        if self.count == 0:
            raise InvalidMessage("arm trajectory needs at least one waypoint")
        if len(self.positions) != self.count:
            raise InvalidMessage("one position row per waypoint required")
        if any(len(row) != self.dof for row in self.positions):
            raise InvalidMessage("position rows must have dof entries")
        _finite(*self.times)
        for row in self.positions:
            _finite(*row)


@dataclass(frozen=True)
class ArmRefSample:
    side: Side
    dof: int
    q: tuple[float, ...]

    TYPE = MsgType.ARM_REF_SAMPLE

    def validate(self) -> None:
        if not 1 <= self.dof <= 0xFFFF:
            raise InvalidMessage("dof must be in 1..65535")
        if len(self.q) != self.dof:
            raise InvalidMessage("q must have dof entries")
        _finite(*self.q)


@dataclass(frozen=True)
class Ack:
    goal_seq: int
    status: int = Status.OK

    TYPE = MsgType.ACK

    def validate(self) -> None:
        _u32(self.goal_seq)
        _u8(self.status)


@dataclass(frozen=True)
class Result:
    goal_seq: int
    status: int = Status.OK

    TYPE = MsgType.RESULT

    def validate(self) -> None:
        _u32(self.goal_seq)
        _u8(self.status)


@dataclass(frozen=True)
class Feedback:
    goal_seq: int
    progress: float

    TYPE = MsgType.FEEDBACK

    def validate(self) -> None:
        _u32(self.goal_seq)
        _finite(self.progress)
        if not 0.0 <= self.progress <= 1.0:
            raise InvalidMessage("progress must be in [0, 1]")


Body = Union[GoalBase, GoalGripper, GoalArmTrajectory, ArmRefSample, Ack, Feedback, Result]


@dataclass(frozen=True)
class Frame:
    """One unit on the wire: envelope fields plus a typed body."""

    seq: int
    t_send_ns: int
    body: Body

    @property
    def msg_type(self) -> MsgType:
        return self.body.TYPE


def _finite(*values: float) -> None:
    for x in values:
        if not math.isfinite(x):
            raise InvalidMessage(f"non-finite value {x!r}")


def _u8(x: int) -> None:
    if not 0 <= x <= 0xFF:
        raise InvalidMessage(f"{x} does not fit in u8")


def _u32(x: int) -> None:
    if not 0 <= x <= U32_MAX:
        raise InvalidMessage(f"{x} does not fit in u32")


# ---------------------------------------------------------------------------
# Codec
# ---------------------------------------------------------------------------

_BASE = struct.Struct("<dddd")
_GRIPPER = struct.Struct("<Bd")
_ARM_HEAD = struct.Struct("<BHI")
_REF_HEAD = struct.Struct("<BH")
_STATUS = struct.Struct("<IB")
_FEEDBACK = struct.Struct("<Id")


def _encode_body(body: Body) -> bytes:
    if isinstance(body, GoalBase):
        return _BASE.pack(body.vx, body.vy, body.wz, body.duration)
    if isinstance(body, GoalGripper):
        return _GRIPPER.pack(body.side, body.position)
    if isinstance(body, GoalArmTrajectory):
        flat = []
        for t, row in zip(body.times, body.positions):
            flat.append(t)
            flat.extend(row)
        return _ARM_HEAD.pack(body.side, body.dof, body.count) + struct.pack(f"<{len(flat)}d", *flat)
    if isinstance(body, ArmRefSample):
        return _REF_HEAD.pack(body.side, body.dof) + struct.pack(f"<{body.dof}d", *body.q)
    if isinstance(body, (Ack, Result)):
        return _STATUS.pack(body.goal_seq, body.status)
    if isinstance(body, Feedback):
        return _FEEDBACK.pack(body.goal_seq, body.progress)
    raise InvalidMessage(f"unsupported body {type(body).__name__}")


def encode(frame: Frame) -> bytes:
    """Serialize ``frame`` to bytes, length prefix included."""
    _u32(frame.seq)
    if not 0 <= frame.t_send_ns <= U64_MAX:
        raise InvalidMessage("t_send_ns does not fit in u64")
    frame.body.validate()
    payload = _encode_body(frame.body)
    if len(payload) > MAX_PAYLOAD:
        raise InvalidMessage(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    header = HEADER.pack(frame.msg_type, frame.seq, frame.t_send_ns)
    return LENGTH.pack(HEADER_SIZE + len(payload)) + header + payload


def _side(raw: int) -> Side:
    try:
        return Side(raw)
    except ValueError:
        raise InvalidMessage(f"bad side {raw}") from None


def _fixed(payload: bytes, fmt: struct.Struct, name: str) -> tuple:
    if len(payload) != fmt.size:
        raise LengthMismatch(f"{name} payload is {len(payload)} bytes, expected {fmt.size}")
    return fmt.unpack(payload)


def _decode_body(msg_type: MsgType, payload: bytes) -> Body:
    if msg_type is MsgType.GOAL_BASE:
        return GoalBase(*_fixed(payload, _BASE, "GoalBase"))
    if msg_type is MsgType.GOAL_GRIPPER:
        side, pos = _fixed(payload, _GRIPPER, "GoalGripper")
        return GoalGripper(_side(side), pos)
    if msg_type is MsgType.GOAL_ARM_TRAJECTORY:
        if len(payload) < _ARM_HEAD.size:
            raise LengthMismatch("GoalArmTrajectory payload shorter than its header")
        side, dof, n = _ARM_HEAD.unpack_from(payload)
        body = payload[_ARM_HEAD.size :]
        if dof == 0 or n == 0 or len(body) != 8 * n * (dof + 1):
            raise CountMismatch(f"{n} waypoints of dof {dof} do not match {len(body)} payload bytes")
        flat = struct.unpack(f"<{n * (dof + 1)}d", body)
        stride = dof + 1
        times = tuple(flat[i * stride] for i in range(n))
        positions = tuple(tuple(flat[i * stride + 1 : (i + 1) * stride]) for i in range(n))
        return GoalArmTrajectory(_side(side), dof, times, positions)
    if msg_type is MsgType.ARM_REF_SAMPLE:
        if len(payload) < _REF_HEAD.size:
            raise LengthMismatch("ArmRefSample payload shorter than its header")
        side, dof = _REF_HEAD.unpack_from(payload)
        body = payload[_REF_HEAD.size :]
        if dof == 0 or len(body) != 8 * dof:
            raise CountMismatch(f"dof {dof} does not match {len(body)} payload bytes")
        return ArmRefSample(_side(side), dof, struct.unpack(f"<{dof}d", body))
    if msg_type is MsgType.ACK:
        return Ack(*_fixed(payload, _STATUS, "Ack"))
    if msg_type is MsgType.RESULT:
        return Result(*_fixed(payload, _STATUS, "Result"))
    if msg_type is MsgType.FEEDBACK:
        return Feedback(*_fixed(payload, _FEEDBACK, "Feedback"))
    raise UnknownMessageType(f"unknown message type {msg_type}")


def _check_length(length: int) -> None:
    if not HEADER_SIZE <= length <= MAX_LENGTH:
        raise LengthMismatch(f"length prefix {length} outside [{HEADER_SIZE}, {MAX_LENGTH}]")


def decode_frame_body(data: bytes | memoryview) -> Frame:
    """Decode the bytes that follow a length prefix."""
    tag, seq, t_send = HEADER.unpack_from(data)
    try:
        msg_type = MsgType(tag)
    except ValueError:
        raise UnknownMessageType(f"unknown message type tag {tag}") from None
    return Frame(seq, t_send, _decode_body(msg_type, bytes(data[HEADER_SIZE:])))


def decode(data: bytes) -> Frame:
    """Decode exactly one complete frame."""
    if len(data) < LENGTH.size:
        raise IncompleteFrame(f"need 4 bytes of length prefix, have {len(data)}")
    (length,) = LENGTH.unpack_from(data)
    _check_length(length)
    if len(data) < LENGTH.size + length:
        raise IncompleteFrame(f"frame needs {LENGTH.size + length} bytes, have {len(data)}")
    if len(data) > LENGTH.size + length:
        raise LengthMismatch(f"{len(data) - LENGTH.size - length} trailing bytes after frame")
    return decode_frame_body(memoryview(data)[LENGTH.size :])


class FrameParser:
    """Incremental frame reassembly over an arbitrary chunking of a byte stream.

    ``feed`` appends bytes, ``frames`` yields every complete frame. A frame
    whose body fails to decode is discarded before its error is raised, so
    iteration can resume with the next frame. A bad length prefix leaves the
    stream unsynchronized; the buffer is dropped.
    """

    def __init__(self) -> None:
        self._buf = bytearray()

    @property
    def buffered(self) -> int:
        return len(self._buf)

    def feed(self, data: bytes) -> None:
        self._buf += data

    def reset(self) -> None:
        self._buf.clear()

    def frames(self) -> Iterator[Frame]:
        while len(self._buf) >= LENGTH.size:
            (length,) = LENGTH.unpack_from(self._buf)
            try:
                _check_length(length)
            except LengthMismatch:
                self._buf.clear()
                raise
            end = LENGTH.size + length
            if len(self._buf) < end:
                return
            chunk = bytes(self._buf[LENGTH.size : end])
            del self._buf[:end]
            yield decode_frame_body(chunk)


def frame_stream(chunks: Iterable[bytes]) -> Iterator[Frame]:
    """Decode a chunked byte stream into frames; errors propagate."""
    parser = FrameParser()
    for chunk in chunks:
        parser.feed(chunk)
        yield from parser.frames()
    if parser.buffered:
        raise IncompleteFrame(f"stream ended with {parser.buffered} bytes of a partial frame")


class FramedSocket:
    """Frames over a connected stream socket (wall-clock transport)."""

    def __init__(self, sock) -> None:
        self.sock = sock
        self._parser = FrameParser()

    def send(self, frame: Frame) -> None:
        self.sock.sendall(encode(frame))

    def recv(self, bufsize: int = 65536) -> list[Frame]:
        """Block for the next chunk and return the frames it completes."""
        data = self.sock.recv(bufsize)
        if not data:
            raise EOFError("peer closed the connection")
        self._parser.feed(data)
        return list(self._parser.frames())

    def close(self) -> None:
        self.sock.close()
