"""Joint trajectory interpolation and resampling.

Angles are in degrees and times in seconds throughout. Three resamplers are
provided, matching the three ways a joint reference can reach the motion
controller:

- ``resample``: quintic spline, C2-continuous across waypoints
- ``linear_resample``: piecewise-linear, as done by a simple client-side interpolator
- ``zoh_resample``: zero-order hold of the raw waypoints

Example:
    >>> traj = JointTrajectory.from_arrays([0.0, 1.0], [[0.0], [1.0]])
    >>> spline = build_spline(assign_waypoint_derivatives(traj))
    >>> round(float(spline.evaluate(0.5)[0][0]), 6)
    0.5
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_DOF = 7
# Grid times closer than this to a knot are treated as on the knot.
TIME_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class TrajectoryPoint:
    """Kinematic state of all joints at time ``t``.

    ``v`` and ``a`` are optional; ``assign_waypoint_derivatives`` fills them.
    """

    t: float
    q: np.ndarray
    v: np.ndarray | None = None
    a: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.t) or self.t < 0:
            raise ValueError(f"t must be finite and >= 0, got {self.t}")
        q = _as_vector(self.q, "q")
        object.__setattr__(self, "q", q)
        for name in ("v", "a"):
            value = getattr(self, name)
            if value is not None:
                value = _as_vector(value, name)
                if value.shape != q.shape:
                    raise ValueError(f"{name} has dof {value.size}, q has dof {q.size}")
                object.__setattr__(self, name, value)

    @property
    def dof(self) -> int:
        return self.q.size

    def __repr__(self) -> str:
        return f"TrajectoryPoint(t={self.t:.4f}, q={np.array2string(self.q, precision=3)})"


def _as_vector(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(-1)
    if arr.size == 0:
        raise ValueError(f"{name} must have at least one joint")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class JointTrajectory:
    """Timed joint waypoints with strictly increasing timestamps."""

    points: tuple[TrajectoryPoint, ...]

    def __post_init__(self) -> None:
        points = tuple(self.points)
        object.__setattr__(self, "points", points)
        if not points:
            raise ValueError("trajectory needs at least one point")
        dof = points[0].dof
        for prev, cur in zip(points, points[1:]):
            if cur.dof != dof:
                raise ValueError("all points must share the same dof")
            if not cur.t > prev.t:
                raise ValueError(
                    f"timestamps must be strictly increasing ({prev.t} then {cur.t})"
                )

    @classmethod
    def from_arrays(cls, times, q, v=None, a=None) -> JointTrajectory:
        times = np.asarray(times, dtype=float).reshape(-1)
        q = np.atleast_2d(np.asarray(q, dtype=float))
        if q.shape[0] != times.size:
            raise ValueError("q must have one row per timestamp")
        v = None if v is None else np.atleast_2d(np.asarray(v, dtype=float))
        a = None if a is None else np.atleast_2d(np.asarray(a, dtype=float))
        return cls(
            tuple(
                TrajectoryPoint(
                    float(t),
                    q[i],
                    None if v is None else v[i],
                    None if a is None else a[i],
                )
                for i, t in enumerate(times)
            )
        )

    def __len__(self) -> int:
        return len(self.points)

    @property
    def dof(self) -> int:
        return self.points[0].dof

    @property
    def times(self) -> np.ndarray:
        return np.array([p.t for p in self.points])

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.q for p in self.points])

    @property
    def duration(self) -> float:
        return self.points[-1].t - self.points[0].t

    @property
    def has_derivatives(self) -> bool:
        return all(p.v is not None and p.a is not None for p in self.points)


# ---------------------------------------------------------------------------
# Quintic segments
# ---------------------------------------------------------------------------


def quintic_coeffs(p0, v0, a0, p1, v1, a1, T: float) -> np.ndarray:
    """Coefficients ``c0..c5`` of the quintic matching position, velocity and
    acceleration at both ends of ``[0, T]``.

    Inputs may be scalars or equal-shape arrays (one entry per joint); the
    result has shape ``(..., 6)``.
    """
    if not (math.isfinite(T) and T > 0):
        raise ValueError(f"segment duration must be finite and > 0, got {T}")
    p0, v0, a0, p1, v1, a1 = (np.asarray(x, dtype=float) for x in (p0, v0, a0, p1, v1, a1))
    for x in (p0, v0, a0, p1, v1, a1):
        if not np.all(np.isfinite(x)):
            raise ValueError("boundary conditions must be finite")
    dp = p1 - p0
    T2 = T * T
    c3 = (20 * dp - (8 * v1 + 12 * v0) * T - (3 * a0 - a1) * T2) / (2 * T**3)
    c4 = (-30 * dp + (14 * v1 + 16 * v0) * T + (3 * a0 - 2 * a1) * T2) / (2 * T**4)
    c5 = (12 * dp - 6 * (v1 + v0) * T + (a1 - a0) * T2) / (2 * T**5)
    return np.stack(np.broadcast_arrays(p0, v0, a0 / 2, c3, c4, c5), axis=-1)


@dataclass(frozen=True, eq=False)
class QuinticSegment:
    """One quintic per joint on ``[t0, t1]``.

    ``coeffs[j]`` are the monomial coefficients in local time ``tau = t - t0``.
    ``start``/``end`` hold the (p, v, a) boundary states, shape ``(3, dof)``.
    """

    t0: float
    t1: float
    coeffs: np.ndarray
    start: np.ndarray
    end: np.ndarray

    @classmethod
    def from_boundary(cls, t0: float, t1: float, start, end) -> QuinticSegment:
        start = np.asarray(start, dtype=float).reshape(3, -1)
        end = np.asarray(end, dtype=float).reshape(3, -1)
        coeffs = quintic_coeffs(*start, *end, t1 - t0)
        return cls(float(t0), float(t1), coeffs, start, end)

    @property
    def duration(self) -> float:
        return self.t1 - self.t0

    @property
    def dof(self) -> int:
        return self.start.shape[1]


def _hermite_basis(s: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Rows: weights of p0, v0*T, a0*T^2, p1, v1*T, a1*T^2 and their first and
    # second derivatives with respect to s. Integer coefficients make the
    # endpoint values exact.
    s2, s3, s4, s5 = s * s, s**3, s**4, s**5
    h = np.stack([
        1 - 10 * s3 + 15 * s4 - 6 * s5,
        s - 6 * s3 + 8 * s4 - 3 * s5,
        0.5 * (s2 - 3 * s3 + 3 * s4 - s5),
        10 * s3 - 15 * s4 + 6 * s5,
        -4 * s3 + 7 * s4 - 3 * s5,
        0.5 * (s3 - 2 * s4 + s5),
    ])
    dh = np.stack([
        -30 * s2 + 60 * s3 - 30 * s4,
        1 - 18 * s2 + 32 * s3 - 15 * s4,
        0.5 * (2 * s - 9 * s2 + 12 * s3 - 5 * s4),
        30 * s2 - 60 * s3 + 30 * s4,
        -12 * s2 + 28 * s3 - 15 * s4,
        0.5 * (3 * s2 - 8 * s3 + 5 * s4),
    ])
    ddh = np.stack([
        -60 * s + 180 * s2 - 120 * s3,
        -36 * s + 96 * s2 - 60 * s3,
        0.5 * (2 - 18 * s + 36 * s2 - 20 * s3),
        60 * s - 180 * s2 + 120 * s3,
        -24 * s + 84 * s2 - 60 * s3,
        0.5 * (6 * s - 24 * s2 + 20 * s3),
    ])
    return h, dh, ddh


def _eval_segment(segment: QuinticSegment, t: np.ndarray):
    T = segment.duration
    s = (t - segment.t0) / T
    h, dh, ddh = _hermite_basis(s)
    (p0, v0, a0), (p1, v1, a1) = segment.start, segment.end
    # (6, dof) boundary terms scaled to normalized time
    b = np.stack([p0, v0 * T, a0 * T * T, p1, v1 * T, a1 * T * T])
    p = h.T @ b
    v = (dh.T @ b) / T
    a = (ddh.T @ b) / (T * T)
    return p, v, a


def quintic_eval(segment: QuinticSegment, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Position, velocity and acceleration of ``segment`` at absolute time ``t``."""
    if not segment.t0 <= t <= segment.t1:
        raise ValueError(f"t={t} outside segment [{segment.t0}, {segment.t1}]")
    p, v, a = _eval_segment(segment, np.array([float(t)]))
    return p[0], v[0], a[0]


@dataclass(frozen=True, eq=False)
class QuinticSpline:
    segments: tuple[QuinticSegment, ...]

    def __post_init__(self) -> None:
        segs = tuple(self.segments)
        object.__setattr__(self, "segments", segs)
        if not segs:
            raise ValueError("spline needs at least one segment")
        for left, right in zip(segs, segs[1:]):
            if left.t1 != right.t0:
                raise ValueError("segments must be contiguous")

    @property
    def t_start(self) -> float:
        return self.segments[0].t0

    @property
    def t_end(self) -> float:
        return self.segments[-1].t1

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    @property
    def dof(self) -> int:
        return self.segments[0].dof

    @property
    def knots(self) -> np.ndarray:
        return np.array([s.t0 for s in self.segments] + [self.t_end])

    def evaluate(self, times) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized evaluation; returns ``(p, v, a)`` each of shape ``(n, dof)``.

        Times are clamped to the spline span.
        """
        times = np.clip(np.atleast_1d(np.asarray(times, dtype=float)), self.t_start, self.t_end)
        knots = self.knots
        idx = np.clip(np.searchsorted(knots, times, side="right") - 1, 0, len(self.segments) - 1)
        out = [np.empty((times.size, self.dof)) for _ in range(3)]
        for i in np.unique(idx):
            mask = idx == i
            for arr, val in zip(out, _eval_segment(self.segments[i], times[mask])):
                arr[mask] = val
        return out[0], out[1], out[2]

    def max_speed(self, n_per_segment: int = 64) -> float:
        """Largest |velocity| over all joints, found by dense sampling."""
        best = 0.0
        for seg in self.segments:
            ts = np.linspace(seg.t0, seg.t1, n_per_segment)
            _, v, _ = _eval_segment(seg, ts)
            best = max(best, float(np.abs(v).max()))
        return best


# ---------------------------------------------------------------------------
# Spline construction
# ---------------------------------------------------------------------------


def _central_difference(values: np.ndarray, times: np.ndarray) -> np.ndarray:
    out = np.zeros_like(values)
    if len(times) > 2:
        out[1:-1] = (values[2:] - values[:-2]) / (times[2:] - times[:-2])[:, None]
    return out


def assign_waypoint_derivatives(traj: JointTrajectory) -> JointTrajectory:
    """Fill missing waypoint velocities and accelerations.

    Velocities come from central differences of positions and accelerations
    from central differences of the resulting velocities; both are zero at the
    first and last waypoint (rest-to-rest). Values already present on a
    waypoint are kept.
    """
    if len(traj) < 2:
        raise ValueError("need at least 2 waypoints to assign derivatives")
    times = traj.times
    v = _central_difference(traj.positions, times)
    for i, p in enumerate(traj.points):
        if p.v is not None:
            v[i] = p.v
    a = _central_difference(v, times)
    for i, p in enumerate(traj.points):
        if p.a is not None:
            a[i] = p.a
    return JointTrajectory.from_arrays(times, traj.positions, v, a)


def build_spline(traj: JointTrajectory) -> QuinticSpline:
    """One quintic segment per adjacent waypoint pair, sharing boundary states."""
    if len(traj) < 2:
        raise ValueError("need at least 2 waypoints to build a spline")
    if not traj.has_derivatives:
        raise ValueError("every waypoint needs v and a; call assign_waypoint_derivatives first")
    segments = []
    for left, right in zip(traj.points, traj.points[1:]):
        segments.append(
            QuinticSegment.from_boundary(
                left.t, right.t, np.stack([left.q, left.v, left.a]), np.stack([right.q, right.v, right.a])
            )
        )
    return QuinticSpline(tuple(segments))


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def sample_times(t_start: float, t_end: float, period: float) -> np.ndarray:
    """Grid ``t_start + k*period`` through ``t_end``; ``t_end`` is always the last sample."""
    if not (math.isfinite(period) and period > 0):
        raise ValueError(f"period must be > 0, got {period}")
    span = t_end - t_start
    n = int(math.floor(span / period + TIME_EPS))
    times = t_start + np.arange(n + 1) * period
    if span - n * period > TIME_EPS:
        times = np.append(times, t_end)
    else:
        times[-1] = t_end
    return times


def _to_points(times, p, v, a) -> list[TrajectoryPoint]:
    return [TrajectoryPoint(float(t), p[i], v[i], a[i]) for i, t in enumerate(times)]


def resample(spline: QuinticSpline, period: float = 0.005) -> list[TrajectoryPoint]:
    times = sample_times(spline.t_start, spline.t_end, period)
    return _to_points(times, *spline.evaluate(times))


def linear_resample(traj: JointTrajectory, period: float = 0.005) -> list[TrajectoryPoint]:
    """Piecewise-linear positions on the period grid; ``v`` is the slope of the
    segment a sample falls in and ``a`` is zero."""
    times_wp = traj.times
    q_wp = traj.positions
    times = sample_times(times_wp[0], times_wp[-1], period)
    if len(traj) == 1:
        zero = np.zeros(traj.dof)
        return [TrajectoryPoint(float(times_wp[0]), q_wp[0], zero, zero)]
    seg = np.clip(np.searchsorted(times_wp, times + TIME_EPS, side="right") - 1, 0, len(traj) - 2)
    dt = (times_wp[seg + 1] - times_wp[seg])[:, None]
    slope = (q_wp[seg + 1] - q_wp[seg]) / dt
    frac = np.clip((times - times_wp[seg])[:, None], 0.0, None)
    p = q_wp[seg] + slope * frac
    # land exactly on knots
    on_knot = np.abs(times - times_wp[seg]) <= TIME_EPS
    p[on_knot] = q_wp[seg[on_knot]]
    p[-1] = q_wp[-1]
    return _to_points(times, p, slope, np.zeros_like(p))


def zoh_resample(traj: JointTrajectory, period: float = 0.005) -> list[TrajectoryPoint]:
    """Hold the most recent waypoint position on the period grid; ``v = a = 0``."""
    times_wp = traj.times
    times = sample_times(times_wp[0], times_wp[-1], period)
    idx = np.searchsorted(times_wp, times + TIME_EPS, side="right") - 1
    p = traj.positions[idx]
    zero = np.zeros_like(p)
    return _to_points(times, p, zero, zero)


def points_to_arrays(points: Sequence[TrajectoryPoint]) -> tuple[np.ndarray, np.ndarray]:
    """Stack sample times and positions: ``(n,)`` and ``(n, dof)``."""
    return np.array([p.t for p in points]), np.array([p.q for p in points])


# ---------------------------------------------------------------------------
# CSV trajectory files: header ``t,q0..q{dof-1}[,v0..][,a0..]``
# ---------------------------------------------------------------------------


def write_trajectory_csv(traj: JointTrajectory, path: str | Path) -> None:
    dof = traj.dof
    with_v = all(p.v is not None for p in traj.points)
    with_a = all(p.a is not None for p in traj.points)
    header = ["t"] + [f"q{j}" for j in range(dof)]
    if with_v:
        header += [f"v{j}" for j in range(dof)]
    if with_a:
        header += [f"a{j}" for j in range(dof)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for p in traj.points:
            row = [p.t, *p.q]
            if with_v:
                row += list(p.v)
            if with_a:
                row += list(p.a)
            writer.writerow([repr(float(x)) for x in row])


def read_trajectory_csv(path: str | Path) -> JointTrajectory:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [[float(x) for x in row] for row in reader if row]
    if not header or header[0] != "t":
        raise ValueError("trajectory CSV must start with a 't' column")
    cols = {name: i for i, name in enumerate(header)}
    dof = sum(1 for h in header if h.startswith("q"))
    if dof == 0 or any(f"q{j}" not in cols for j in range(dof)):
        raise ValueError("trajectory CSV needs columns q0..q{dof-1}")
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))

    def block(prefix: str):
        names = [f"{prefix}{j}" for j in range(dof)]
        if not any(n in cols for n in names):
            return None
        if not all(n in cols for n in names):
            raise ValueError(f"incomplete {prefix} columns")
        return data[:, [cols[n] for n in names]]

    return JointTrajectory.from_arrays(data[:, 0], block("q"), block("v"), block("a"))
