"""Reductions over completed logs: tracking error, latency histograms, success rates."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True, eq=False)
class TrackingReport:
    """Per-joint error statistics in degrees (population std dev)."""

    mode: str
    std: np.ndarray
    max_abs: np.ndarray
    n_samples: int

    @property
    def std_max(self) -> float:
        return float(self.std.max()) if self.std.size else 0.0

    @property
    def max_abs_max(self) -> float:
        return float(self.max_abs.max()) if self.max_abs.size else 0.0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n_samples": self.n_samples,
            "std_deg": [float(x) for x in self.std],
            "max_abs_deg": [float(x) for x in self.max_abs],
            "std_max_deg": self.std_max,
        }


def tracking_std(reference, measured, mode: str = "") -> TrackingReport:
    """Statistics of ``measured - reference`` on a shared time grid."""
    ref = np.atleast_2d(np.asarray(reference, dtype=float))
    meas = np.atleast_2d(np.asarray(measured, dtype=float))
    if np.ndim(reference) == 1:
        ref, meas = ref.T, meas.T
    if ref.shape != meas.shape:
        raise ValueError(f"series shapes differ: {ref.shape} vs {meas.shape}")
    if ref.shape[0] == 0:
        raise ValueError("empty series")
    err = meas - ref
    return TrackingReport(mode, err.std(axis=0), np.abs(err).max(axis=0), ref.shape[0])


@dataclass(frozen=True, eq=False)
class Histogram:
    bin_ms: float
    lo_ms: float
    counts: np.ndarray
    min_ms: float | None = None
    max_ms: float | None = None

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def edges(self) -> np.ndarray:
        return self.lo_ms + self.bin_ms * np.arange(len(self.counts) + 1)

    @property
    def centers(self) -> np.ndarray:
        return self.lo_ms + self.bin_ms * (np.arange(len(self.counts)) + 0.5)

    def mode_bins(self) -> list[int]:
        """Peak bin of each run of contiguous nonzero bins."""
        peaks, start = [], None
        for i, c in enumerate(np.append(self.counts, 0)):
            if c and start is None:
                start = i
            elif not c and start is not None:
                peaks.append(start + int(np.argmax(self.counts[start:i])))
                start = None
        return peaks

    def modes(self) -> list[float]:
        """Left edge of each peak bin, in ms."""
        return [self.lo_ms + self.bin_ms * i for i in self.mode_bins()]


def _bin_index(x: np.ndarray, lo: float, bin_ms: float) -> np.ndarray:
    # values sitting on an edge (up to rounding) belong to the bin they open
    return np.floor((x - lo) / bin_ms + 1e-9).astype(int)


def histogram(samples: Iterable[float], bin_ms: float) -> Histogram:
    if not bin_ms > 0:
        raise ValueError("bin_ms must be > 0")
    x = np.asarray(list(samples), dtype=float)
    if x.size == 0:
        return Histogram(bin_ms, 0.0, np.zeros(0, dtype=int))
    lo = math.floor(x.min() / bin_ms + 1e-9) * bin_ms
    idx = _bin_index(x, lo, bin_ms)
    counts = np.bincount(idx, minlength=idx.max() + 1)
    return Histogram(bin_ms, lo, counts, float(x.min()), float(x.max()))


def fraction_above(samples: Iterable[float], threshold_ms: float) -> float:
    x = np.asarray(list(samples), dtype=float)
    return float(np.mean(x > threshold_ms)) if x.size else 0.0


@dataclass(frozen=True)
class GoalRecord:
    rate_hz: float
    succeeded: bool
    seq: int = -1
    t_issue_ns: int = 0
    t_result_ns: int | None = None


def success_rate(goal_log: Iterable[GoalRecord]) -> dict[float, float]:
    """Successes over issued goals, per request frequency (ascending)."""
    issued: dict[float, int] = defaultdict(int)
    ok: dict[float, int] = defaultdict(int)
    for rec in goal_log:
        issued[rec.rate_hz] += 1
        ok[rec.rate_hz] += bool(rec.succeeded)
    return {rate: ok[rate] / issued[rate] for rate in sorted(issued)}


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------


def fmt(x: float) -> str:
    """Fixed float formatting so CSV bytes are reproducible."""
    return f"{x:.9f}"


def write_tracking_csv(path: str | Path, ticks, reference, measured) -> None:
    reference = np.asarray(reference)
    measured = np.asarray(measured)
    dof = reference.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tick", *(f"ref_j{j}" for j in range(dof)), *(f"meas_j{j}" for j in range(dof))])
        for k, r, m in zip(ticks, reference, measured):
            w.writerow([int(k), *map(fmt, r), *map(fmt, m)])


def write_column_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, float) else v for v in row])


def write_latency_csv(path: str | Path, samples_ms: Iterable[float]) -> None:
    write_column_csv(path, ["latency_ms"], ([float(x)] for x in samples_ms))


def markdown_table(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    def cell(v) -> str:
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(cell(v) for v in row) + " |" for row in rows]
    return "\n".join(lines) + "\n"
