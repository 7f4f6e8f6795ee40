"""Experiment runners. Each writes CSVs, ``summary.md`` and ``report.json``.

Every run is a pure function of (config, seed): the virtual clock and seeded
generators make CSV output byte-reproducible.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable

import numpy as np

from .bridge import Bridge, echo_pair
from .config import DEFAULTS, SimConfig, merge
from .metrics import (
    GoalRecord,
    TrackingReport,
    fmt,
    fraction_above,
    histogram,
    markdown_table,
    success_rate,
    tracking_std,
    write_column_csv,
    write_latency_csv,
    write_tracking_csv,
)
from .nrtclient import GoalState
from .perception import Box3D, DetectionFailure, DetectorParams, detect_boxes
from .scene import DEFAULT_CATALOG, ObjectPose, SceneSpec, gen_scene, single_object_specs
from .simkit import NS_PER_S, JitterModel, SimLink, VirtualClock
from .trajmath import JointTrajectory

PRESETS: dict[str, dict] = {
    "transport": {
        "jitter": {"base_ms": 1.0, "tail_prob": 0.1, "tail_extra_ms": 5.0},
        "experiment": {"n_packets": 2000, "rate_hz": 100.0, "bin_ms": 0.5, "threshold_ms": 5.0},
    },
    "success_rate": {
        "jitter": {"base_ms": 1.5, "tail_prob": 0.1, "tail_extra_ms": 5.0},
        "return_jitter": {"base_ms": 1.5, "tail_prob": 0.1, "tail_extra_ms": 5.0},
        "experiment": {"frequencies_hz": [10, 50, 100, 200, 250, 500], "n_requests": 400},
    },
    "latency_modes": {
        "jitter": {"base_ms": 22.0, "tail_prob": 0.1, "tail_extra_ms": 5.0},
        "experiment": {"n_packets": 1000, "rate_hz": 200.0, "n_seeds": 10, "bin_ms": 1.0},
    },
    "tracking": {
        "experiment": {"duration_s": 4.0, "waypoint_hz": 10.0, "low_hz": 10.0, "high_hz": 200.0, "settle_s": 0.5},
    },
    "perception": {
        "experiment": {"poses_per_category": 10, "noise_sigma": 0.002, "outlier_fraction": 0.05, "tolerance_m": 0.01},
    },
    "end_to_end": {
        "experiment": {"n_objects": 2, "move_s": 2.0, "waypoint_hz": 10.0, "settle_s": 0.5},
    },
}

# Fixed joint-space approach pose per category (degrees); joint 0 follows the box azimuth.
APPROACH_POSES = {
    "snack_box": [0.0, -35.0, 10.0, -70.0, 0.0, 40.0, 0.0],
    "cereal_box": [0.0, -40.0, 10.0, -60.0, 0.0, 35.0, 0.0],
    "milk_carton": [0.0, -30.0, 5.0, -75.0, 0.0, 45.0, 0.0],
}


class ExperimentError(ValueError):
    pass


def experiment_config(name: str, user: dict | None = None, seed: int | None = None) -> SimConfig:
    """Defaults, then the experiment preset, then user overrides, then the seed."""
    if name not in PRESETS:
        raise ExperimentError(f"unknown experiment {name!r}; choose from {sorted(PRESETS)}")
    raw = merge(merge(DEFAULTS, PRESETS[name]), user or {})
    if seed is not None:
        raw["seed"] = seed
    return SimConfig.from_dict(raw)


def _write_report(out: Path, name: str, config: SimConfig, results: dict, summary_md: str) -> dict:
    report = {"experiment": name, "seed": config.seed, "config": config.raw, "results": results}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    header = f"# {name}\n\nseed: {config.seed}\n\n"
    (out / "summary.md").write_text(header + summary_md)
    return report


# ---------------------------------------------------------------------------
# Latency experiments
# ---------------------------------------------------------------------------


def _histogram_rows(h) -> list[list]:
    return [[fmt(float(lo)), int(c)] for lo, c in zip(h.edges[:-1], h.counts)]


def run_transport(config: SimConfig, out: Path) -> dict:
    """One-way transit times of a periodic packet stream."""
    exp = config.experiment
    clock = VirtualClock()
    link = SimLink(clock, config.jitter(), lambda data, t: None, name="nrt->rt")
    period = int(round(NS_PER_S / exp["rate_hz"]))
    for i in range(exp["n_packets"]):
        clock.schedule(i * period, lambda i=i: link.send(b"\x00" * 64, i))
    clock.run()
    transit = [s.transit_ms for s in link.samples]
    h = histogram(transit, exp["bin_ms"])
    write_latency_csv(out / "latency.csv", transit)
    write_column_csv(out / "histogram.csv", ["bin_lo_ms", "count"], _histogram_rows(h))
    frac = fraction_above(transit, exp["threshold_ms"])
    results = {
        "n_packets": len(transit),
        "fraction_above_threshold": frac,
        "threshold_ms": exp["threshold_ms"],
        "min_ms": h.min_ms,
        "max_ms": h.max_ms,
    }
    md = markdown_table(["packets", f"fraction > {exp['threshold_ms']} ms"], [[len(transit), frac]])
    return _write_report(out, "transport", config, results, md)


def handled_latencies(config: SimConfig, n_packets: int, rate_hz: float) -> list[float]:
    """Send-to-handled-tick latency of streamed samples through the RT controller."""
    bridge = Bridge(config)
    duration = (n_packets - 1) / rate_hz
    t = np.array([0.0, duration])
    traj = JointTrajectory.from_arrays(t, np.zeros((2, config.dof)))
    handle = bridge.client.stream_arm_refs(traj, rate_hz, True, action_window=False)
    bridge.client.await_result(handle, duration + 1.0)
    bridge.run_for(0.1)
    return [s.end_to_end_ms for s in bridge.rt.latency]


def run_latency_modes(config: SimConfig, out: Path) -> dict:
    exp = config.experiment
    rows, per_seed, all_samples = [], [], []
    for k in range(exp["n_seeds"]):
        seed = config.seed + k
        cfg = config.with_overrides({"seed": seed})
        lat = handled_latencies(cfg, exp["n_packets"], exp["rate_hz"])
        all_samples += lat
        h = histogram(lat, exp["bin_ms"])
        modes = h.modes()
        gap = modes[1] - modes[0] if len(modes) == 2 else None
        per_seed.append({"seed": seed, "modes_ms": modes, "gap_ms": gap, "n": len(lat)})
        rows.append([seed, len(modes), " ".join(fmt(m) for m in modes), fmt(gap) if gap is not None else ""])
        rows_lat = ([seed, float(x)] for x in lat)
        mode = "w" if k == 0 else "a"
        with open(out / "latency.csv", mode) as fh:
            if k == 0:
                fh.write("seed,latency_ms\n")
            for s, x in rows_lat:
                fh.write(f"{s},{fmt(x)}\n")
    write_column_csv(out / "modes.csv", ["seed", "n_modes", "modes_ms", "gap_ms"], rows)
    h_all = histogram(all_samples, exp["bin_ms"])
    write_column_csv(out / "histogram.csv", ["bin_lo_ms", "count"], _histogram_rows(h_all))
    bimodal = all(len(s["modes_ms"]) == 2 for s in per_seed)
    results = {"per_seed": per_seed, "all_bimodal": bimodal, "pooled_modes_ms": h_all.modes()}
    md = markdown_table(
        ["seed", "modes (ms)", "gap (ms)"],
        [[s["seed"], ", ".join(f"{m:.3f}" for m in s["modes_ms"]), s["gap_ms"] if s["gap_ms"] is not None else "-"] for s in per_seed],
    )
    return _write_report(out, "latency_modes", config, results, md)


def stream_success(config: SimConfig, rate_hz: float, n: int, action_window: bool, up=None, down=None) -> tuple[list[GoalRecord], int]:
    """Stream ``n`` samples at ``rate_hz`` to an echo server; returns goal records and deliveries."""
    clock = VirtualClock()
    client, server = echo_pair(clock, up or config.jitter(), down or config.return_jitter(), seed=config.seed)
    duration = (n - 1) / rate_hz
    traj = JointTrajectory.from_arrays(np.array([0.0, duration]), np.zeros((2, config.dof)))
    handle = client.stream_arm_refs(traj, rate_hz, True, action_window=action_window)
    client.await_result(handle, duration + 1.0)
    clock.run_until(clock.now_ns + NS_PER_S)
    records = [GoalRecord(rate_hz, s.succeeded, s.seq, s.sent_ns, s.result_ns) for s in handle.samples]
    return records, len(server.received)


def window_oracle(rtt_ms: float, rate_hz: float) -> float:
    """Constant-latency success rate: Result must return before the next issuance."""
    return 1.0 if rtt_ms < 1000.0 / rate_hz else 0.0


def run_success_rate(config: SimConfig, out: Path) -> dict:
    exp = config.experiment
    n = exp["n_requests"]
    log: list[GoalRecord] = []
    topic: dict[float, float] = {}
    for rate in exp["frequencies_hz"]:
        records, _ = stream_success(config, float(rate), n, True)
        log += records
        _, delivered = stream_success(config, float(rate), n, False)
        topic[float(rate)] = delivered / n
    rates = success_rate(log)
    oracle_rows = []
    for rtt, rate in ((7.0, 200.0), (3.0, 100.0), (3.0, 200.0), (12.0, 100.0)):
        half = JitterModel.constant(rtt / 2)
        records, _ = stream_success(config, rate, 50, True, up=half, down=half)
        measured = success_rate(records)[rate]
        oracle_rows.append([fmt(rtt), fmt(rate), fmt(measured), fmt(window_oracle(rtt, rate))])
    write_column_csv(
        out / "success_rate.csv",
        ["rate_hz", "action_success", "topic_delivery"],
        [[fmt(r), fmt(rates[r]), fmt(topic[r])] for r in rates],
    )
    write_column_csv(out / "oracle.csv", ["rtt_ms", "rate_hz", "measured", "oracle"], oracle_rows)
    results = {
        "action_success": {str(r): v for r, v in rates.items()},
        "topic_delivery": {str(r): v for r, v in topic.items()},
        "oracle_agrees": all(row[2] == row[3] for row in oracle_rows),
        "monotone": all(a >= b for a, b in zip(list(rates.values()), list(rates.values())[1:])),
    }
    md = markdown_table(["rate (Hz)", "action", "topic"], [[r, rates[r], topic[r]] for r in rates])
    return _write_report(out, "success_rate", config, results, md)


# ---------------------------------------------------------------------------
# Tracking
# ---------------------------------------------------------------------------


def tracking_trajectory(dof: int = 7, duration: float = 4.0, rate_hz: float = 10.0) -> JointTrajectory:
    """Smooth rest-to-rest out-and-back motion sampled at ``rate_hz``."""
    n = int(round(duration * rate_hz)) + 1
    t = np.linspace(0.0, duration, n)
    amplitudes = np.linspace(15.0, 60.0, dof)
    profile = (1.0 - np.cos(2.0 * math.pi * t / duration)) / 2.0
    return JointTrajectory.from_arrays(t, np.outer(profile, amplitudes))


TRACKING_MODES = ("raw_low", "interp_high", "single")


def run_tracking_mode(config: SimConfig, mode: str, traj: JointTrajectory | None = None) -> tuple[TrackingReport, tuple]:
    exp = {**PRESETS["tracking"]["experiment"], **config.experiment}
    traj = traj or tracking_trajectory(config.dof, exp["duration_s"], exp["waypoint_hz"])
    bridge = Bridge(config)
    client = bridge.client
    if mode == "raw_low":
        handle = client.stream_arm_refs(traj, exp["low_hz"], False)
    elif mode == "interp_high":
        handle = client.stream_arm_refs(traj, exp["high_hz"], True)
    elif mode == "single":
        handle = client.send_single_trajectory(traj)
    else:
        raise ExperimentError(f"unknown tracking mode {mode!r}")
    state = client.await_result(handle, traj.duration + 2.0)
    if state is not GoalState.SUCCEEDED:
        raise ExperimentError(f"{mode}: goal ended {state.name}")
    bridge.run_for(exp["settle_s"])
    log = bridge.rt.logs["left"]
    ticks, ref, meas = log.arrays()
    first = next(i for i, s in enumerate(log.applied_seq) if s is not None)
    ticks, ref, meas = ticks[first:], ref[first:], meas[first:]
    return tracking_std(ref, meas, mode), (ticks, ref, meas)


def run_tracking(config: SimConfig, out: Path) -> dict:
    reports = {}
    for mode in TRACKING_MODES:
        rep, (ticks, ref, meas) = run_tracking_mode(config, mode)
        write_tracking_csv(out / f"tracking_{mode}.csv", ticks, ref, meas)
        reports[mode] = rep
    write_column_csv(
        out / "tracking_std.csv",
        ["mode", *(f"std_j{j}" for j in range(config.dof)), "std_max", "max_abs_max"],
        [[m, *map(fmt, r.std), fmt(r.std_max), fmt(r.max_abs_max)] for m, r in reports.items()],
    )
    low = reports["raw_low"].std_max
    results = {
        "reports": {m: r.to_dict() for m, r in reports.items()},
        "ratio_raw_to_interp": low / reports["interp_high"].std_max,
        "ratio_raw_to_single": low / reports["single"].std_max,
        "std_convention": "population",
    }
    md = markdown_table(
        ["mode", "max joint std (deg)", "max |error| (deg)"],
        [[m, r.std_max, r.max_abs_max] for m, r in reports.items()],
    )
    return _write_report(out, "tracking", config, results, md)


# ---------------------------------------------------------------------------
# Perception and end to end
# ---------------------------------------------------------------------------


def run_perception(config: SimConfig, out: Path) -> dict:
    exp = config.experiment
    specs = single_object_specs(
        list(DEFAULT_CATALOG),
        exp["poses_per_category"],
        config.seed,
        noise_sigma=exp["noise_sigma"],
        outlier_fraction=exp["outlier_fraction"],
    )
    rows, errors = [], []
    for i, spec in enumerate(specs):
        scene = gen_scene(spec, seed=config.seed + i)
        (res,) = detect_boxes(scene.cloud, scene.rois, spec.intrinsics, spec.catalog, DetectorParams(seed=config.seed + i))
        obj = spec.objects[0]
        if isinstance(res, DetectionFailure):
            err, reason = math.inf, res.reason
        else:
            err, reason = float(np.linalg.norm(res.center - scene.boxes[0].center)), ""
        errors.append(err)
        rows.append([i, obj.category, fmt(obj.x), fmt(obj.y), fmt(obj.yaw), fmt(err), int(err <= exp["tolerance_m"]), reason])
    write_column_csv(out / "perception.csv", ["index", "category", "x", "y", "yaw", "center_error_m", "within_tol", "failure"], rows)
    errors_arr = np.array(errors)
    frac = float(np.mean(errors_arr <= exp["tolerance_m"]))
    per_cat = {}
    for cat in DEFAULT_CATALOG:
        e = np.array([err for err, spec in zip(errors, specs) if spec.objects[0].category == cat])
        per_cat[cat] = {"fraction_within": float(np.mean(e <= exp["tolerance_m"])), "median_error_m": float(np.median(e))}
    results = {"n_fits": len(specs), "fraction_within_tolerance": frac, "per_category": per_cat}
    md = markdown_table(
        ["category", "fraction within 1 cm", "median error (mm)"],
        [[c, v["fraction_within"], v["median_error_m"] * 1000] for c, v in per_cat.items()],
    )
    return _write_report(out, "perception", config, results, md)


def approach_pose(box: Box3D, dof: int) -> np.ndarray:
    base = APPROACH_POSES.get(box.category, APPROACH_POSES["snack_box"])
    pose = np.resize(np.array(base, dtype=float), dof)
    pose[0] = math.degrees(math.atan2(box.center[0], box.center[2]))
    return pose


def straight_line(q0: np.ndarray, q1: np.ndarray, duration: float, rate_hz: float) -> JointTrajectory:
    n = int(round(duration * rate_hz)) + 1
    s = np.linspace(0.0, 1.0, n)
    return JointTrajectory.from_arrays(s * duration, q0 + np.outer(s, q1 - q0))


def run_end_to_end(config: SimConfig, out: Path) -> dict:
    exp = config.experiment
    rng = np.random.default_rng(config.seed)
    cats = list(DEFAULT_CATALOG)
    xs = np.linspace(-0.25, 0.25, exp["n_objects"]) if exp["n_objects"] > 1 else [0.0]
    objects = tuple(
        ObjectPose(cats[i % len(cats)], float(x), float(rng.uniform(0.65, 0.95)), float(rng.uniform(0, math.pi)))
        for i, x in enumerate(xs)
    )
    spec = SceneSpec(objects)
    scene = gen_scene(spec, seed=config.seed)
    detections = detect_boxes(scene.cloud, scene.rois, spec.intrinsics, spec.catalog, DetectorParams(seed=config.seed))

    bridge = Bridge(config)
    q = np.zeros(config.dof)
    det_rows, goal_rows = [], []
    for i, (det, gt) in enumerate(zip(detections, scene.boxes)):
        if isinstance(det, DetectionFailure):
            det_rows.append([i, det.category, "", "", "", "", det.reason])
            continue
        err = float(np.linalg.norm(det.center - gt.center))
        det_rows.append([i, det.category, *map(fmt, det.center), fmt(err), ""])
        target = approach_pose(det, config.dof)
        handle = bridge.client.send_single_trajectory(straight_line(q, target, exp["move_s"], exp["waypoint_hz"]))
        state = bridge.client.await_result(handle, exp["move_s"] + 2.0)
        goal_rows.append([i, handle.seq, state.name, *map(fmt, target)])
        q = target
    bridge.run_for(exp["settle_s"])
    log = bridge.rt.logs["left"]
    ticks, ref, meas = log.arrays()
    first = next((i for i, s in enumerate(log.applied_seq) if s is not None), 0)
    report = tracking_std(ref[first:], meas[first:], "end_to_end")
    write_column_csv(out / "detections.csv", ["roi", "category", "cx", "cy", "cz", "center_error_m", "failure"], det_rows)
    write_column_csv(out / "goals.csv", ["roi", "goal_seq", "state", *(f"q{j}" for j in range(config.dof))], goal_rows)
    write_tracking_csv(out / "tracking.csv", ticks[first:], ref[first:], meas[first:])
    final_error = float(np.abs(meas[-1] - q).max())
    results = {"tracking": report.to_dict(), "n_detections": sum(isinstance(d, Box3D) for d in detections), "final_error_deg": final_error}
    md = markdown_table(["detections", "max joint std (deg)", "final error (deg)"], [[results["n_detections"], report.std_max, final_error]])
    return _write_report(out, "end_to_end", config, results, md)


EXPERIMENTS: dict[str, Callable[[SimConfig, Path], dict]] = {
    "transport": run_transport,
    "success_rate": run_success_rate,
    "latency_modes": run_latency_modes,
    "tracking": run_tracking,
    "perception": run_perception,
    "end_to_end": run_end_to_end,
}


def run_experiment(name: str, out_dir: str | Path, *, seed: int | None = None, overrides: dict | None = None) -> dict:
    config = experiment_config(name, overrides, seed)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ExperimentError(f"output directory not writable: {out}") from exc
    return EXPERIMENTS[name](config, out)
