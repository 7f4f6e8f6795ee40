import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bridgesim.bridge import Bridge, echo_pair
from bridgesim.config import SimConfig
from bridgesim.nrtclient import (
    GoalHandle,
    GoalState,
    NrtClient,
    SingleTrajectory,
    Stream,
    stream_positions,
)
from bridgesim.protocol import ArmRefSample, FrameParser, GoalArmTrajectory, GoalBase, GoalGripper, Result, Side
from bridgesim.simkit import JitterModel, LinkClosed, VirtualClock
from bridgesim.trajmath import JointTrajectory

MS = 1_000_000


def ramp(duration=1.0, n=11, dof=2, scale=10.0):
    t = np.linspace(0.0, duration, n)
    q = np.outer(t, np.arange(1, dof + 1)) * scale
    return JointTrajectory.from_arrays(t, q)


class Recorder:
    def __init__(self, clock):
        self.clock = clock
        self.parser = FrameParser()
        self.frames = []
        self.closed = False

    def send(self, data, seq=-1):
        self.parser.feed(data)
        self.frames += [(self.clock.now_ns, f) for f in self.parser.frames()]


def constant_pair(up_ms, down_ms):
    clock = VirtualClock()
    client, server = echo_pair(clock, JitterModel.constant(up_ms), JitterModel.constant(down_ms))
    return clock, client, server


class TestGoalHandle:
    def test_forward_only(self):
        h = GoalHandle("arm", None, 0)
        h.advance(GoalState.ACTIVE)
        h.advance(GoalState.SUCCEEDED)
        with pytest.raises(ValueError):
            h.advance(GoalState.FAILED)
        g = GoalHandle("arm", None, 0)
        g.advance(GoalState.ACTIVE)
        with pytest.raises(ValueError):
            g.advance(GoalState.PENDING)


class TestLanes:
    def test_base_and_gripper_concurrent(self):
        clock, client, _ = constant_pair(1.0, 1.0)
        b = client.submit(GoalBase(0.1, 0, 0, 1.0))
        g = client.submit(GoalGripper(Side.LEFT, 1.0))
        assert b.state is GoalState.ACTIVE and g.state is GoalState.ACTIVE

    def test_same_lane_serializes(self):
        clock, client, server = constant_pair(1.0, 1.0)
        a = client.send_single_trajectory(ramp())
        b = client.send_single_trajectory(ramp())
        assert a.state is GoalState.ACTIVE and b.state is GoalState.PENDING
        assert client.await_result(a, 1.0) is GoalState.SUCCEEDED
        assert b.state is GoalState.ACTIVE
        assert b.sent_ns == a.result_ns == 2 * MS
        client.await_result(b, 1.0)
        assert b.succeeded

    def test_submit_on_closed_link(self):
        clock, client, _ = constant_pair(1.0, 1.0)
        client.link.close()
        with pytest.raises(LinkClosed):
            client.submit(GoalBase(0, 0, 0, 1))
        with pytest.raises(LinkClosed):
            NrtClient(clock).submit(GoalBase(0, 0, 0, 1))

    def test_non_goal_rejected(self):
        clock, client, _ = constant_pair(1.0, 1.0)
        with pytest.raises(TypeError):
            client.submit(Result(1, 0))

    def test_per_lane_seq_increasing(self):
        clock = VirtualClock()
        rec = Recorder(clock)
        client = NrtClient(clock, rec)
        client.stream_arm_refs(ramp(), 50, True, action_window=False)
        client.submit(GoalBase(0, 0, 0, 1))
        clock.run_until(2 * 10**9)
        arm = [f.seq for _, f in rec.frames if isinstance(f.body, ArmRefSample)]
        assert arm == sorted(arm) and len(set(arm)) == len(arm)


class TestSingleTrajectory:
    def test_one_frame_on_wire(self):
        clock = VirtualClock()
        rec = Recorder(clock)
        client = NrtClient(clock, rec)
        client.send_single_trajectory(ramp(n=3))
        clock.run_until(10**9)
        assert len(rec.frames) == 1
        body = rec.frames[0][1].body
        assert isinstance(body, GoalArmTrajectory) and body.count == 3

    def test_status_nonzero_fails(self):
        clock = VirtualClock()
        client = NrtClient(clock, Recorder(clock))
        h = client.send_single_trajectory(ramp())
        client._route(Result(h.seq, 3), clock.now_ns)
        assert h.state is GoalState.FAILED and h.status == 3

    def test_timeout_without_result(self):
        clock = VirtualClock()
        client = NrtClient(clock, Recorder(clock))
        h = client.send_single_trajectory(ramp())
        assert client.await_result(h, 0.25) is GoalState.TIMED_OUT
        assert clock.now_ns == 250 * MS

    def test_through_rt_controller(self):
        bridge = Bridge(SimConfig.from_dict({"dof": 2, "jitter": {"tail_prob": 0.0}}))
        h = bridge.client.send_single_trajectory(ramp(duration=1.0))
        assert bridge.client.await_result(h, 5.0) is GoalState.SUCCEEDED
        assert h.ack_ns is not None and len(h.feedback) == 9


class TestStreaming:
    @pytest.mark.parametrize("rate, interpolate, gap_ms", [(10, False, 100), (200, True, 5)])
    def test_emission_cadence(self, rate, interpolate, gap_ms):
        clock = VirtualClock()
        rec = Recorder(clock)
        client = NrtClient(clock, rec)
        client.stream_arm_refs(ramp(duration=1.0), rate, interpolate, action_window=False)
        clock.run_until(2 * 10**9)
        times = np.array([t for t, _ in rec.frames])
        assert set(np.diff(times)) == {gap_ms * MS}

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0.05, 3.0), st.sampled_from([10, 50, 100, 200, 250, 333]))
    def test_sample_count(self, duration, rate):
        traj = ramp(duration=duration, n=4)
        positions = stream_positions(traj, rate, True)
        assert len(positions) == int(np.floor(duration * rate + 1e-9)) + 1

    def test_interpolated_steps_bounded_by_slope(self):
        rng = np.random.default_rng(2)
        t = np.cumsum(rng.uniform(0.05, 0.2, 12))
        t -= t[0]
        q = rng.uniform(-30, 30, (12, 3))
        traj = JointTrajectory.from_arrays(t, q)
        pos = stream_positions(traj, 200, True)
        vmax = np.max(np.abs(np.diff(q, axis=0)) / np.diff(t)[:, None])
        assert np.max(np.abs(np.diff(pos, axis=0))) <= vmax * 0.005 + 1e-9

    @pytest.mark.parametrize("rate", [0, -5])
    def test_bad_rate(self, rate):
        clock, client, _ = constant_pair(1, 1)
        with pytest.raises(ValueError):
            client.stream_arm_refs(ramp(), rate, True)
        with pytest.raises(ValueError):
            Stream(rate)

    def test_empty_trajectory(self):
        clock, client, _ = constant_pair(1, 1)
        with pytest.raises(ValueError):
            client.stream_arm_refs(None, 10, True)

    @pytest.mark.parametrize("up, down, rate, expected", [(1.5, 1.5, 200, 1.0), (3.5, 3.5, 200, 0.0), (2.0, 1.0, 100, 1.0)])
    def test_window_rule_constant_latency(self, up, down, rate, expected):
        clock, client, _ = constant_pair(up, down)
        h = client.stream_arm_refs(ramp(duration=1.0), rate, True)
        clock.run_until(3 * 10**9)
        assert h.succeeded
        rate_ok = np.mean([s.succeeded for s in h.samples])
        assert rate_ok == expected
        assert all(s.terminal for s in h.samples)

    def test_result_exactly_at_deadline_fails(self):
        clock, client, _ = constant_pair(2.5, 2.5)
        h = client.stream_arm_refs(ramp(duration=0.1), 200, True)
        clock.run_until(10**9)
        assert not any(s.succeeded for s in h.samples)

    def test_request_arm_modes(self):
        clock, client, server = constant_pair(1, 1)
        client.request_arm(ramp(), SingleTrajectory())
        client.request_arm(ramp(), Stream(10))
        clock.run_until(3 * 10**9)
        kinds = [type(f.body).__name__ for _, f in server.received]
        assert kinds[0] == "GoalArmTrajectory" and kinds[1:] == ["ArmRefSample"] * 11
