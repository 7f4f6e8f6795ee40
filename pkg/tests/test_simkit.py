import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bridgesim.simkit import (
    JitterModel,
    LatencySample,
    LinkClosed,
    SimLink,
    VirtualClock,
    make_clock,
    ms_to_ns,
    sample_latency,
)


class TestVirtualClock:
    def test_equal_times_keep_insertion_order(self):
        clock = VirtualClock()
        seen = []
        for name in "abcde":
            clock.schedule(10, lambda n=name: seen.append(n))
        clock.run()
        assert seen == list("abcde")

    def test_priority_breaks_ties_before_insertion(self):
        clock = VirtualClock()
        seen = []
        clock.schedule(5, lambda: seen.append("late"), priority=1)
        clock.schedule(5, lambda: seen.append("early"))
        clock.run()
        assert seen == ["early", "late"]

    def test_run_until_bound(self):
        clock = VirtualClock()
        seen = []
        for t in (1, 5, 10, 11, 20):
            clock.schedule(t, lambda t=t: seen.append(t))
        dispatched = clock.run_until(10)
        assert seen == [1, 5, 10]
        assert [e.time_ns for e in dispatched] == [1, 5, 10]
        assert clock.now_ns == 10
        clock.run_until(15)
        assert seen == [1, 5, 10, 11]
        assert clock.now_ns == 15

    def test_schedule_in_past_rejected(self):
        clock = VirtualClock()
        clock.run_until(100)
        with pytest.raises(ValueError):
            clock.schedule(99, lambda: None)

    def test_cancelled_event_skipped(self):
        clock = VirtualClock()
        seen = []
        ev = clock.schedule(3, lambda: seen.append(1))
        ev.cancel()
        assert clock.run() == 0
        assert seen == []

    def test_events_scheduled_during_dispatch(self):
        clock = VirtualClock(keep_log=True)
        out = []

        def tick(k):
            out.append((clock.now_ns, k))
            if k < 3:
                clock.schedule_in(5, lambda: tick(k + 1), label="tick")

        clock.schedule(0, lambda: tick(0), label="tick")
        clock.run()
        assert out == [(0, 0), (5, 1), (10, 2), (15, 3)]
        assert [t for t, _ in clock.log] == [0, 5, 10, 15]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 1000), min_size=1, max_size=50))
    def test_time_never_decreases(self, times):
        clock = VirtualClock()
        stamps = []
        for t in times:
            clock.schedule(t, lambda: stamps.append(clock.now_ns))
        clock.run()
        assert stamps == sorted(times)

    def test_make_clock(self):
        assert make_clock("virtual").mode == "virtual"
        assert make_clock("wall").mode == "wall"
        with pytest.raises(ValueError):
            make_clock("sundial")

    def test_wall_clock_runs_events_in_order(self):
        clock = make_clock("wall")
        seen = []
        clock.schedule(ms_to_ns(2), lambda: seen.append(2))
        clock.schedule(ms_to_ns(1), lambda: seen.append(1))
        clock.run_until(ms_to_ns(3))
        assert seen == [1, 2]
        assert clock.now_ns >= ms_to_ns(3)


class TestJitterModel:
    def test_tail_zero_is_constant(self):
        model = JitterModel(base_ms=22.0, tail_prob=0.0)
        rng = model.rng()
        assert {sample_latency(model, rng) for _ in range(1000)} == {22.0}

    def test_tail_one_is_constant_27(self):
        model = JitterModel(base_ms=22.0, tail_prob=1.0, tail_extra_ms=5.0)
        rng = model.rng()
        assert {sample_latency(model, rng) for _ in range(1000)} == {27.0}

    def test_tail_fraction_within_binomial_bound(self):
        model = JitterModel(base_ms=22.0, tail_prob=0.1, tail_extra_ms=5.0, seed=7)
        rng = model.rng()
        draws = np.array([sample_latency(model, rng) for _ in range(10_000)])
        frac = np.mean(draws > 22.0)
        assert 0.08 <= frac <= 0.12
        assert set(np.unique(draws)) == {22.0, 27.0}

    def test_same_seed_same_stream(self):
        model = JitterModel(seed=123)
        a = [sample_latency(model, model.rng()) for _ in range(1)]
        r1, r2 = model.rng(), model.rng()
        s1 = [sample_latency(model, r1) for _ in range(500)]
        s2 = [sample_latency(model, r2) for _ in range(500)]
        assert s1 == s2
        assert a[0] == s1[0]

    @pytest.mark.parametrize(
        "kwargs", [dict(base_ms=-1.0), dict(tail_prob=1.5), dict(tail_prob=-0.1), dict(tail_extra_ms=-2.0)]
    )
    def test_invalid_parameters(self, kwargs):
        with pytest.raises(ValueError):
            JitterModel(**kwargs)


class TestLatencySample:
    def test_arrival_before_send_rejected(self):
        with pytest.raises(ValueError):
            LatencySample(1, 10, 5)

    def test_end_to_end_uses_handled_tick(self):
        s = LatencySample(1, ms_to_ns(3), ms_to_ns(25), handled_tick=5, period_ns=ms_to_ns(5))
        assert s.transit_ms == 22.0
        assert s.end_to_end_ms == 22.0
        assert LatencySample(1, 0, 1).end_to_end_ms is None


class TestSimLink:
    def _run(self, seed, n=200):
        clock = VirtualClock()
        got = []
        link = SimLink(clock, JitterModel(seed=seed), lambda d, t: got.append((d, t)))
        for i in range(n):
            clock.schedule(i * 1_000_000, lambda i=i: link.send(bytes([i % 256]), seq=i))
        clock.run()
        return link.samples, got

    def test_same_seed_identical_samples(self):
        a, _ = self._run(3)
        b, _ = self._run(3)
        assert a == b

    def test_fifo_delivery(self):
        samples, got = self._run(5)
        times = [t for _, t in got]
        assert times == sorted(times)
        assert [d[0] for d, _ in got] == [i % 256 for i in range(200)]
        assert all(s.t_arrive_ns >= s.t_send_ns for s in samples)

    def test_closed_link_raises(self):
        link = SimLink(VirtualClock(), JitterModel(), lambda d, t: None)
        link.close()
        with pytest.raises(LinkClosed):
            link.send(b"x")
