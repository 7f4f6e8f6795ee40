"""In-process NRT <-> RT bridge: one clock, two jittered links, both ends."""

from __future__ import annotations

import numpy as np

from .config import SimConfig
from .nrtclient import NrtClient
from .protocol import Frame, FrameParser, Result, Status, encode
from .rtcontrol import RtController, entity_key
from .simkit import JitterModel, SimLink, make_clock


class Bridge:
    """Everything one simulation run needs, seeded from the config.

    The client starts at ``client_phase_ms`` past the first control tick so
    sends are not aligned with tick boundaries.
    """

    def __init__(self, config: SimConfig, initial_q=None) -> None:
        self.config = config
        self.clock = make_clock(config.clock_mode)
        up_seed, down_seed = np.random.SeedSequence(config.seed).spawn(2)
        self.rt = RtController(config.rt_params(), initial_q=initial_q)
        self.uplink = SimLink(
            self.clock, config.jitter(), self.rt.on_bytes, rng=np.random.default_rng(up_seed), name="nrt->rt"
        )
        self.client = NrtClient(self.clock, self.uplink)
        self.downlink = SimLink(
            self.clock,
            config.return_jitter(),
            self.client.on_bytes,
            rng=np.random.default_rng(down_seed),
            name="rt->nrt",
        )
        self.rt.send = self.downlink.send
        self.rt.attach(self.clock)
        self.clock.run_until(config.client_phase_ns)

    @property
    def period_ns(self) -> int:
        return self.rt.params.control_period_ns

    def run_for(self, seconds: float) -> None:
        self.clock.run_until(self.clock.now_ns + int(round(seconds * 1e9)))

    def run_until_tick(self, tick: int) -> None:
        self.clock.run_until(tick * self.period_ns)

    def close(self) -> None:
        self.uplink.close()
        self.downlink.close()


class EchoActionServer:
    """Answers every goal-like frame with an immediate Result.

    Isolates the round-trip window rule from RT tick quantization.
    """

    def __init__(self, clock, send=None) -> None:
        self.clock = clock
        self.send = send
        self.parser = FrameParser()
        self.received: list[tuple[int, Frame]] = []
        self._seq = 0

    def on_bytes(self, data: bytes, t_arrival_ns: int) -> None:
        self.parser.feed(data)
        for frame in self.parser.frames():
            self.received.append((t_arrival_ns, frame))
            if self.send is not None and entity_key(frame.body) is not None:
                self._seq += 1
                reply = Frame(self._seq, self.clock.now_ns, Result(frame.seq, Status.OK))
                self.send(encode(reply), self._seq)


def echo_pair(clock, up: JitterModel, down: JitterModel, seed: int = 0) -> tuple[NrtClient, EchoActionServer]:
    """Client and echo server joined by two jittered links."""
    up_seed, down_seed = np.random.SeedSequence(seed).spawn(2)
    server = EchoActionServer(clock)
    uplink = SimLink(clock, up, server.on_bytes, rng=np.random.default_rng(up_seed), name="nrt->srv")
    client = NrtClient(clock, uplink)
    downlink = SimLink(clock, down, client.on_bytes, rng=np.random.default_rng(down_seed), name="srv->nrt")
    server.send = downlink.send
    return client, server
