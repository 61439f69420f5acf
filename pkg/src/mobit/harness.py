"""Deterministic simulation: virtual clock plus a shaped in-process link.

The whole client/server exchange runs single-threaded over a virtual
millisecond clock, so identical inputs and seed give byte-identical
traces.  Downstream (server to client) frames are serialized through a
store-and-forward pipe: transmission time accrues back-to-back at the
modeled bandwidth and latency plus seeded jitter is added per frame.
Upstream control frames are tiny and delivered on the same tick, which
matches the latency-hiding arithmetic the prefetch planner advertises:
data is in hand one latency plus one transfer after the request.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass
from fractions import Fraction
from math import ceil
from typing import Callable, Iterable, Sequence

from .client import ClientOptions, ClientSession, PlaybackReport
from .flow import CompileOptions
from .model import Document
from .server import (
    DEFAULT_CHUNK_SIZE,
    DirectoryStore,
    DocStore,
    ServerOptions,
    ServerSession,
    load_compiled_doc,
)
from .subserver import PluginHandles, Subserver, TextSender, default_registry
from .wire import ServerInfo

__all__ = [
    "NetModel",
    "SimulationStuckError",
    "VirtualClock",
    "simulate",
]

SUBSERVER_PORT_BASE = 7001


@dataclass(frozen=True)
class NetModel:
    """Downstream link shape; deterministic for a given seed."""

    latency_ms: int = 0
    bytes_per_s: int = 10**12
    jitter_ms: int = 0

    def __post_init__(self) -> None:
        if self.latency_ms < 0 or self.jitter_ms < 0:
            raise ValueError("latency and jitter must be >= 0")
        if self.bytes_per_s <= 0:
            raise ValueError("bytes_per_s must be > 0")


class VirtualClock:
    """Time-ordered callback queue; time only moves when events fire."""

    def __init__(self) -> None:
        self.now = 0
        self._heap: list[tuple[int, int, Callable[[], None]]] = []
        self._seq = 0

    def schedule(self, at: int, fn: Callable[[], None]) -> None:
        if at < self.now:
            raise ValueError(f"cannot schedule at {at} before now {self.now}")
        heapq.heappush(self._heap, (at, self._seq, fn))
        self._seq += 1

    def pending(self) -> bool:
        return bool(self._heap)

    def step(self) -> None:
        at, _, fn = heapq.heappop(self._heap)
        self.now = at
        fn()


class _ShapedLink:
    """Store-and-forward pipe: one frame at a time, order preserving."""

    def __init__(self, net: NetModel, rng: random.Random):
        self.net = net
        self.rng = rng
        self._busy_until = Fraction(0)
        self._last_arrival = 0

    def arrival_of(self, nbytes: int, send_ms: int) -> int:
        start = max(Fraction(send_ms), self._busy_until)
        done = start + Fraction(nbytes * 1000, self.net.bytes_per_s)
        self._busy_until = done
        jitter = self.rng.randint(0, self.net.jitter_ms) if self.net.jitter_ms else 0
        arrival = ceil(done + self.net.latency_ms + jitter)
        # ordered transport: a lucky jitter draw must not overtake
        arrival = max(arrival, self._last_arrival)
        self._last_arrival = arrival
        return arrival


class SimulationStuckError(RuntimeError):
    def __init__(self, report: PlaybackReport):
        super().__init__(
            f"simulation ran out of events in state {report.final_state.value}"
        )
        self.report = report


def simulate(
    doc: Document,
    net: NetModel = NetModel(),
    compile_opts: CompileOptions = CompileOptions(),
    client_opts: ClientOptions = ClientOptions(),
    seed: int = 0,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    plugins: Sequence[str] = (),
    injections: Iterable[tuple[int, str, str]] = (),
    store_dir: str | None = None,
) -> PlaybackReport:
    """Run server and client over the virtual clock; fully deterministic.

    ``injections`` are (at_ms, plugin_name, text) triples delivered to the
    named sub-server at the given virtual time.
    """
    rng = random.Random(seed)
    clock = VirtualClock()
    link = _ShapedLink(net, rng)

    store = DocStore()
    directory = DirectoryStore(store_dir) if store_dir else None
    store.add(load_compiled_doc(doc, compile_opts, directory))

    registry = default_registry()
    active_plugins: dict[str, Subserver] = {}
    next_port = SUBSERVER_PORT_BASE
    client = ClientSession(client_opts)

    session: ServerSession | None = None

    def downstream(frames: list[bytes]) -> None:
        for frame in frames:
            arrival = link.arrival_of(len(frame), clock.now)
            clock.schedule(arrival, lambda f=frame: client_input(f))

    def emit(port: int, payload: bytes) -> None:
        assert session is not None
        frame = session.stream_event_frame(port, clock.now, payload)
        if frame is not None:
            downstream([frame])

    for name in plugins:
        plugin = registry.create(name)
        count = plugin.get_port_count()
        plugin.set_ports(range(next_port, next_port + count))
        next_port += count
        plugin.set_data(PluginHandles(emit=emit, clock=lambda: clock.now))
        active_plugins[name] = plugin

    info = ServerInfo(tuple(p.descriptor() for p in active_plugins.values()))
    session = ServerSession(store, info, ServerOptions(chunk_size=chunk_size))

    def upstream(data: bytes) -> None:
        if data:
            downstream(session.feed(data))

    def client_input(frame: bytes) -> None:
        upstream(client.on_bytes(frame, clock.now))
        arm_wakeup()

    armed: set[int] = set()

    def arm_wakeup() -> None:
        at = client.next_wakeup(clock.now)
        if at is None or at in armed:
            return
        armed.add(at)
        clock.schedule(at, lambda t=at: wakeup(t))

    def wakeup(t: int) -> None:
        armed.discard(t)
        upstream(client.on_wakeup(clock.now))
        arm_wakeup()

    for at, plugin_name, text in injections:
        plugin = active_plugins.get(plugin_name)
        if plugin is None:
            raise ValueError(f"injection names unknown plugin {plugin_name!r}")
        if not isinstance(plugin, TextSender):
            raise ValueError(f"plugin {plugin_name!r} does not accept text injections")
        clock.schedule(at, lambda p=plugin, s=text: p.deliver_line(s))

    clock.schedule(0, lambda: upstream(client.hello()))

    while not client.finished:
        if not clock.pending():
            raise SimulationStuckError(client.report())
        clock.step()

    return client.report()
