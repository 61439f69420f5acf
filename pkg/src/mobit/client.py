"""Headless playback client: time state machine, prefetch buffer, trace.

The client drives a single shared presentation clock.  When a due show
lacks complete payload the whole clock pauses (a stall) and resumes once
the data is in; per-object skipping would break the ordered flow.  All
protocol logic sits in the transport-free :class:`ClientSession` so the
real socket runner and the simulation harness share one implementation.

Trace timestamps are presentation-clock milliseconds.  Display lifecycle
records (Compose/Display/Delete) carry the event's scheduled time, which
makes the trace exactly comparable with a script replay; bookkeeping
records carry the measured position.
"""

from __future__ import annotations

import math
import select
import socket
import time
from dataclasses import dataclass, field
from enum import Enum

from .script import FlowScript, Hide, End, Prefetch, Show, parse_script
from .wire import (
    Bye,
    DataChunk,
    DataReq,
    ErrorMsg,
    Hello,
    ScriptMsg,
    ServerInfo,
    StreamEvent,
    TruncatedError,
    WireError,
    decode_frame,
    encode_frame,
)

__all__ = [
    "BufferEntry",
    "ClientError",
    "ClientOptions",
    "ClientSession",
    "ConnectionLostError",
    "NetEstimate",
    "PlaybackReport",
    "PlayerState",
    "ProtocolError",
    "TraceRecord",
    "buffer_plan",
    "format_trace",
    "plan_eviction",
    "run",
    "validate_trace",
]

PROTOCOL_VERSION = 1


class PlayerState(str, Enum):
    INIT = "Init"
    BUFFERING = "Buffering"
    PLAYING = "Playing"
    STALLED = "Stalled"
    PAUSED = "Paused"
    FINISHED = "Finished"


LEGAL_TRANSITIONS = {
    (PlayerState.INIT, PlayerState.BUFFERING),
    (PlayerState.BUFFERING, PlayerState.PLAYING),
    (PlayerState.PLAYING, PlayerState.STALLED),
    (PlayerState.STALLED, PlayerState.PLAYING),
    (PlayerState.PLAYING, PlayerState.PAUSED),
    (PlayerState.PAUSED, PlayerState.PLAYING),
    (PlayerState.PLAYING, PlayerState.FINISHED),
}


class ClientError(Exception):
    pass


class ConnectionLostError(ClientError):
    def __init__(self, report: "PlaybackReport"):
        super().__init__(f"connection lost in state {report.final_state.value}")
        self.report = report


class ProtocolError(ClientError):
    def __init__(self, message: str, report: "PlaybackReport | None" = None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class TraceRecord:
    wall_at: int
    action: str  # Receive Compose Display Delete Stall Resume StateChange StreamDeliver
    subject: str
    detail: str

    def line(self) -> str:
        return f"{self.wall_at}\t{self.action}\t{self.subject}\t{self.detail}"


def format_trace(records) -> str:
    return "".join(r.line() + "\n" for r in records)


@dataclass
class BufferEntry:
    local_ref: int
    expected: int | None = None  # byte count; unknown until the first chunk
    data: bytearray = field(default_factory=bytearray)
    complete: bool = False
    last_use_at: int = 0
    evicted: bool = False

    @property
    def received(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class NetEstimate:
    latency_ms: int
    bytes_per_s: int


def buffer_plan(script: FlowScript, net: NetEstimate) -> dict[int, int]:
    """Required prefetch lead per local ref under the given network estimate.

    lead = latency + ceil(size * 1000 / bandwidth), i.e. the time between
    issuing a request and holding the complete payload.
    """
    out: dict[int, int] = {}
    for obj in script.ref_table.objects:
        transfer = math.ceil(obj.payload_size * 1000 / net.bytes_per_s)
        out[obj.local_ref] = net.latency_ms + transfer
    return out


def plan_eviction(
    sizes: dict[int, int],
    evictable_after: dict[int, int],
    now: int,
    budget: int,
) -> list[int]:
    """Refs to free, largest first, once their final hide has passed.

    A ref that will show again is never freed no matter the pressure;
    staying over budget is reported by the caller instead.
    """
    total = sum(sizes.values())
    if total <= budget:
        return []
    candidates = [
        ref
        for ref, size in sizes.items()
        if evictable_after.get(ref, 1 << 62) <= now and size > 0
    ]
    candidates.sort(key=lambda ref: (-sizes[ref], ref))
    freed: list[int] = []
    for ref in candidates:
        if total <= budget:
            break
        total -= sizes[ref]
        freed.append(ref)
    return freed


@dataclass(frozen=True)
class PlaybackReport:
    stall_count: int
    total_stall_ms: int
    buffering_wait_ms: int
    max_buffer_bytes: int
    final_state: PlayerState
    trace: tuple[TraceRecord, ...]
    warnings: tuple[str, ...]

    def trace_text(self) -> str:
        return format_trace(self.trace)


@dataclass(frozen=True)
class ClientOptions:
    doc_id: str = ""
    speed: float = 1.0
    buffer_budget: int | None = None
    net_estimate: NetEstimate | None = None


class ClientSession:
    """Transport-free playback session.

    Drive it with ``hello() -> bytes``, then ``on_bytes(data, now)`` for
    network input and ``on_wakeup(now)`` when ``next_wakeup(now)`` comes
    due.  ``now`` is a millisecond wall clock (real or virtual); the
    session derives the presentation position from it.
    """

    def __init__(self, opts: ClientOptions = ClientOptions()):
        self.opts = opts
        self.state = PlayerState.INIT
        self.script: FlowScript | None = None
        self.server_info = ServerInfo()
        self.trace: list[TraceRecord] = []
        self.warnings: list[str] = []
        self.stall_count = 0
        self.total_stall_ms = 0
        self.buffering_wait_ms = 0
        self.max_buffer_bytes = 0
        self.error: str | None = None

        self._buffer = b""
        self._entries: dict[int, BufferEntry] = {}
        self._requested: set[int] = set()
        self._cursor = 0
        self._pos_base = 0
        self._wall_base = 0
        self._buffering_since = 0
        self._pending_refs: set[int] = set()
        self._stalled_since = 0
        self._blocking: tuple[int, int] | None = None  # (instance_id, local_ref)
        self._displayed: dict[int, int] = {}  # instance_id -> local_ref
        self._mime_of: dict[int, str] = {}
        self._last_hide: dict[int, int] = {}
        self._buffer_total = 0

    # -- clock ---------------------------------------------------------

    def position(self, now: int) -> int:
        if self.state is PlayerState.PLAYING:
            return self._pos_base + int((now - self._wall_base) * self.opts.speed)
        return self._pos_base

    def next_wakeup(self, now: int) -> int | None:
        """Wall time of the next scheduled action, or None while waiting."""
        if self.state is not PlayerState.PLAYING or self.script is None:
            return None
        if self._cursor >= len(self.script.events):
            return None
        at = self.script.events[self._cursor].at
        delta = at - self._pos_base
        if delta <= 0:
            return now
        return self._wall_base + math.ceil(delta / self.opts.speed)

    @property
    def finished(self) -> bool:
        return self.state is PlayerState.FINISHED

    # -- trace helpers ---------------------------------------------------

    def _record(self, wall_at: int, action: str, subject: str, detail: str = "") -> None:
        self.trace.append(TraceRecord(wall_at, action, subject, detail))

    def _transition(self, new: PlayerState, at: int) -> None:
        assert (self.state, new) in LEGAL_TRANSITIONS, (self.state, new)
        self.state = new
        self._record(at, "StateChange", "-", new.value)

    # -- public protocol entry points ------------------------------------

    def hello(self) -> bytes:
        return encode_frame(Hello(PROTOCOL_VERSION, self.opts.doc_id))

    def get_server_info(self) -> ServerInfo:
        return self.server_info

    def set_server_info(self, info: ServerInfo) -> None:
        self.server_info = info

    def on_bytes(self, data: bytes, now: int) -> bytes:
        if self.error is not None:
            return b""
        self._buffer += data
        out: list[bytes] = []
        while True:
            try:
                msg, self._buffer = decode_frame(self._buffer)
            except TruncatedError:
                break
            except WireError as exc:
                self.error = f"undecodable frame from server: {exc}"
                raise ProtocolError(self.error, self.report())
            self._handle(msg, now, out)
            if self.error is not None:
                raise ProtocolError(self.error, self.report())
        return b"".join(out)

    def on_wakeup(self, now: int) -> bytes:
        out: list[bytes] = []
        if self.state is PlayerState.PLAYING:
            self._advance(now, out)
        return b"".join(out)

    def pause(self, now: int) -> None:
        if self.state is not PlayerState.PLAYING:
            return
        self._pos_base = self.position(now)
        self._transition(PlayerState.PAUSED, self._pos_base)

    def resume(self, now: int) -> None:
        if self.state is not PlayerState.PAUSED:
            return
        self._wall_base = now
        self._transition(PlayerState.PLAYING, self._pos_base)

    def report(self) -> PlaybackReport:
        return PlaybackReport(
            stall_count=self.stall_count,
            total_stall_ms=self.total_stall_ms,
            buffering_wait_ms=self.buffering_wait_ms,
            max_buffer_bytes=self.max_buffer_bytes,
            final_state=self.state,
            trace=tuple(self.trace),
            warnings=tuple(self.warnings),
        )

    # -- frame handling ---------------------------------------------------

    def _handle(self, msg, now: int, out: list[bytes]) -> None:
        if isinstance(msg, ServerInfo):
            self.set_server_info(msg)
        elif isinstance(msg, ScriptMsg):
            self._on_script(msg.script_bytes, now, out)
        elif isinstance(msg, DataChunk):
            self._on_chunk(msg, now, out)
        elif isinstance(msg, StreamEvent):
            self._on_stream_event(msg, now)
        elif isinstance(msg, ErrorMsg):
            self.error = f"server error {msg.code}: {msg.msg}"
        elif isinstance(msg, Bye):
            self.warnings.append("server sent bye")
        else:
            self.error = f"unexpected {type(msg).__name__} frame from server"

    def _on_script(self, data: bytes, now: int, out: list[bytes]) -> None:
        if self.state is not PlayerState.INIT:
            self.error = "script received twice"
            return
        self.script = parse_script(data)
        self._mime_of = {o.local_ref: o.mime for o in self.script.ref_table.objects}
        self._last_hide = self.script.last_hide_by_ref()
        self._transition(PlayerState.BUFFERING, 0)
        self._buffering_since = now
        if self.opts.net_estimate is not None:
            plan = buffer_plan(self.script, self.opts.net_estimate)
            for ref, lead in sorted(plan.items()):
                if lead > self.script.prefetch_lead_ms:
                    self.warnings.append(
                        f"prefetch lead {self.script.prefetch_lead_ms}ms is below the "
                        f"{lead}ms needed for ref {ref} under the network estimate"
                    )
        for event in self.script.events:
            if isinstance(event, Prefetch) and event.at <= 0:
                self._request(event.local_ref, out)
                self._pending_refs.add(event.local_ref)
        self._pending_refs = {
            ref for ref in self._pending_refs if not self._entry(ref).complete
        }
        self._maybe_start_playing(now, out)

    def _entry(self, ref: int) -> BufferEntry:
        entry = self._entries.get(ref)
        if entry is None:
            entry = BufferEntry(local_ref=ref)
            self._entries[ref] = entry
        return entry

    def _request(self, ref: int, out: list[bytes]) -> None:
        if ref in self._requested:
            return
        self._requested.add(ref)
        self._entry(ref)
        out.append(encode_frame(DataReq(ref)))

    def _on_chunk(self, chunk: DataChunk, now: int, out: list[bytes]) -> None:
        if chunk.local_ref not in self._requested:
            self.warnings.append(f"unsolicited chunk for ref {chunk.local_ref}")
            return
        entry = self._entry(chunk.local_ref)
        if entry.complete:
            self.warnings.append(f"chunk after completion for ref {chunk.local_ref}")
            return
        if entry.expected is None:
            entry.expected = chunk.total
        elif entry.expected != chunk.total:
            self.error = f"ref {chunk.local_ref}: total changed mid-transfer"
            return
        if chunk.offset != entry.received:
            self.error = (
                f"ref {chunk.local_ref}: chunk offset {chunk.offset} != "
                f"{entry.received} received so far"
            )
            return
        entry.data.extend(chunk.data)
        self._buffer_total += len(chunk.data)
        self.max_buffer_bytes = max(self.max_buffer_bytes, self._buffer_total)
        if entry.received > entry.expected:
            self.error = f"ref {chunk.local_ref}: received more than announced total"
            return
        entry.complete = entry.received == entry.expected
        pos = self.position(now)
        self._record(
            pos,
            "Receive",
            f"ref:{chunk.local_ref}",
            f"offset={chunk.offset} size={len(chunk.data)} total={chunk.total}"
            f" complete={int(entry.complete)}",
        )
        if not entry.complete:
            return
        if self.state is PlayerState.BUFFERING:
            self._pending_refs.discard(chunk.local_ref)
            self._maybe_start_playing(now, out)
        elif self.state is PlayerState.STALLED and self._blocking is not None:
            if self._blocking[1] == chunk.local_ref:
                self._end_stall(now, out)

    def _on_stream_event(self, event: StreamEvent, now: int) -> None:
        pos = self.position(now)
        descriptor = None
        for sub in self.server_info.subservers:
            if event.port in sub.ports:
                descriptor = sub
                break
        if descriptor is None:
            self.warnings.append(f"stream event on unknown port {event.port}")
            self._record(pos, "StreamDeliver", f"port:{event.port}", "dropped: unknown port")
            return
        targets = sorted(
            inst
            for inst, ref in self._displayed.items()
            if self._mime_of.get(ref) == descriptor.target_mime
        )
        if not targets:
            self.warnings.append(f"stream event on port {event.port} has no visible target")
            self._record(
                pos, "StreamDeliver", f"port:{event.port}", "dropped: no visible target"
            )
            return
        for inst in targets:
            self._record(
                pos,
                "StreamDeliver",
                f"inst:{inst}",
                f"port={event.port} bytes={len(event.data)}",
            )

    # -- timeline ---------------------------------------------------------

    def _maybe_start_playing(self, now: int, out: list[bytes]) -> None:
        if self.state is not PlayerState.BUFFERING or self._pending_refs:
            return
        wait = now - self._buffering_since
        if wait > 0:
            self.buffering_wait_ms = wait
            self.total_stall_ms += wait
        self._pos_base = 0
        self._wall_base = now
        self._transition(PlayerState.PLAYING, 0)
        self._advance(now, out)

    def _advance(self, now: int, out: list[bytes]) -> None:
        assert self.script is not None
        events = self.script.events
        while self._cursor < len(events) and self.state is PlayerState.PLAYING:
            event = events[self._cursor]
            pos = self.position(now)
            if event.at > pos:
                break
            if isinstance(event, Prefetch):
                entry = self._entries.get(event.local_ref)
                if entry is None or not entry.complete:
                    self._request(event.local_ref, out)
                self._cursor += 1
            elif isinstance(event, Show):
                entry = self._entries.get(event.local_ref)
                if entry is None or not entry.complete:
                    self._begin_stall(event, now, out)
                    return
                entry.last_use_at = event.at
                self._displayed[event.instance_id] = event.local_ref
                subject = f"inst:{event.instance_id}"
                self._record(event.at, "Compose", subject, f"ref={event.local_ref}")
                self._record(
                    event.at,
                    "Display",
                    subject,
                    f"ref={event.local_ref} rect={event.rect.text()} z={event.z}",
                )
                self._cursor += 1
            elif isinstance(event, Hide):
                ref = self._displayed.pop(event.instance_id, None)
                detail = f"ref={ref}" if ref is not None else ""
                self._record(event.at, "Delete", f"inst:{event.instance_id}", detail)
                self._cursor += 1
                self._evict(event.at)
            elif isinstance(event, End):
                self._cursor += 1
                self._transition(PlayerState.FINISHED, event.at)
                out.append(encode_frame(Bye()))
            else:
                self._cursor += 1

    def _begin_stall(self, show: Show, now: int, out: list[bytes]) -> None:
        self._request(show.local_ref, out)
        pos = self.position(now)
        self._pos_base = pos
        self._wall_base = now
        self._stalled_since = now
        self._blocking = (show.instance_id, show.local_ref)
        self._record(
            pos,
            "Stall",
            f"inst:{show.instance_id}",
            f"ref={show.local_ref} incomplete",
        )
        self._transition(PlayerState.STALLED, pos)

    def _end_stall(self, now: int, out: list[bytes]) -> None:
        assert self._blocking is not None
        waited = now - self._stalled_since
        self.stall_count += 1
        self.total_stall_ms += waited
        inst = self._blocking[0]
        self._blocking = None
        self._record(self._pos_base, "Resume", f"inst:{inst}", f"waited={waited}ms")
        self._transition(PlayerState.PLAYING, self._pos_base)
        self._wall_base = now
        self._advance(now, out)

    def _evict(self, pos: int) -> None:
        if self.opts.buffer_budget is None:
            return
        sizes = {
            ref: entry.received
            for ref, entry in self._entries.items()
            if entry.complete and not entry.evicted
        }
        freed = plan_eviction(sizes, self._last_hide, pos, self.opts.buffer_budget)
        for ref in freed:
            entry = self._entries[ref]
            self._buffer_total -= entry.received
            entry.data = bytearray()
            entry.evicted = True
        still = sum(e.received for e in self._entries.values() if not e.evicted)
        if still > self.opts.buffer_budget:
            self.warnings.append(
                f"buffer budget exceeded: {still} bytes held, "
                f"budget {self.opts.buffer_budget}"
            )

    # -- test/diagnostic access -------------------------------------------

    def buffer_entries(self) -> dict[int, BufferEntry]:
        return dict(self._entries)

    def displayed_instances(self) -> set[int]:
        return set(self._displayed)


def validate_trace(records) -> list[str]:
    """Check a trace against the state machine and lifecycle invariants.

    Returns human-readable problems; an empty list means the trace is
    consistent: every state change follows a legal transition, each
    instance runs Compose -> Display -> Delete in order, and all receives
    of a ref land before the ref's first compose.
    """
    problems: list[str] = []
    state = PlayerState.INIT
    for i, rec in enumerate(records):
        if rec.action != "StateChange":
            continue
        try:
            new = PlayerState(rec.detail)
        except ValueError:
            problems.append(f"record {i}: unknown state {rec.detail!r}")
            continue
        if (state, new) not in LEGAL_TRANSITIONS:
            problems.append(f"record {i}: illegal transition {state.value}->{new.value}")
        state = new

    lifecycle: dict[str, list[str]] = {}
    first_compose: dict[str, int] = {}
    last_receive: dict[str, int] = {}
    for i, rec in enumerate(records):
        if rec.action in ("Compose", "Display", "Delete"):
            lifecycle.setdefault(rec.subject, []).append(rec.action)
            if rec.action == "Compose":
                head = rec.detail.split(" ")[0]
                if head.startswith("ref="):
                    first_compose.setdefault(f"ref:{head[4:]}", i)
        elif rec.action == "Receive":
            last_receive[rec.subject] = i
    for subject, actions in lifecycle.items():
        if actions != ["Compose", "Display", "Delete"] and actions != ["Compose", "Display"]:
            problems.append(f"{subject}: lifecycle order {actions}")
    for ref_subject, receive_index in last_receive.items():
        compose_index = first_compose.get(ref_subject)
        if compose_index is not None and receive_index > compose_index:
            problems.append(
                f"{ref_subject}: receive at record {receive_index} after first "
                f"compose at record {compose_index}"
            )
    return problems


def _mono_ms() -> int:
    return time.monotonic_ns() // 1_000_000


def run(
    host: str,
    port: int,
    opts: ClientOptions = ClientOptions(),
    connect_timeout: float = 5.0,
) -> PlaybackReport:
    """Connect, play the whole presentation, and return the report.

    Pacing follows the presentation clock scaled by ``opts.speed``; the
    loop sleeps in a select so network input interrupts waits immediately.
    Raises :class:`ConnectionLostError` (carrying the partial report) when
    the server goes away mid-presentation.
    """
    session = ClientSession(opts)
    sock = socket.create_connection((host, port), timeout=connect_timeout)
    sock.setblocking(False)
    try:
        _send(sock, session.hello())
        while not session.finished:
            now = _mono_ms()
            wakeup = session.next_wakeup(now)
            if wakeup is not None and wakeup <= now:
                _send(sock, session.on_wakeup(now))
                continue
            timeout = None if wakeup is None else (wakeup - now) / 1000.0
            readable, _, _ = select.select([sock], [], [], timeout)
            if not readable:
                _send(sock, session.on_wakeup(_mono_ms()))
                continue
            try:
                data = sock.recv(1 << 16)
            except (BlockingIOError, InterruptedError):
                continue
            if not data:
                if not session.finished:
                    raise ConnectionLostError(session.report())
                break
            _send(sock, session.on_bytes(data, _mono_ms()))
    finally:
        try:
            sock.close()
        except OSError:
            pass
    return session.report()


def _send(sock: socket.socket, data: bytes) -> None:
    if not data:
        return
    sock.setblocking(True)
    try:
        sock.sendall(data)
    finally:
        sock.setblocking(False)
