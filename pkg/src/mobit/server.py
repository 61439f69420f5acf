"""Session management and flow-script/data delivery.

The protocol logic lives in :class:`ServerSession`, which is transport
free: it eats raw bytes and returns whole frames to send back, so the
same code runs under the real TCP host and the in-process simulation
harness.  Documents are parsed, validated, and compiled once at load
time; serving never touches the document again.

Within one batch of input, pending data requests are answered in the flow
script's prefetch order rather than arrival order, which keeps delivery a
sequential stream aligned with the presentation.
"""

from __future__ import annotations

import os
import socket
import threading
import time
from dataclasses import dataclass

from .docio import parse_document
from .flow import CompileOptions, compile_flow
from .model import Document, Element
from .script import FlowScript, serialize_script
from .subserver import PluginHandles, PluginRegistry, Subserver, default_registry
from .wire import (
    ERR_PROTOCOL,
    ERR_UNKNOWN_DOC,
    ERR_UNKNOWN_REF,
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
    "CompiledDoc",
    "DirectoryStore",
    "DocStore",
    "MobitServer",
    "ServerOptions",
    "ServerSession",
    "load_compiled_doc",
]

DEFAULT_CHUNK_SIZE = 64 * 1024
PROTOCOL_VERSION = 1


class DirectoryStore:
    """Resolves opaque payload keys as paths below a base directory."""

    def __init__(self, base_dir: str):
        self.base_dir = base_dir

    def load(self, key: str) -> bytes:
        path = os.path.normpath(os.path.join(self.base_dir, key))
        if not path.startswith(os.path.normpath(self.base_dir)):
            raise FileNotFoundError(f"store key escapes the store: {key!r}")
        with open(path, "rb") as fh:
            return fh.read()


@dataclass(frozen=True)
class CompiledDoc:
    document: Document
    script: FlowScript
    script_bytes: bytes
    payloads: dict[int, bytes]  # local_ref -> full payload
    prefetch_rank: dict[int, int]  # local_ref -> position in prefetch order


def _element_payload(element: Element, store: DirectoryStore | None) -> bytes:
    if element.payload is not None:
        return element.payload
    if element.payload_key is not None:
        if store is None:
            raise FileNotFoundError(
                f"element {element.id} has a store key but no store is configured"
            )
        return store.load(element.payload_key)
    return b""


def load_compiled_doc(
    doc: Document,
    opts: CompileOptions = CompileOptions(),
    store: DirectoryStore | None = None,
) -> CompiledDoc:
    """Compile a document for serving; invalid documents are rejected here."""
    payload_cache: dict[int, bytes] = {}

    def size_of(element: Element) -> int:
        if element.id not in payload_cache:
            payload_cache[element.id] = _element_payload(element, store)
        return len(payload_cache[element.id])

    result = compile_flow(doc, opts, size_resolver=size_of)
    script = result.script
    payloads = {
        obj.local_ref: payload_cache.get(obj.object_id, b"")
        for obj in script.ref_table.objects
    }
    rank = {ref: i for i, ref in enumerate(script.prefetch_order())}
    return CompiledDoc(
        document=doc,
        script=script,
        script_bytes=serialize_script(script),
        payloads=payloads,
        prefetch_rank=rank,
    )


class DocStore:
    """Read-only map of document id to compiled document."""

    def __init__(self) -> None:
        self.docs: dict[str, CompiledDoc] = {}

    def add(self, compiled: CompiledDoc) -> None:
        self.docs[compiled.document.id] = compiled

    def lookup(self, doc_id: str) -> CompiledDoc | None:
        if doc_id:
            return self.docs.get(doc_id)
        if len(self.docs) == 1:
            return next(iter(self.docs.values()))
        return None

    @classmethod
    def from_file(
        cls,
        path: str,
        opts: CompileOptions = CompileOptions(),
        store_dir: str | None = None,
    ) -> "DocStore":
        with open(path, "rb") as fh:
            doc = parse_document(fh.read())
        store = DirectoryStore(store_dir or os.path.dirname(os.path.abspath(path)))
        out = cls()
        out.add(load_compiled_doc(doc, opts, store))
        return out


@dataclass(frozen=True)
class ServerOptions:
    chunk_size: int = DEFAULT_CHUNK_SIZE


@dataclass
class _SessionState:
    hello_done: bool = False
    closed: bool = False
    compiled: CompiledDoc | None = None


class ServerSession:
    """One client session as a byte-in, frames-out state machine.

    ``feed`` consumes whatever arrived on the transport and returns the
    frames to send, already encoded.  A malformed frame or protocol
    violation produces one error frame and closes the session; the session
    object never raises on bad input.
    """

    def __init__(
        self,
        store: DocStore,
        server_info: ServerInfo = ServerInfo(),
        opts: ServerOptions = ServerOptions(),
    ):
        self.store = store
        self.server_info = server_info
        self.opts = opts
        self._buffer = b""
        self._state = _SessionState()

    @property
    def closed(self) -> bool:
        return self._state.closed

    @property
    def active(self) -> bool:
        return self._state.hello_done and not self._state.closed

    def feed(self, data: bytes) -> list[bytes]:
        if self._state.closed:
            return []
        self._buffer += data
        out: list[bytes] = []
        pending_reqs: list[DataReq] = []
        while not self._state.closed:
            try:
                msg, self._buffer = decode_frame(self._buffer)
            except TruncatedError:
                break
            except WireError as exc:
                self._fail(out, ERR_PROTOCOL, f"bad frame: {exc}")
                break
            self._handle(msg, out, pending_reqs)
        if not self._state.closed:
            self._answer_requests(out, pending_reqs)
        return out

    def stream_event_frame(self, port: int, at: int, data: bytes) -> bytes | None:
        """Wrap a sub-server payload for this session; None when not active."""
        if not self.active:
            return None
        return encode_frame(StreamEvent(port, at, data))

    def _fail(self, out: list[bytes], code: int, msg: str) -> None:
        out.append(encode_frame(ErrorMsg(code, msg)))
        self._state.closed = True

    def _handle(self, msg, out: list[bytes], pending_reqs: list[DataReq]) -> None:
        if isinstance(msg, Hello):
            if self._state.hello_done:
                self._fail(out, ERR_PROTOCOL, "duplicate hello")
                return
            if msg.version != PROTOCOL_VERSION:
                self._fail(out, ERR_PROTOCOL, f"unsupported version {msg.version}")
                return
            compiled = self.store.lookup(msg.doc_id)
            if compiled is None:
                self._fail(out, ERR_UNKNOWN_DOC, f"unknown document {msg.doc_id!r}")
                return
            self._state.hello_done = True
            self._state.compiled = compiled
            out.append(encode_frame(self.server_info))
            out.append(encode_frame(ScriptMsg(compiled.script_bytes)))
        elif isinstance(msg, DataReq):
            if not self._state.hello_done:
                self._fail(out, ERR_PROTOCOL, "data request before hello")
                return
            compiled = self._state.compiled
            assert compiled is not None
            if msg.local_ref not in compiled.payloads:
                self._fail(out, ERR_UNKNOWN_REF, f"unknown ref {msg.local_ref}")
                return
            pending_reqs.append(msg)
        elif isinstance(msg, Bye):
            self._state.closed = True
        else:
            self._fail(out, ERR_PROTOCOL, f"unexpected {type(msg).__name__} frame")

    def _answer_requests(self, out: list[bytes], pending_reqs: list[DataReq]) -> None:
        if not pending_reqs:
            return
        compiled = self._state.compiled
        assert compiled is not None
        fallback = len(compiled.prefetch_rank)
        pending_reqs.sort(
            key=lambda r: (
                compiled.prefetch_rank.get(r.local_ref, fallback + r.local_ref),
                r.local_ref,
            )
        )
        for req in pending_reqs:
            payload = compiled.payloads[req.local_ref]
            total = len(payload)
            if total == 0:
                out.append(encode_frame(DataChunk(req.local_ref, 0, 0, b"")))
                continue
            offset = 0
            while offset < total:
                piece = payload[offset : offset + self.opts.chunk_size]
                out.append(encode_frame(DataChunk(req.local_ref, offset, total, piece)))
                offset += len(piece)


class MobitServer:
    """Threaded TCP host around :class:`ServerSession`.

    One thread per connection; sub-server plugin emissions are fanned out
    to every active session under a lock so stream-event frames stay
    atomic on the wire.
    """

    def __init__(
        self,
        store: DocStore,
        port: int = 0,
        host: str = "127.0.0.1",
        opts: ServerOptions = ServerOptions(),
        registry: PluginRegistry | None = None,
        plugins: list[tuple[str, bytes]] | None = None,
        subserver_port_base: int | None = None,
        clock=None,
    ):
        self.store = store
        self.opts = opts
        self._clock = clock or _wall_ms
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(16)
        self.host, self.port = self._listener.getsockname()[:2]
        self._lock = threading.Lock()
        self._conns: dict[int, tuple[ServerSession, socket.socket]] = {}
        self._next_conn = 0
        self._threads: list[threading.Thread] = []
        self._accept_thread: threading.Thread | None = None
        self._stopping = False

        registry = registry or default_registry()
        self.subservers: list[Subserver] = []
        next_port = subserver_port_base if subserver_port_base is not None else self.port + 1
        for name, blob in plugins or []:
            plugin = registry.create(name)
            count = plugin.get_port_count()
            plugin.set_ports(range(next_port, next_port + count))
            next_port += count
            plugin.set_data(PluginHandles(emit=self._emit, clock=self._clock), blob)
            self.subservers.append(plugin)
        self.server_info = ServerInfo(tuple(p.descriptor() for p in self.subservers))

    def _emit(self, port: int, payload: bytes) -> None:
        self.broadcast_stream_event(port, self._clock(), payload)

    def broadcast_stream_event(self, port: int, at: int, payload: bytes) -> None:
        with self._lock:
            conns = list(self._conns.values())
        for session, sock in conns:
            frame = session.stream_event_frame(port, at, payload)
            if frame is None:
                continue
            try:
                sock.sendall(frame)
            except OSError:
                pass

    def start(self) -> None:
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        for plugin in self.subservers:
            plugin.start()

    def _accept_loop(self) -> None:
        while not self._stopping:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            thread = threading.Thread(target=self._serve_conn, args=(conn,), daemon=True)
            thread.start()
            self._threads.append(thread)

    def _serve_conn(self, conn: socket.socket) -> None:
        session = ServerSession(self.store, self.server_info, self.opts)
        with self._lock:
            conn_id = self._next_conn
            self._next_conn += 1
            self._conns[conn_id] = (session, conn)
        try:
            while not session.closed:
                data = conn.recv(65536)
                if not data:
                    break
                for frame in session.feed(data):
                    conn.sendall(frame)
        except OSError:
            pass
        finally:
            with self._lock:
                self._conns.pop(conn_id, None)
            try:
                conn.close()
            except OSError:
                pass

    def stop(self) -> None:
        self._stopping = True
        for plugin in self.subservers:
            plugin.stop()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            conns = list(self._conns.values())
        for _, sock in conns:
            try:
                sock.close()
            except OSError:
                pass


def _wall_ms() -> int:
    return time.monotonic_ns() // 1_000_000
