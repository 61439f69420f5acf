"""Pluggable live data sources announced per session as stream events.

A plugin declares how many ports it needs, receives its port assignment,
then gets its data handles plus an initialisation blob and starts emitting
timestamped payloads.  Plugins live server side; their payloads reach
clients wrapped as stream-event frames so the client stays thin.
"""

from __future__ import annotations

import json
import socket
import threading
from dataclasses import dataclass
from typing import Callable

from .wire import SubserverDescriptor

__all__ = [
    "InitRejectedError",
    "PluginHandles",
    "PluginRegistry",
    "PortCountMismatchError",
    "Subserver",
    "SubserverError",
    "TextSender",
    "default_registry",
    "load_plugin_config",
]


class SubserverError(Exception):
    pass


class PortCountMismatchError(SubserverError):
    def __init__(self, wanted: int, got: int):
        super().__init__(f"plugin wants {wanted} port(s), got {got}")
        self.wanted = wanted
        self.got = got


class InitRejectedError(SubserverError):
    def __init__(self, reason: str):
        super().__init__(f"init rejected: {reason}")
        self.reason = reason


@dataclass(frozen=True)
class PluginHandles:
    """What the host hands a plugin: an emitter and the session clock.

    ``emit(port, payload)`` timestamps the payload with ``clock()`` and
    fans it out to every active session.
    """

    emit: Callable[[int, bytes], None]
    clock: Callable[[], int]


class Subserver:
    """Base plugin interface; subclasses override the three lifecycle calls."""

    name = "subserver"
    target_mime = "application/octet-stream"

    def __init__(self) -> None:
        self.ports: tuple[int, ...] = ()
        self.handles: PluginHandles | None = None

    def get_port_count(self) -> int:
        return 1

    def set_ports(self, ports) -> None:
        ports = tuple(ports)
        if len(ports) != self.get_port_count():
            raise PortCountMismatchError(self.get_port_count(), len(ports))
        self.ports = ports

    def set_data(self, handles: PluginHandles, init_blob: bytes = b"") -> None:
        if not self.ports:
            raise SubserverError("set_ports must run before set_data")
        self.handles = handles

    def descriptor(self) -> SubserverDescriptor:
        return SubserverDescriptor(self.name, self.target_mime, self.ports)

    def start(self) -> None:
        """Begin real-transport operation (listener threads etc.); optional."""

    def stop(self) -> None:
        """Tear down whatever start() created; optional."""


class TextSender(Subserver):
    """Reference plugin: a single-channel text message feed.

    Lines arrive either through :meth:`deliver_line` (the harness and the
    CLI path) or over a plain TCP line listener started by :meth:`start`.
    """

    name = "text-sender"
    target_mime = "text/x-live"

    def __init__(self) -> None:
        super().__init__()
        self._listener: socket.socket | None = None
        self._thread: threading.Thread | None = None
        self._stopping = False

    def get_port_count(self) -> int:
        return 1

    def set_data(self, handles: PluginHandles, init_blob: bytes = b"") -> None:
        if init_blob:
            try:
                config = json.loads(init_blob.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise InitRejectedError(f"init blob is not JSON: {exc}") from exc
            if not isinstance(config, dict):
                raise InitRejectedError("init blob must be a JSON object")
            mime = config.get("target_mime")
            if mime is not None:
                self.target_mime = str(mime)
        super().set_data(handles, init_blob)

    def deliver_line(self, text: str) -> None:
        """Emit one message on the plugin's single port."""
        if self.handles is None:
            raise SubserverError("plugin not initialised")
        self.handles.emit(self.ports[0], text.encode("utf-8"))

    def start(self) -> None:
        if self._listener is not None:
            return
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind(("127.0.0.1", self.ports[0]))
        listener.listen(4)
        self._listener = listener
        self._stopping = False
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    def _serve(self) -> None:
        assert self._listener is not None
        while not self._stopping:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            with conn:
                data = b""
                while True:
                    part = conn.recv(4096)
                    if not part:
                        break
                    data += part
                    while b"\n" in data:
                        line, data = data.split(b"\n", 1)
                        if line:
                            self.deliver_line(line.decode("utf-8", "replace"))

    def stop(self) -> None:
        self._stopping = True
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
            self._listener = None


class PluginRegistry:
    """Name-to-factory map for sub-server plugins."""

    def __init__(self) -> None:
        self._factories: dict[str, Callable[[], Subserver]] = {}

    def register(self, name: str, factory: Callable[[], Subserver]) -> None:
        self._factories[name] = factory

    def create(self, name: str) -> Subserver:
        factory = self._factories.get(name)
        if factory is None:
            raise SubserverError(f"unknown plugin {name!r}")
        return factory()

    def names(self) -> tuple[str, ...]:
        return tuple(self._factories)


def default_registry() -> PluginRegistry:
    registry = PluginRegistry()
    registry.register(TextSender.name, TextSender)
    return registry


def load_plugin_config(text: str) -> list[tuple[str, bytes]]:
    """Parse the plugin config: ``{"name": {"enabled": bool, "init": path}}``.

    Returns (name, init_blob) pairs for enabled plugins, in file order.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SubserverError(f"bad plugin config: {exc}") from exc
    if not isinstance(raw, dict):
        raise SubserverError("plugin config must be a JSON object")
    out: list[tuple[str, bytes]] = []
    for name, entry in raw.items():
        if not isinstance(entry, dict):
            raise SubserverError(f"plugin {name!r}: entry must be an object")
        if not entry.get("enabled", True):
            continue
        init_path = entry.get("init")
        blob = b""
        if init_path:
            with open(init_path, "rb") as fh:
                blob = fh.read()
        out.append((name, blob))
    return out
