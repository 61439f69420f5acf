"""Bit-exact framed protocol between server, client, and sub-servers.

Every frame is ``type:u8  length:u32be  payload`` with the payload layout
fixed per message type below.  All integers are big-endian; strings are
UTF-8 with a u16 byte-length prefix.  The framing is frozen so golden-byte
tests are possible.

========  ====  =======================================================
message   type  payload
========  ====  =======================================================
HELLO       1   version:u16  doc_id:str
SERVER_INFO 2   count:u16  (name:str target_mime:str nports:u16 port:u16*)*
SCRIPT      3   flow script text bytes
DATA_REQ    4   local_ref:u32
DATA_CHUNK  5   local_ref:u32  offset:u64  total:u64  bytes
STREAM_EVENT 6  port:u16  at:u64  bytes
ERROR       7   code:u16  msg:str
BYE         8   (empty)
========  ====  =======================================================
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Union

__all__ = [
    "MAX_FRAME_PAYLOAD",
    "BadTypeError",
    "Bye",
    "DataChunk",
    "DataReq",
    "ErrorMsg",
    "Hello",
    "MalformedPayloadError",
    "Message",
    "OversizeError",
    "ScriptMsg",
    "ServerInfo",
    "StreamEvent",
    "SubserverDescriptor",
    "TruncatedError",
    "WireError",
    "decode_frame",
    "encode_frame",
]

MAX_FRAME_PAYLOAD = 16 * 1024 * 1024

ERR_UNKNOWN_DOC = 1
ERR_UNKNOWN_REF = 2
ERR_PROTOCOL = 3


class WireError(Exception):
    pass


class TruncatedError(WireError):
    """The buffer does not yet hold one complete frame; read more bytes."""


class BadTypeError(WireError):
    """Unknown frame type byte."""


class OversizeError(WireError):
    """Declared payload length exceeds the frame limit."""


class MalformedPayloadError(WireError):
    """Complete frame whose payload does not match its type's layout."""


@dataclass(frozen=True)
class Hello:
    version: int
    doc_id: str

    type_code = 1


@dataclass(frozen=True)
class SubserverDescriptor:
    name: str
    target_mime: str
    ports: tuple[int, ...]


@dataclass(frozen=True)
class ServerInfo:
    subservers: tuple[SubserverDescriptor, ...] = ()

    type_code = 2


@dataclass(frozen=True)
class ScriptMsg:
    script_bytes: bytes

    type_code = 3


@dataclass(frozen=True)
class DataReq:
    local_ref: int

    type_code = 4


@dataclass(frozen=True)
class DataChunk:
    local_ref: int
    offset: int
    total: int
    data: bytes

    type_code = 5


@dataclass(frozen=True)
class StreamEvent:
    port: int
    at: int
    data: bytes

    type_code = 6


@dataclass(frozen=True)
class ErrorMsg:
    code: int
    msg: str

    type_code = 7


@dataclass(frozen=True)
class Bye:
    type_code = 8


Message = Union[Hello, ServerInfo, ScriptMsg, DataReq, DataChunk, StreamEvent, ErrorMsg, Bye]


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise OversizeError(f"string too long: {len(raw)} bytes")
    return struct.pack(">H", len(raw)) + raw


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MalformedPayloadError("payload shorter than its layout")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def string(self) -> str:
        n = self.u16()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedPayloadError(f"bad utf-8 string: {exc}") from exc

    def rest(self) -> bytes:
        out = self.data[self.pos :]
        self.pos = len(self.data)
        return out

    def done(self) -> None:
        if self.pos != len(self.data):
            raise MalformedPayloadError(
                f"{len(self.data) - self.pos} trailing payload bytes"
            )


def _encode_payload(msg: Message) -> bytes:
    if isinstance(msg, Hello):
        return struct.pack(">H", msg.version) + _pack_str(msg.doc_id)
    if isinstance(msg, ServerInfo):
        out = [struct.pack(">H", len(msg.subservers))]
        for sub in msg.subservers:
            out.append(_pack_str(sub.name))
            out.append(_pack_str(sub.target_mime))
            out.append(struct.pack(">H", len(sub.ports)))
            for port in sub.ports:
                out.append(struct.pack(">H", port))
        return b"".join(out)
    if isinstance(msg, ScriptMsg):
        return msg.script_bytes
    if isinstance(msg, DataReq):
        return struct.pack(">I", msg.local_ref)
    if isinstance(msg, DataChunk):
        return struct.pack(">IQQ", msg.local_ref, msg.offset, msg.total) + msg.data
    if isinstance(msg, StreamEvent):
        return struct.pack(">HQ", msg.port, msg.at) + msg.data
    if isinstance(msg, ErrorMsg):
        return struct.pack(">H", msg.code) + _pack_str(msg.msg)
    if isinstance(msg, Bye):
        return b""
    raise BadTypeError(f"not a wire message: {msg!r}")


def encode_frame(msg: Message) -> bytes:
    """Serialize one message to its exact wire bytes."""
    payload = _encode_payload(msg)
    if len(payload) > MAX_FRAME_PAYLOAD:
        raise OversizeError(f"payload of {len(payload)} bytes exceeds frame limit")
    return struct.pack(">BI", msg.type_code, len(payload)) + payload


def _decode_payload(type_code: int, payload: bytes) -> Message:
    r = _Reader(payload)
    if type_code == 1:
        msg: Message = Hello(r.u16(), r.string())
    elif type_code == 2:
        count = r.u16()
        subs = []
        for _ in range(count):
            name = r.string()
            mime = r.string()
            nports = r.u16()
            ports = tuple(r.u16() for _ in range(nports))
            subs.append(SubserverDescriptor(name, mime, ports))
        msg = ServerInfo(tuple(subs))
    elif type_code == 3:
        msg = ScriptMsg(r.rest())
    elif type_code == 4:
        msg = DataReq(r.u32())
    elif type_code == 5:
        local_ref, offset, total = r.u32(), r.u64(), r.u64()
        msg = DataChunk(local_ref, offset, total, r.rest())
    elif type_code == 6:
        port, at = r.u16(), r.u64()
        msg = StreamEvent(port, at, r.rest())
    elif type_code == 7:
        msg = ErrorMsg(r.u16(), r.string())
    elif type_code == 8:
        msg = Bye()
    else:
        raise BadTypeError(f"unknown frame type {type_code}")
    r.done()
    return msg


def decode_frame(data: bytes) -> tuple[Message, bytes]:
    """Decode exactly one frame from the head of ``data``.

    Returns the message and the unconsumed remainder.  Raises
    :class:`TruncatedError` when the buffer does not yet hold the whole
    frame; callers should read more and retry.
    """
    if len(data) < 5:
        raise TruncatedError(f"need 5 header bytes, have {len(data)}")
    type_code, length = struct.unpack(">BI", data[:5])
    if length > MAX_FRAME_PAYLOAD:
        raise OversizeError(f"declared payload of {length} bytes exceeds frame limit")
    if len(data) < 5 + length:
        raise TruncatedError(f"need {5 + length} bytes, have {len(data)}")
    msg = _decode_payload(type_code, data[5 : 5 + length])
    return msg, data[5 + length :]
