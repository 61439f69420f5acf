"""Domain types for compound timed-media documents.

A document is a repository of composition nodes (mobs) and typed media
leaves (elements).  Each mob carries an ordered playlist that places child
references in the mob's own relative coordinate system: regions are unit
fractions of the parent rectangle and times are millisecond offsets from
the parent start.  All values are immutable after construction and safe to
share between threads.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Union

__all__ = [
    "MAX_OBJECT_ID",
    "Document",
    "Element",
    "MalformedMimeError",
    "Mob",
    "ModelError",
    "ParamSet",
    "PlaylistEntry",
    "Region",
    "ScaleMode",
    "TimeSpec",
    "UnknownIdError",
    "is_live_mime",
    "parse_mime",
    "resolve",
]

MAX_OBJECT_ID = 2**64 - 1

# RFC 1341 token: printable ASCII minus tspecials and whitespace.
_MIME_TOKEN = r"[0-9A-Za-z!#$%&'*+.^_`|~-]+"
_MIME_RE = re.compile(rf"^({_MIME_TOKEN})/({_MIME_TOKEN})$")

# Document ids travel in space-separated text headers, so no whitespace.
_DOC_ID_RE = re.compile(r"^[0-9A-Za-z._-]*$")

# Subtypes with this prefix mark elements fed by live sub-server streams;
# they are the only elements allowed to carry an empty payload.
LIVE_SUBTYPE_PREFIX = "x-live"


class ModelError(ValueError):
    """Invalid construction of a model value."""


class UnknownIdError(KeyError):
    """An object id resolves to neither a mob nor an element."""

    def __init__(self, object_id: int):
        super().__init__(object_id)
        self.object_id = object_id

    def __str__(self) -> str:
        return f"unknown object id {self.object_id}"


class MalformedMimeError(ModelError):
    """MIME string does not match the token/token grammar."""


def parse_mime(text: str) -> tuple[str, str]:
    """Parse ``type/subtype`` into a lowercased token pair."""
    m = _MIME_RE.match(text)
    if m is None:
        raise MalformedMimeError(f"malformed mime type: {text!r}")
    return (m.group(1).lower(), m.group(2).lower())


def is_live_mime(mime_type: tuple[str, str]) -> bool:
    """True for elements whose data arrives from a live sub-server stream."""
    return mime_type[1].startswith(LIVE_SUBTYPE_PREFIX)


def _check_object_id(value: int, what: str) -> None:
    if not isinstance(value, int) or isinstance(value, bool):
        raise ModelError(f"{what} must be an integer, got {value!r}")
    if not 0 < value <= MAX_OBJECT_ID:
        raise ModelError(f"{what} out of range: {value}")


@dataclass(frozen=True)
class TimeSpec:
    """Placement of a child on the parent's timeline.

    ``start_offset`` is milliseconds after the parent start.  ``duration_ms``
    is a strictly positive length, or ``None`` for an open interval that
    lasts until the parent ends.
    """

    start_offset: int = 0
    duration_ms: int | None = None

    def __post_init__(self) -> None:
        if self.start_offset < 0:
            raise ModelError(f"start_offset must be >= 0, got {self.start_offset}")
        if self.duration_ms is not None and self.duration_ms <= 0:
            raise ModelError(f"finite duration must be > 0, got {self.duration_ms}")

    @property
    def is_open(self) -> bool:
        return self.duration_ms is None


@dataclass(frozen=True)
class Region:
    """Child rectangle in unit fractions of the parent rectangle.

    Only positive extent is enforced here; whether the region must stay
    inside the unit square is a validation-mode question, not a
    construction one.
    """

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise ModelError(f"region extent must be positive, got w={self.w} h={self.h}")

    @classmethod
    def full(cls) -> "Region":
        return cls(0.0, 0.0, 1.0, 1.0)


class ScaleMode(str, Enum):
    FIT = "fit"
    FILL = "fill"
    STRETCH = "stretch"


@dataclass(frozen=True)
class ParamSet:
    """Optional presentation parameters; an absent field inherits from the parent.

    ``font_scale`` is a multiplier and composes multiplicatively down the
    hierarchy; ``background_color`` (RGBA) and ``scale_mode`` override the
    inherited value.
    """

    background_color: tuple[int, int, int, int] | None = None
    font_scale: float | None = None
    scale_mode: ScaleMode | None = None

    def __post_init__(self) -> None:
        if self.background_color is not None:
            c = self.background_color
            if len(c) != 4 or any(not (0 <= v <= 255) for v in c):
                raise ModelError(f"background_color must be 4x8-bit, got {c!r}")
        if self.font_scale is not None and not self.font_scale > 0:
            raise ModelError(f"font_scale must be > 0, got {self.font_scale}")

    def is_empty(self) -> bool:
        return (
            self.background_color is None
            and self.font_scale is None
            and self.scale_mode is None
        )


EMPTY_PARAMS = ParamSet()


@dataclass(frozen=True)
class PlaylistEntry:
    """One line of a mob's screenplay: place ``target`` in space and time."""

    target: int
    region: Region = field(default_factory=Region.full)
    time: TimeSpec = field(default_factory=TimeSpec)
    params: ParamSet = EMPTY_PARAMS

    def __post_init__(self) -> None:
        _check_object_id(self.target, "entry target")


@dataclass(frozen=True)
class Mob:
    """Uniform composition container: no media data, only an ordered playlist.

    Playlist order is significant; it defines stacking order and the local
    numbering produced by flow compilation.
    """

    id: int
    name: str
    playlist: tuple[PlaylistEntry, ...] = ()

    def __post_init__(self) -> None:
        _check_object_id(self.id, "mob id")
        object.__setattr__(self, "playlist", tuple(self.playlist))


@dataclass(frozen=True)
class Element:
    """Atomic typed media leaf.

    The payload is opaque: either inline bytes or an opaque store key
    resolved by whoever serves the data.  Live elements (see
    :func:`is_live_mime`) may carry no payload at all.
    """

    id: int
    name: str
    mime_type: tuple[str, str]
    payload: bytes | None = None
    payload_key: str | None = None
    intrinsic_size: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        _check_object_id(self.id, "element id")
        t, s = self.mime_type
        if parse_mime(f"{t}/{s}") != (t, s):
            raise MalformedMimeError(f"mime pair not normalized: {self.mime_type!r}")
        if self.payload is not None and self.payload_key is not None:
            raise ModelError(f"element {self.id}: payload and payload_key are exclusive")
        if not is_live_mime(self.mime_type):
            if self.payload_key is None and not self.payload:
                raise ModelError(f"element {self.id}: static element needs a payload")
        if self.intrinsic_size is not None:
            w, h = self.intrinsic_size
            if w <= 0 or h <= 0:
                raise ModelError(f"element {self.id}: intrinsic_size must be positive")

    @property
    def mime_str(self) -> str:
        return f"{self.mime_type[0]}/{self.mime_type[1]}"

    def inline_size(self) -> int:
        """Payload size when known locally; store-keyed data reports 0."""
        return len(self.payload) if self.payload is not None else 0


Node = Union[Mob, Element]


@dataclass(frozen=True)
class Document:
    """Immutable repository of mobs and elements with a designated root.

    The maps are insertion-ordered plain dicts by convention treated as
    frozen; canonical ordering is applied at serialization time, not here.
    """

    id: str
    root: int
    canvas: tuple[int, int]
    total_duration: int
    mobs: Mapping[int, Mob]
    elements: Mapping[int, Element]

    def __post_init__(self) -> None:
        if not _DOC_ID_RE.match(self.id):
            raise ModelError(f"document id must match [0-9A-Za-z._-]*, got {self.id!r}")
        w, h = self.canvas
        if w <= 0 or h <= 0:
            raise ModelError(f"canvas must be positive, got {self.canvas}")
        if self.total_duration <= 0:
            raise ModelError(f"total_duration must be > 0, got {self.total_duration}")
        overlap = self.mobs.keys() & self.elements.keys()
        if overlap:
            raise ModelError(f"mob and element id sets overlap: {sorted(overlap)}")
        for oid, mob in self.mobs.items():
            if oid != mob.id:
                raise ModelError(f"mob map key {oid} != mob id {mob.id}")
        for oid, el in self.elements.items():
            if oid != el.id:
                raise ModelError(f"element map key {oid} != element id {el.id}")
        if self.root not in self.mobs:
            raise ModelError(f"root {self.root} is not a mob id")
        for mob in self.mobs.values():
            for i, entry in enumerate(mob.playlist):
                if entry.target not in self.mobs and entry.target not in self.elements:
                    raise ModelError(
                        f"mob {mob.id} entry {i} targets unknown id {entry.target}"
                    )

    @property
    def root_mob(self) -> Mob:
        return self.mobs[self.root]


def resolve(doc: Document, object_id: int) -> Node:
    """Look up a node by id; raises :class:`UnknownIdError` when absent."""
    node = doc.mobs.get(object_id)
    if node is not None:
        return node
    element = doc.elements.get(object_id)
    if element is not None:
        return element
    raise UnknownIdError(object_id)
