"""Flow script: the compiled, time-sorted event stream and its text form.

The canonical text serialization is a contract: one event per line, fixed
field order, LF endings, byte-identical for identical inputs.  Rectangles
are written with exactly three fractional digits (round-half-even); all
in-memory values keep full float precision.

Line grammar (all fields space-separated)::

    mobitflow 1
    doc <id>               # bare "doc" when the id is empty
    canvas <W>x<H>
    duration <ms>
    prefetch_lead <ms>
    objects <n>
    o <local_ref> <object_id> <type/subtype> <payload_size>
    instances <m>
    i <instance_id> <local_ref> </entry/path>
    events <k>
    e <at> prefetch <local_ref>
    e <at> show <instance_id> <local_ref> <x>,<y>,<w>,<h> <z> <bg|-> <font_scale> <scale_mode>
    e <at> hide <instance_id>
    e <at> end
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Union

from .model import ScaleMode

__all__ = [
    "AbsRect",
    "End",
    "FlowEvent",
    "FlowScript",
    "Hide",
    "LocalRefTable",
    "MalformedScriptError",
    "Prefetch",
    "RefObject",
    "RefInstance",
    "ResolvedParams",
    "Show",
    "parse_script",
    "serialize_script",
]


class MalformedScriptError(ValueError):
    """Script text that does not follow the canonical grammar."""


@dataclass(frozen=True)
class AbsRect:
    """Axis-aligned rectangle in canvas pixels; zero extent is legal."""

    x: float
    y: float
    w: float
    h: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    def text(self) -> str:
        return f"{self.x:.3f},{self.y:.3f},{self.w:.3f},{self.h:.3f}"


@dataclass(frozen=True)
class ResolvedParams:
    """Fully-resolved presentation parameters attached to a show event."""

    background_color: tuple[int, int, int, int] | None = None
    font_scale: float = 1.0
    scale_mode: ScaleMode = ScaleMode.FIT

    def bg_text(self) -> str:
        if self.background_color is None:
            return "-"
        r, g, b, a = self.background_color
        return f"{r:02x}{g:02x}{b:02x}{a:02x}"


@dataclass(frozen=True)
class RefObject:
    local_ref: int
    object_id: int
    mime: str
    payload_size: int


@dataclass(frozen=True)
class RefInstance:
    instance_id: int
    local_ref: int
    path: tuple[int, ...]


def path_text(path: tuple[int, ...]) -> str:
    return "/" + "/".join(str(i) for i in path)


def parse_path(text: str) -> tuple[int, ...]:
    if not text.startswith("/"):
        raise MalformedScriptError(f"bad path {text!r}")
    body = text[1:]
    if not body:
        return ()
    return tuple(int(p) for p in body.split("/"))


@dataclass(frozen=True)
class LocalRefTable:
    """Dense local numbering of elements plus the per-visit instance list.

    ``objects`` is in first-visit preorder (refs are 0..n-1); every element
    visit gets one instance row in preorder, shared elements keeping a
    single object row.
    """

    objects: tuple[RefObject, ...] = ()
    instances: tuple[RefInstance, ...] = ()

    def object_by_ref(self, local_ref: int) -> RefObject:
        return self.objects[local_ref]

    def instance_by_id(self, instance_id: int) -> RefInstance:
        return self.instances[instance_id]


# Tie ranks: resources free (hide) before they are claimed (show) at the
# same instant, prefetches come first, the end marker is always last.
RANK_PREFETCH = 0
RANK_HIDE = 1
RANK_SHOW = 2
RANK_END = 3


@dataclass(frozen=True)
class Prefetch:
    at: int
    local_ref: int

    kind = "prefetch"

    def sort_key(self) -> tuple[int, int, int]:
        return (self.at, RANK_PREFETCH, self.local_ref)


@dataclass(frozen=True)
class Show:
    at: int
    instance_id: int
    local_ref: int
    rect: AbsRect
    z: int
    params: ResolvedParams

    kind = "show"

    def sort_key(self) -> tuple[int, int, int]:
        return (self.at, RANK_SHOW, self.instance_id)


@dataclass(frozen=True)
class Hide:
    at: int
    instance_id: int

    kind = "hide"

    def sort_key(self) -> tuple[int, int, int]:
        return (self.at, RANK_HIDE, self.instance_id)


@dataclass(frozen=True)
class End:
    at: int

    kind = "end"

    def sort_key(self) -> tuple[int, int, int]:
        return (self.at, RANK_END, 0)


FlowEvent = Union[Prefetch, Show, Hide, End]


@dataclass(frozen=True)
class FlowScript:
    doc_id: str
    canvas: tuple[int, int]
    total_duration: int
    prefetch_lead_ms: int
    ref_table: LocalRefTable
    events: tuple[FlowEvent, ...]

    def prefetch_order(self) -> tuple[int, ...]:
        """Local refs in the order their prefetch events occur."""
        return tuple(e.local_ref for e in self.events if isinstance(e, Prefetch))

    def shows(self) -> Iterable[Show]:
        return (e for e in self.events if isinstance(e, Show))

    def last_hide_by_ref(self) -> dict[int, int]:
        """Timestamp of the final hide of each local ref; used for eviction."""
        ref_of = {inst.instance_id: inst.local_ref for inst in self.ref_table.instances}
        out: dict[int, int] = {}
        for e in self.events:
            if isinstance(e, Hide):
                ref = ref_of[e.instance_id]
                out[ref] = max(out.get(ref, 0), e.at)
        return out


def _fs_text(value: float) -> str:
    return repr(value)


def serialize_script(script: FlowScript) -> bytes:
    lines = ["mobitflow 1"]
    lines.append(f"doc {script.doc_id}" if script.doc_id else "doc")
    lines.append(f"canvas {script.canvas[0]}x{script.canvas[1]}")
    lines.append(f"duration {script.total_duration}")
    lines.append(f"prefetch_lead {script.prefetch_lead_ms}")
    lines.append(f"objects {len(script.ref_table.objects)}")
    for o in script.ref_table.objects:
        lines.append(f"o {o.local_ref} {o.object_id} {o.mime} {o.payload_size}")
    lines.append(f"instances {len(script.ref_table.instances)}")
    for inst in script.ref_table.instances:
        lines.append(f"i {inst.instance_id} {inst.local_ref} {path_text(inst.path)}")
    lines.append(f"events {len(script.events)}")
    for e in script.events:
        if isinstance(e, Prefetch):
            lines.append(f"e {e.at} prefetch {e.local_ref}")
        elif isinstance(e, Show):
            p = e.params
            lines.append(
                f"e {e.at} show {e.instance_id} {e.local_ref} {e.rect.text()} "
                f"{e.z} {p.bg_text()} {_fs_text(p.font_scale)} {p.scale_mode.value}"
            )
        elif isinstance(e, Hide):
            lines.append(f"e {e.at} hide {e.instance_id}")
        else:
            lines.append(f"e {e.at} end")
    return ("\n".join(lines) + "\n").encode("utf-8")


class _Lines:
    def __init__(self, text: str):
        self.lines = text.split("\n")
        self.pos = 0

    def next(self) -> str:
        if self.pos >= len(self.lines):
            raise MalformedScriptError("unexpected end of script")
        line = self.lines[self.pos]
        self.pos += 1
        return line


def _expect_fields(line: str, head: str, count: int | None = None) -> list[str]:
    parts = line.split(" ")
    if not parts or parts[0] != head:
        raise MalformedScriptError(f"expected {head!r} line, got {line!r}")
    if count is not None and len(parts) != count:
        raise MalformedScriptError(f"bad field count in {line!r}")
    return parts


def _parse_bg(text: str) -> tuple[int, int, int, int] | None:
    if text == "-":
        return None
    if len(text) != 8:
        raise MalformedScriptError(f"bad background {text!r}")
    try:
        raw = bytes.fromhex(text)
    except ValueError as exc:
        raise MalformedScriptError(f"bad background {text!r}") from exc
    return (raw[0], raw[1], raw[2], raw[3])


def parse_script(data: bytes) -> FlowScript:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedScriptError("script is not UTF-8") from exc
    src = _Lines(text.rstrip("\n"))
    try:
        if src.next() != "mobitflow 1":
            raise MalformedScriptError("bad magic line")
        doc_line = src.next()
        if doc_line == "doc":
            doc_id = ""
        else:
            parts = _expect_fields(doc_line, "doc", 2)
            doc_id = parts[1]
        parts = _expect_fields(src.next(), "canvas", 2)
        w_text, _, h_text = parts[1].partition("x")
        canvas = (int(w_text), int(h_text))
        duration = int(_expect_fields(src.next(), "duration", 2)[1])
        lead = int(_expect_fields(src.next(), "prefetch_lead", 2)[1])

        n_objects = int(_expect_fields(src.next(), "objects", 2)[1])
        objects = []
        for _ in range(n_objects):
            parts = _expect_fields(src.next(), "o", 5)
            objects.append(RefObject(int(parts[1]), int(parts[2]), parts[3], int(parts[4])))
        n_instances = int(_expect_fields(src.next(), "instances", 2)[1])
        instances = []
        for _ in range(n_instances):
            parts = _expect_fields(src.next(), "i", 4)
            instances.append(RefInstance(int(parts[1]), int(parts[2]), parse_path(parts[3])))

        n_events = int(_expect_fields(src.next(), "events", 2)[1])
        events: list[FlowEvent] = []
        for _ in range(n_events):
            parts = _expect_fields(src.next(), "e")
            at = int(parts[1])
            kind = parts[2]
            if kind == "prefetch" and len(parts) == 4:
                events.append(Prefetch(at, int(parts[3])))
            elif kind == "show" and len(parts) == 10:
                coords = parts[5].split(",")
                if len(coords) != 4:
                    raise MalformedScriptError(f"bad rect in {parts[5]!r}")
                rect = AbsRect(*(float(c) for c in coords))
                params = ResolvedParams(
                    background_color=_parse_bg(parts[7]),
                    font_scale=float(parts[8]),
                    scale_mode=ScaleMode(parts[9]),
                )
                events.append(Show(at, int(parts[3]), int(parts[4]), rect, int(parts[6]), params))
            elif kind == "hide" and len(parts) == 4:
                events.append(Hide(at, int(parts[3])))
            elif kind == "end" and len(parts) == 3:
                events.append(End(at))
            else:
                raise MalformedScriptError(f"bad event line: {' '.join(parts)!r}")
    except (ValueError, IndexError) as exc:
        if isinstance(exc, MalformedScriptError):
            raise
        raise MalformedScriptError(f"bad script value: {exc}") from exc

    return FlowScript(
        doc_id=doc_id,
        canvas=canvas,
        total_duration=duration,
        prefetch_lead_ms=lead,
        ref_table=LocalRefTable(tuple(objects), tuple(instances)),
        events=tuple(events),
    )
