"""XML reading and canonical writing of documents.

The vocabulary is ``mobit / mob / element / entry`` (schema shipped in
``data/mobit.xsd``).  Serialization is canonical: fixed attribute order,
ids ascending, two-space indent, LF endings, so that two semantically
equal documents always produce identical bytes.  Inline payloads travel
as single-line base64 text; a ``src`` attribute carries an opaque store
key instead.
"""

from __future__ import annotations

import base64
import binascii
import xml.etree.ElementTree as ET

from .model import (
    Document,
    Element,
    Mob,
    ModelError,
    ParamSet,
    PlaylistEntry,
    Region,
    ScaleMode,
    TimeSpec,
    parse_mime,
)

__all__ = [
    "DocIoError",
    "DuplicateIdError",
    "SchemaError",
    "XmlSyntaxError",
    "parse_document",
    "serialize_document",
]


class DocIoError(ValueError):
    pass


class XmlSyntaxError(DocIoError):
    def __init__(self, line: int, column: int, message: str):
        super().__init__(f"XML syntax error at {line}:{column}: {message}")
        self.line = line
        self.column = column


class SchemaError(DocIoError):
    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class DuplicateIdError(DocIoError):
    def __init__(self, object_id: int):
        super().__init__(f"duplicate id {object_id}")
        self.object_id = object_id


_MOBIT_ATTRS = {"version", "id", "root", "canvas", "duration"}
_MOB_ATTRS = {"id", "name"}
_ELEMENT_ATTRS = {"id", "name", "mime", "src", "size"}
_ENTRY_ATTRS = {"ref", "x", "y", "w", "h", "start", "dur", "bg", "font-scale", "scale-mode"}


def _require(el: ET.Element, attr: str, path: str) -> str:
    value = el.get(attr)
    if value is None:
        raise SchemaError(path, f"missing attribute {attr!r}")
    return value


def _check_attrs(el: ET.Element, allowed: set, path: str) -> None:
    for key in el.attrib:
        if key not in allowed:
            raise SchemaError(path, f"unexpected attribute {key!r}")


def _parse_int(text: str, path: str, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise SchemaError(path, f"{what} must be an integer, got {text!r}") from None


def _parse_float(text: str, path: str, what: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise SchemaError(path, f"{what} must be a number, got {text!r}") from None


def _parse_pair(text: str, path: str, what: str) -> tuple[int, int]:
    w_text, sep, h_text = text.partition("x")
    if not sep:
        raise SchemaError(path, f"{what} must look like WxH, got {text!r}")
    return (_parse_int(w_text, path, what), _parse_int(h_text, path, what))


def _parse_color(text: str, path: str) -> tuple[int, int, int, int]:
    if not text.startswith("#") or len(text) != 9:
        raise SchemaError(path, f"bg must be #rrggbbaa, got {text!r}")
    try:
        raw = bytes.fromhex(text[1:])
    except ValueError:
        raise SchemaError(path, f"bg must be #rrggbbaa, got {text!r}") from None
    return (raw[0], raw[1], raw[2], raw[3])


def _parse_entry(el: ET.Element, path: str) -> PlaylistEntry:
    _check_attrs(el, _ENTRY_ATTRS, path)
    if len(el) or (el.text or "").strip():
        raise SchemaError(path, "entry must be empty")
    ref = _parse_int(_require(el, "ref", path), path, "ref")
    region = Region(
        x=_parse_float(el.get("x", "0"), path, "x"),
        y=_parse_float(el.get("y", "0"), path, "y"),
        w=_parse_float(el.get("w", "1"), path, "w"),
        h=_parse_float(el.get("h", "1"), path, "h"),
    )
    dur_text = el.get("dur", "open")
    duration = None if dur_text == "open" else _parse_int(dur_text, path, "dur")
    time = TimeSpec(
        start_offset=_parse_int(el.get("start", "0"), path, "start"),
        duration_ms=duration,
    )
    bg = el.get("bg")
    fs = el.get("font-scale")
    sm = el.get("scale-mode")
    if sm is not None and sm not in (m.value for m in ScaleMode):
        raise SchemaError(path, f"scale-mode must be fit|fill|stretch, got {sm!r}")
    params = ParamSet(
        background_color=_parse_color(bg, path) if bg is not None else None,
        font_scale=_parse_float(fs, path, "font-scale") if fs is not None else None,
        scale_mode=ScaleMode(sm) if sm is not None else None,
    )
    return PlaylistEntry(target=ref, region=region, time=time, params=params)


def parse_document(data: bytes) -> Document:
    """Parse UTF-8 XML bytes into a document.

    Raises :class:`XmlSyntaxError` for malformed XML,
    :class:`DuplicateIdError` for id collisions, and :class:`SchemaError`
    for everything the schema forbids.
    """
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        line, col = exc.position if exc.position else (0, 0)
        raise XmlSyntaxError(line, col, exc.msg if hasattr(exc, "msg") else str(exc)) from exc

    if root.tag != "mobit":
        raise SchemaError("/", f"root element must be <mobit>, got <{root.tag}>")
    path = "/mobit"
    _check_attrs(root, _MOBIT_ATTRS, path)
    if _require(root, "version", path) != "1":
        raise SchemaError(path, f"unsupported version {root.get('version')!r}")
    doc_id = root.get("id", "")
    root_id = _parse_int(_require(root, "root", path), path, "root")
    canvas = _parse_pair(_require(root, "canvas", path), path, "canvas")
    duration = _parse_int(_require(root, "duration", path), path, "duration")

    mobs: dict[int, Mob] = {}
    elements: dict[int, Element] = {}
    seen: set[int] = set()
    mob_index = 0
    element_index = 0
    for child in root:
        if child.tag == "mob":
            mob_index += 1
            cpath = f"{path}/mob[{mob_index}]"
            _check_attrs(child, _MOB_ATTRS, cpath)
            object_id = _parse_int(_require(child, "id", cpath), cpath, "id")
            if object_id in seen:
                raise DuplicateIdError(object_id)
            seen.add(object_id)
            entries = []
            entry_index = 0
            for sub in child:
                if sub.tag != "entry":
                    raise SchemaError(cpath, f"unexpected element <{sub.tag}>")
                entry_index += 1
                entries.append(_parse_entry(sub, f"{cpath}/entry[{entry_index}]"))
            try:
                mobs[object_id] = Mob(
                    id=object_id, name=child.get("name", ""), playlist=tuple(entries)
                )
            except ModelError as exc:
                raise SchemaError(cpath, str(exc)) from exc
        elif child.tag == "element":
            element_index += 1
            cpath = f"{path}/element[{element_index}]"
            _check_attrs(child, _ELEMENT_ATTRS, cpath)
            object_id = _parse_int(_require(child, "id", cpath), cpath, "id")
            if object_id in seen:
                raise DuplicateIdError(object_id)
            seen.add(object_id)
            if len(child):
                raise SchemaError(cpath, "element must not have child elements")
            try:
                mime = parse_mime(_require(child, "mime", cpath))
            except ModelError as exc:
                raise SchemaError(cpath, str(exc)) from exc
            src = child.get("src")
            text = (child.text or "").strip()
            payload: bytes | None = None
            if src is not None and text:
                raise SchemaError(cpath, "src attribute and inline payload are exclusive")
            if text:
                try:
                    payload = base64.b64decode(text, validate=True)
                except (binascii.Error, ValueError) as exc:
                    raise SchemaError(cpath, f"invalid base64 payload: {exc}") from exc
            size_text = child.get("size")
            size = _parse_pair(size_text, cpath, "size") if size_text is not None else None
            try:
                elements[object_id] = Element(
                    id=object_id,
                    name=child.get("name", ""),
                    mime_type=mime,
                    payload=payload,
                    payload_key=src,
                    intrinsic_size=size,
                )
            except ModelError as exc:
                raise SchemaError(cpath, str(exc)) from exc
        else:
            raise SchemaError(path, f"unexpected element <{child.tag}>")

    try:
        return Document(
            id=doc_id,
            root=root_id,
            canvas=canvas,
            total_duration=duration,
            mobs=mobs,
            elements=elements,
        )
    except ModelError as exc:
        raise SchemaError(path, str(exc)) from exc


def _escape(text: str) -> str:
    return (
        text.replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace(">", "&gt;")
        .replace('"', "&quot;")
    )


def _num(value: float) -> str:
    return repr(float(value))


def _entry_text(entry: PlaylistEntry) -> str:
    r, t, p = entry.region, entry.time, entry.params
    parts = [
        f'ref="{entry.target}"',
        f'x="{_num(r.x)}"',
        f'y="{_num(r.y)}"',
        f'w="{_num(r.w)}"',
        f'h="{_num(r.h)}"',
        f'start="{t.start_offset}"',
        f'dur="{"open" if t.duration_ms is None else t.duration_ms}"',
    ]
    if p.background_color is not None:
        c = p.background_color
        parts.append(f'bg="#{c[0]:02x}{c[1]:02x}{c[2]:02x}{c[3]:02x}"')
    if p.font_scale is not None:
        parts.append(f'font-scale="{_num(p.font_scale)}"')
    if p.scale_mode is not None:
        parts.append(f'scale-mode="{p.scale_mode.value}"')
    return "<entry " + " ".join(parts) + "/>"


def serialize_document(doc: Document) -> bytes:
    """Canonical XML bytes; ``parse_document`` inverts this exactly."""
    lines = ['<?xml version="1.0" encoding="UTF-8"?>']
    attrs = ['version="1"']
    if doc.id:
        attrs.append(f'id="{_escape(doc.id)}"')
    attrs.append(f'root="{doc.root}"')
    attrs.append(f'canvas="{doc.canvas[0]}x{doc.canvas[1]}"')
    attrs.append(f'duration="{doc.total_duration}"')
    lines.append("<mobit " + " ".join(attrs) + ">")

    for object_id in sorted(doc.mobs):
        mob = doc.mobs[object_id]
        head = f'  <mob id="{mob.id}" name="{_escape(mob.name)}"'
        if not mob.playlist:
            lines.append(head + "/>")
            continue
        lines.append(head + ">")
        for entry in mob.playlist:
            lines.append("    " + _entry_text(entry))
        lines.append("  </mob>")

    for object_id in sorted(doc.elements):
        el = doc.elements[object_id]
        parts = [f'id="{el.id}"', f'name="{_escape(el.name)}"', f'mime="{el.mime_str}"']
        if el.payload_key is not None:
            parts.append(f'src="{_escape(el.payload_key)}"')
        if el.intrinsic_size is not None:
            parts.append(f'size="{el.intrinsic_size[0]}x{el.intrinsic_size[1]}"')
        head = "  <element " + " ".join(parts)
        if el.payload:
            body = base64.b64encode(el.payload).decode("ascii")
            lines.append(head + ">" + body + "</element>")
        else:
            lines.append(head + "/>")

    lines.append("</mobit>")
    return ("\n".join(lines) + "\n").encode("utf-8")
