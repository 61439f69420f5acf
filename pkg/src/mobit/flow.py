"""Linearise a document into a flow script; includes the brute-force oracle.

Compilation walks the hierarchy once in document (preorder) order carrying
the absolute rectangle, absolute interval, and resolved parameters, then
merges every placement into a single event stream sorted by time.  Display
intervals are half-open ``[start, end)`` so back-to-back placements swap
seamlessly.

``scene_at`` answers "what is visible at time t" by direct recursive
evaluation with its own inline arithmetic and never looks at a flow
script; ``replay`` answers the same question from a script alone.  The two
must agree everywhere, which is the central correctness property of the
compiler.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .model import Document, Element, Mob, ParamSet, ScaleMode, resolve
from .script import (
    AbsRect,
    End,
    FlowScript,
    Hide,
    LocalRefTable,
    MalformedScriptError,
    Prefetch,
    RefInstance,
    RefObject,
    ResolvedParams,
    Show,
)
from .validate import Mode, Violation, check_acyclic, check_containment, format_path

__all__ = [
    "CompileOptions",
    "CompileResult",
    "CompileError",
    "ContainmentError",
    "CycleError",
    "SceneInstance",
    "TemporalOverrunError",
    "assign_local_refs",
    "compile_flow",
    "compose_interval",
    "compose_region",
    "linearize",
    "replay",
    "scene_at",
    "scenes_equal",
]

DEFAULT_PREFETCH_LEAD_MS = 1000


class CompileError(Exception):
    pass


class CycleError(CompileError):
    def __init__(self, cycle):
        super().__init__(f"reference cycle: {'->'.join(str(i) for i in cycle.ids)}")
        self.cycle = cycle


class ContainmentError(CompileError):
    def __init__(self, violations: tuple[Violation, ...]):
        super().__init__(f"{len(violations)} containment violation(s) in strict mode")
        self.violations = violations


class TemporalOverrunError(CompileError):
    """Strict-mode interval composition refused to clip."""

    def __init__(self, overrun_ms: int):
        super().__init__(f"finite interval overruns parent by {overrun_ms} ms")
        self.overrun_ms = overrun_ms


@dataclass(frozen=True)
class CompileOptions:
    mode: Mode = Mode.CLAMP
    prefetch_lead_ms: int = DEFAULT_PREFETCH_LEAD_MS


def compose_region(parent: AbsRect, child, mode: Mode = Mode.CLAMP) -> AbsRect:
    """Map a unit-fraction child region into the parent rectangle.

    Clamp mode intersects the result with the parent.  Computation is done
    on edges rather than extents so a child that fits in the unit square
    can never land outside its parent through rounding.
    """
    x0, y0 = parent.x, parent.y
    x1, y1 = parent.x + parent.w, parent.y + parent.h
    cx0 = x0 + child.x * parent.w
    cx1 = x0 + (child.x + child.w) * parent.w
    cy0 = y0 + child.y * parent.h
    cy1 = y0 + (child.y + child.h) * parent.h
    if mode is Mode.CLAMP:
        cx0, cx1 = min(max(cx0, x0), x1), max(min(cx1, x1), x0)
        cy0, cy1 = min(max(cy0, y0), y1), max(min(cy1, y1), y0)
        if cx1 < cx0:
            cx1 = cx0
        if cy1 < cy0:
            cy1 = cy0
    return AbsRect(cx0, cy0, cx1 - cx0, cy1 - cy0)


def compose_interval(
    parent_abs: tuple[int, int], child, mode: Mode = Mode.CLAMP
) -> tuple[int, int] | None:
    """Absolute child interval, or None when it is empty.

    Open durations run to the parent end by definition and never overrun.
    Clamp mode clips finite overruns; strict mode raises
    :class:`TemporalOverrunError` instead (a validated document never
    triggers it).
    """
    ps, pe = parent_abs
    start = ps + child.start_offset
    if child.duration_ms is None:
        end = pe
    else:
        end = start + child.duration_ms
        if end > pe:
            if mode is Mode.STRICT:
                raise TemporalOverrunError(end - pe)
            end = pe
    if start >= end:
        return None
    return (start, end)


_ROOT_PARAMS = ResolvedParams()


def _merge_params(parent: ResolvedParams, child: ParamSet) -> ResolvedParams:
    if child.is_empty():
        return parent
    return ResolvedParams(
        background_color=(
            child.background_color
            if child.background_color is not None
            else parent.background_color
        ),
        font_scale=(
            parent.font_scale * child.font_scale
            if child.font_scale is not None
            else parent.font_scale
        ),
        scale_mode=(
            child.scale_mode if child.scale_mode is not None else parent.scale_mode
        ),
    )


@dataclass
class _ElementVisit:
    path: tuple[int, ...]
    element: Element
    z: int
    instance_id: int
    rect: AbsRect
    interval: tuple[int, int] | None
    params: ResolvedParams
    clipped_space: bool  # cumulative along the ancestor chain
    clipped_time: bool


@dataclass
class _Traversal:
    visits: list[_ElementVisit] = field(default_factory=list)
    first_seen: dict[int, int] = field(default_factory=dict)  # element id -> local_ref
    order: list[int] = field(default_factory=list)  # element ids by first visit


def _traverse(doc: Document, mode: Mode) -> _Traversal:
    """Single preorder walk computing geometry, numbering, and clip flags.

    Entries with empty intervals still advance every counter so that the
    numbering depends only on document structure, never on timing.
    """
    out = _Traversal()
    z_counter = 0
    instance_counter = 0

    def walk(
        mob: Mob,
        rect: AbsRect,
        interval: tuple[int, int] | None,
        params: ResolvedParams,
        path: tuple[int, ...],
        clipped_space: bool,
        clipped_time: bool,
    ) -> None:
        nonlocal z_counter, instance_counter
        for i, entry in enumerate(mob.playlist):
            z = z_counter
            z_counter += 1
            epath = path + (i,)
            child_rect = compose_region(rect, entry.region, mode)
            c_space = clipped_space or _region_clips(rect, entry.region)
            if interval is None:
                child_interval = None
                c_time = clipped_time
            else:
                child_interval = compose_interval(interval, entry.time, mode)
                c_time = clipped_time or _interval_clips(interval, entry.time)
            child_params = _merge_params(params, entry.params)
            node = resolve(doc, entry.target)
            if isinstance(node, Element):
                out.visits.append(
                    _ElementVisit(
                        path=epath,
                        element=node,
                        z=z,
                        instance_id=instance_counter,
                        rect=child_rect,
                        interval=child_interval,
                        params=child_params,
                        clipped_space=c_space,
                        clipped_time=c_time,
                    )
                )
                instance_counter += 1
                if node.id not in out.first_seen:
                    out.first_seen[node.id] = len(out.order)
                    out.order.append(node.id)
            else:
                walk(node, child_rect, child_interval, child_params, epath, c_space, c_time)

    root_rect = AbsRect(0.0, 0.0, float(doc.canvas[0]), float(doc.canvas[1]))
    walk(doc.root_mob, root_rect, (0, doc.total_duration), _ROOT_PARAMS, (), False, False)
    return out


def _region_clips(parent: AbsRect, region) -> bool:
    """Whether clamping actually changes the composed rectangle."""
    return (
        region.x < 0
        or region.y < 0
        or (region.x + region.w) > 1
        or (region.y + region.h) > 1
    )


def _interval_clips(parent: tuple[int, int], time) -> bool:
    """Whether clamping shortens a finite interval that still shows."""
    if time.duration_ms is None:
        return False
    start = parent[0] + time.start_offset
    return start < parent[1] < start + time.duration_ms


def assign_local_refs(doc: Document, size_resolver=None) -> LocalRefTable:
    """Dense element numbering in first-visit preorder plus the instance list."""
    t = _traverse(doc, Mode.CLAMP)
    return _build_table(doc, t, size_resolver)


def _build_table(doc: Document, t: _Traversal, size_resolver) -> LocalRefTable:
    objects = []
    for ref, element_id in enumerate(t.order):
        el = doc.elements[element_id]
        if size_resolver is not None:
            size = size_resolver(el)
        else:
            size = el.inline_size()
        objects.append(RefObject(ref, element_id, el.mime_str, size))
    instances = tuple(
        RefInstance(v.instance_id, t.first_seen[v.element.id], v.path) for v in t.visits
    )
    return LocalRefTable(tuple(objects), instances)


@dataclass(frozen=True)
class CompileResult:
    script: FlowScript
    warnings: tuple[str, ...]
    dropped: int
    clipped_space: int  # emitted instances whose rect chain was clipped
    clipped_time: int

    @property
    def modified(self) -> bool:
        """True when clamping changed anything an emitted instance shows."""
        return bool(self.clipped_space or self.clipped_time)


def compile_flow(doc: Document, opts: CompileOptions = CompileOptions(), size_resolver=None) -> CompileResult:
    """Full compilation entry point with drop/clip accounting.

    Strict mode refuses documents with any containment violation; clamp
    mode compiles everything acyclic, clipping space and time to the
    parent and dropping placements whose interval is empty.
    """
    cycle = check_acyclic(doc)
    if cycle is not None:
        raise CycleError(cycle)
    if opts.mode is Mode.STRICT:
        violations = check_containment(doc, Mode.STRICT)
        if violations:
            raise ContainmentError(tuple(violations))

    t = _traverse(doc, opts.mode)
    table = _build_table(doc, t, size_resolver)
    ref_of = {o.object_id: o.local_ref for o in table.objects}

    events: list = []
    warnings: list[str] = []
    first_show: dict[int, int] = {}
    dropped = clipped_space = clipped_time = 0
    for v in t.visits:
        if v.interval is None:
            dropped += 1
            warnings.append(
                f"dropped entry {format_path(v.path)} (element {v.element.id}): "
                "empty interval after composition"
            )
            continue
        if v.clipped_space:
            clipped_space += 1
        if v.clipped_time:
            clipped_time += 1
        ref = ref_of[v.element.id]
        start, end = v.interval
        events.append(Show(start, v.instance_id, ref, v.rect, v.z, v.params))
        events.append(Hide(end, v.instance_id))
        if ref not in first_show or start < first_show[ref]:
            first_show[ref] = start
    for ref, at in first_show.items():
        events.append(Prefetch(max(0, at - opts.prefetch_lead_ms), ref))
    events.append(End(doc.total_duration))
    events.sort(key=lambda e: e.sort_key())

    script = FlowScript(
        doc_id=doc.id,
        canvas=doc.canvas,
        total_duration=doc.total_duration,
        prefetch_lead_ms=opts.prefetch_lead_ms,
        ref_table=table,
        events=tuple(events),
    )
    return CompileResult(script, tuple(warnings), dropped, clipped_space, clipped_time)


def linearize(doc: Document, opts: CompileOptions = CompileOptions(), size_resolver=None) -> FlowScript:
    """Compile to a flow script; see :func:`compile_flow` for accounting."""
    return compile_flow(doc, opts, size_resolver).script


@dataclass(frozen=True)
class SceneInstance:
    """One visible element instance in a scene snapshot."""

    path: tuple[int, ...]
    object_id: int
    rect: tuple[float, float, float, float]
    z: int
    params: ResolvedParams


def scene_at(doc: Document, t: int, mode: Mode = Mode.CLAMP) -> set[SceneInstance]:
    """Active set at time ``t`` by direct recursive evaluation.

    Deliberately independent of the compiler: no flow script, no event
    sorting, its own plain min/max rectangle arithmetic.  Active means the
    instance's absolute interval satisfies ``start <= t < end``.
    """
    cycle = check_acyclic(doc)
    if cycle is not None:
        raise CycleError(cycle)
    if not 0 <= t <= doc.total_duration:
        raise ValueError(f"t={t} outside [0, {doc.total_duration}]")

    active: set[SceneInstance] = set()
    counter = {"z": 0}

    def params_over(parent: ResolvedParams, p: ParamSet) -> ResolvedParams:
        bg = p.background_color if p.background_color is not None else parent.background_color
        fs = parent.font_scale * p.font_scale if p.font_scale is not None else parent.font_scale
        sm = p.scale_mode if p.scale_mode is not None else parent.scale_mode
        return ResolvedParams(bg, fs, sm)

    def walk(mob: Mob, bounds, span, params, path) -> None:
        px, py, pw, ph = bounds
        ps, pe = span
        for i, entry in enumerate(mob.playlist):
            z = counter["z"]
            counter["z"] += 1
            r = entry.region
            cx = px + r.x * pw
            cy = py + r.y * ph
            cw = r.w * pw
            ch = r.h * ph
            if mode is Mode.CLAMP:
                right = min(cx + cw, px + pw)
                bottom = min(cy + ch, py + ph)
                cx = max(cx, px)
                cy = max(cy, py)
                cw = max(right - cx, 0.0)
                ch = max(bottom - cy, 0.0)
            cs = ps + entry.time.start_offset
            if entry.time.duration_ms is None:
                ce = pe
            else:
                ce = cs + entry.time.duration_ms
                if mode is Mode.CLAMP:
                    ce = min(ce, pe)
            cparams = params_over(params, entry.params)
            node = resolve(doc, entry.target)
            if isinstance(node, Element):
                if cs <= t < ce:
                    active.add(
                        SceneInstance(path + (i,), node.id, (cx, cy, cw, ch), z, cparams)
                    )
            else:
                walk(node, (cx, cy, cw, ch), (cs, ce), cparams, path + (i,))

    w, h = doc.canvas
    walk(doc.root_mob, (0.0, 0.0, float(w), float(h)), (0, doc.total_duration), _ROOT_PARAMS, ())
    return active


def replay(script: FlowScript, t: int) -> set[SceneInstance]:
    """Scene snapshot reconstructed purely from a flow script.

    Applies every event with ``at <= t`` in list order; the event sort
    already puts a hide before a show at the same instant, which realizes
    half-open display intervals.
    """
    visible: dict[int, Show] = {}
    for e in script.events:
        if e.at > t:
            break
        if isinstance(e, Show):
            visible[e.instance_id] = e
        elif isinstance(e, Hide):
            if e.instance_id not in visible:
                raise MalformedScriptError(f"hide without show for instance {e.instance_id}")
            del visible[e.instance_id]
    out: set[SceneInstance] = set()
    for show in visible.values():
        inst = script.ref_table.instance_by_id(show.instance_id)
        obj = script.ref_table.object_by_ref(show.local_ref)
        out.add(
            SceneInstance(inst.path, obj.object_id, show.rect.as_tuple(), show.z, show.params)
        )
    return out


def scenes_equal(a: set[SceneInstance], b: set[SceneInstance], tol: float = 1e-6) -> bool:
    """Set equality with rectangle comparison at the given pixel tolerance."""
    if len(a) != len(b):
        return False
    index = {(inst.path): inst for inst in b}
    for inst in a:
        other = index.get(inst.path)
        if other is None:
            return False
        if inst.object_id != other.object_id or inst.z != other.z:
            return False
        if inst.params != other.params:
            return False
        if any(abs(x - y) > tol for x, y in zip(inst.rect, other.rect)):
            return False
    return True
