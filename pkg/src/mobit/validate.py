"""Document self-consistency checks.

Two notions are enforced: structural consistency (the reference graph
reachable from the root must be acyclic; sharing is fine, recursion is
not) and state-space consistency (every placement stays inside its
parent's spatial and temporal bounds).  Containment has two modes:
``strict`` reports every overrun, ``clamp`` accepts them because the flow
compiler will clip, and only flags placements that clip down to nothing.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .model import Document, Element, Mob, UnknownIdError, resolve

__all__ = [
    "CycleViolation",
    "Mode",
    "Report",
    "SpatialOverrun",
    "Stats",
    "TemporalOverrun",
    "Violation",
    "check_acyclic",
    "check_containment",
    "format_path",
    "validate",
]


class Mode(str, Enum):
    STRICT = "strict"
    CLAMP = "clamp"


def format_path(path: tuple[int, ...]) -> str:
    """Render an entry-index path from the root, e.g. ``/0/2``."""
    return "/" + "/".join(str(i) for i in path) if path else "/"


@dataclass(frozen=True)
class Violation:
    path: tuple[int, ...]

    def describe(self) -> str:
        raise NotImplementedError


@dataclass(frozen=True)
class CycleViolation(Violation):
    """Witness cycle as object ids; first and last id are the same."""

    ids: tuple[int, ...]

    def __post_init__(self) -> None:
        assert len(self.ids) >= 2 and self.ids[0] == self.ids[-1]

    def describe(self) -> str:
        chain = "->".join(str(i) for i in self.ids)
        return f"cycle\t{format_path(self.path)}\t{chain}"


@dataclass(frozen=True)
class TemporalOverrun(Violation):
    target: int
    overrun_ms: int

    def describe(self) -> str:
        return (
            f"temporal-overrun\t{format_path(self.path)}\t"
            f"target={self.target} overrun_ms={self.overrun_ms}"
        )


@dataclass(frozen=True)
class SpatialOverrun(Violation):
    target: int
    axis: str  # "x" or "y"
    amount: float

    def describe(self) -> str:
        return (
            f"spatial-overrun\t{format_path(self.path)}\t"
            f"target={self.target} axis={self.axis} amount={self.amount:.6g}"
        )


@dataclass(frozen=True)
class Stats:
    mob_count: int
    element_count: int
    entry_count: int
    max_depth: int | None  # None when cycles make depth undefined


@dataclass(frozen=True)
class Report:
    violations: tuple[Violation, ...]
    stats: Stats

    @property
    def ok(self) -> bool:
        return not self.violations

    def describe(self) -> str:
        lines = [v.describe() for v in self.violations]
        depth = "-" if self.stats.max_depth is None else str(self.stats.max_depth)
        lines.append(
            f"stats\tmobs={self.stats.mob_count} elements={self.stats.element_count} "
            f"entries={self.stats.entry_count} depth={depth}"
        )
        return "\n".join(lines)


def check_acyclic(doc: Document) -> CycleViolation | None:
    """Depth-first search from the root; returns one witness cycle or None.

    Path-sensitive: an id may be reached through several routes (DAG
    sharing) as long as no route revisits an id already on its own stack.
    """
    on_stack: list[int] = []
    on_stack_set: set[int] = set()
    done: set[int] = set()
    entry_path: list[int] = []

    def visit(object_id: int) -> CycleViolation | None:
        if object_id in on_stack_set:
            start = on_stack.index(object_id)
            ids = tuple(on_stack[start:]) + (object_id,)
            return CycleViolation(path=tuple(entry_path), ids=ids)
        if object_id in done:
            return None
        node = resolve(doc, object_id)
        if isinstance(node, Element):
            done.add(object_id)
            return None
        on_stack.append(object_id)
        on_stack_set.add(object_id)
        for i, entry in enumerate(node.playlist):
            entry_path.append(i)
            found = visit(entry.target)
            entry_path.pop()
            if found is not None:
                return found
        on_stack.pop()
        on_stack_set.remove(object_id)
        done.add(object_id)
        return None

    return visit(doc.root)


def walk_cycle(doc: Document, ids: tuple[int, ...]) -> bool:
    """Re-walk a reported cycle path and confirm every hop is a real reference."""
    if len(ids) < 2 or ids[0] != ids[-1]:
        return False
    for a, b in zip(ids, ids[1:]):
        node = resolve(doc, a)
        if not isinstance(node, Mob):
            return False
        if not any(entry.target == b for entry in node.playlist):
            return False
    return True


def _clipped_extent(lo: float, size: float) -> float:
    """Extent left after clipping [lo, lo+size] to the unit interval."""
    return min(lo + size, 1.0) - max(lo, 0.0)


def check_containment(doc: Document, mode: Mode = Mode.CLAMP) -> list[Violation]:
    """Spatio-temporal containment over every reachable playlist entry.

    Strict mode flags finite intervals that overrun the parent's absolute
    interval and regions that leave the unit square.  Clamp mode accepts
    overruns (the compiler clips) but still flags placements whose region
    clips to zero or negative extent, since those can never show anything.
    Assumes an acyclic document.
    """
    violations: list[Violation] = []

    def visit(mob: Mob, abs_start: int, abs_end: int, path: tuple[int, ...]) -> None:
        for i, entry in enumerate(mob.playlist):
            epath = path + (i,)
            child_start = abs_start + entry.time.start_offset
            if mode is Mode.STRICT and entry.time.duration_ms is not None:
                child_end = child_start + entry.time.duration_ms
                if child_end > abs_end:
                    violations.append(
                        TemporalOverrun(epath, entry.target, child_end - abs_end)
                    )
            r = entry.region
            if mode is Mode.STRICT:
                for axis, lo, size in (("x", r.x, r.w), ("y", r.y, r.h)):
                    amount = max(-lo, lo + size - 1.0)
                    if amount > 0:
                        violations.append(SpatialOverrun(epath, entry.target, axis, amount))
            else:
                for axis, lo, size in (("x", r.x, r.w), ("y", r.y, r.h)):
                    left = _clipped_extent(lo, size)
                    if left <= 0:
                        violations.append(SpatialOverrun(epath, entry.target, axis, -left))
            node = resolve(doc, entry.target)
            if isinstance(node, Mob):
                if entry.time.duration_ms is None:
                    child_end = abs_end
                else:
                    child_end = child_start + entry.time.duration_ms
                    if mode is Mode.CLAMP:
                        child_end = min(child_end, abs_end)
                visit(node, child_start, child_end, epath)

    visit(doc.root_mob, 0, doc.total_duration, ())
    return violations


def _counts(doc: Document) -> tuple[int, int, int]:
    """(mobs, elements, entries) reachable from the root; cycle-safe."""
    seen: set[int] = set()
    mob_count = element_count = entry_count = 0
    stack = [doc.root]
    while stack:
        object_id = stack.pop()
        if object_id in seen:
            continue
        seen.add(object_id)
        node = resolve(doc, object_id)
        if isinstance(node, Element):
            element_count += 1
            continue
        mob_count += 1
        entry_count += len(node.playlist)
        stack.extend(entry.target for entry in node.playlist)
    return mob_count, element_count, entry_count


def _max_depth(doc: Document) -> int:
    """Longest root-to-leaf path in node levels; memoized, acyclic input only."""
    memo: dict[int, int] = {}

    def depth_of(object_id: int) -> int:
        cached = memo.get(object_id)
        if cached is not None:
            return cached
        node = resolve(doc, object_id)
        if isinstance(node, Element) or not node.playlist:
            d = 1
        else:
            d = 1 + max(depth_of(entry.target) for entry in node.playlist)
        memo[object_id] = d
        return d

    return depth_of(doc.root)


def _stats(doc: Document, acyclic: bool) -> Stats:
    mobs, elements, entries = _counts(doc)
    return Stats(mobs, elements, entries, _max_depth(doc) if acyclic else None)


def validate(doc: Document, mode: Mode = Mode.CLAMP) -> Report:
    """Resolution, acyclicity, then containment, aggregated into one report.

    Containment is skipped when a cycle is found because bounds are
    undefined under recursion; resolution failures raise
    :class:`~mobit.model.UnknownIdError` (documents built through the
    public constructors cannot contain them).
    """
    for mob in doc.mobs.values():
        for entry in mob.playlist:
            resolve(doc, entry.target)

    cycle = check_acyclic(doc)
    if cycle is not None:
        return Report(violations=(cycle,), stats=_stats(doc, acyclic=False))

    violations = tuple(check_containment(doc, mode))
    return Report(violations=violations, stats=_stats(doc, acyclic=True))
