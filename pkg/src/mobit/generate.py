"""Seeded random documents for oracle equivalence and robustness tests.

Documents are built level by level so references only point downward,
which makes them acyclic by construction while still exercising DAG
sharing; regions and intervals intentionally overrun their parents part
of the time so clamping paths get real coverage.  ``inject_cycle``
produces a broken variant for acyclicity tests.
"""

from __future__ import annotations

import random

from .model import (
    Document,
    Element,
    Mob,
    ParamSet,
    PlaylistEntry,
    Region,
    ScaleMode,
    TimeSpec,
)

__all__ = ["inject_cycle", "random_document"]

_MIMES = [
    ("image", "png"),
    ("image", "jpeg"),
    ("text", "plain"),
    ("text", "html"),
    ("video", "mp4"),
    ("audio", "ogg"),
]

# Shared mobs multiply instance counts; cap the blowup so property runs
# over hundreds of documents stay fast.
_MAX_INSTANCES = 400


def _random_region(rng: random.Random) -> Region:
    if rng.random() < 0.15:
        # deliberately out of bounds on at least one side
        x = rng.uniform(-0.4, 0.9)
        y = rng.uniform(-0.4, 0.9)
        w = rng.uniform(0.2, 1.4)
        h = rng.uniform(0.2, 1.4)
    else:
        x = rng.uniform(0.0, 0.7)
        y = rng.uniform(0.0, 0.7)
        w = rng.uniform(0.05, 1.0 - x)
        h = rng.uniform(0.05, 1.0 - y)
    return Region(x, y, w, h)


def _random_time(rng: random.Random, parent_scale: int) -> TimeSpec:
    start = rng.randrange(0, max(1, int(parent_scale * 0.9)))
    if rng.random() < 0.3:
        return TimeSpec(start, None)
    duration = rng.randrange(1, max(2, int(parent_scale * 0.8)))
    return TimeSpec(start, duration)


def _random_params(rng: random.Random) -> ParamSet:
    bg = None
    if rng.random() < 0.2:
        bg = tuple(rng.randrange(256) for _ in range(4))
    fs = round(rng.uniform(0.5, 2.0), 2) if rng.random() < 0.2 else None
    sm = rng.choice(list(ScaleMode)) if rng.random() < 0.15 else None
    return ParamSet(background_color=bg, font_scale=fs, scale_mode=sm)


def _instance_count(mobs: dict[int, Mob], elements: dict[int, Element], root: int) -> int:
    memo: dict[int, int] = {}

    def visits_in(mob_id: int) -> int:
        if mob_id in memo:
            return memo[mob_id]
        total = 0
        for entry in mobs[mob_id].playlist:
            if entry.target in elements:
                total += 1
            else:
                total += visits_in(entry.target)
        memo[mob_id] = total
        return total

    return visits_in(root)


def random_document(
    rng: random.Random,
    max_depth: int = 5,
    max_entries: int = 50,
    doc_id: str = "generated",
) -> Document:
    """One random acyclic document; deterministic for a given rng state."""
    for _ in range(16):
        doc = _try_random_document(rng, max_depth, max_entries, doc_id)
        if _instance_count(dict(doc.mobs), dict(doc.elements), doc.root) <= _MAX_INSTANCES:
            return doc
    return doc  # pathological sharing 16 times in a row is effectively impossible


def _try_random_document(
    rng: random.Random, max_depth: int, max_entries: int, doc_id: str
) -> Document:
    duration = rng.randrange(2000, 20001)
    canvas = (rng.choice([640, 800, 1024]), rng.choice([480, 600, 768]))
    next_id = 1

    def take_id() -> int:
        nonlocal next_id
        out = next_id
        next_id += 1
        return out

    depth_budget = rng.randrange(2, max_depth + 1)
    mob_levels: list[list[int]] = [[] for _ in range(depth_budget)]
    mobs: dict[int, Mob] = {}
    elements: dict[int, Element] = {}

    root_id = take_id()
    mob_levels[0].append(root_id)
    # pre-create a sprinkling of deeper mobs so sharing targets exist
    for level in range(1, depth_budget):
        for _ in range(rng.randrange(0, 3)):
            mob_levels[level].append(take_id())

    def new_element() -> int:
        object_id = take_id()
        mime = rng.choice(_MIMES)
        payload = bytes(rng.randrange(256) for _ in range(rng.randrange(4, 64)))
        elements[object_id] = Element(
            id=object_id, name=f"el{object_id}", mime_type=mime, payload=payload
        )
        return object_id

    entries_left = rng.randrange(1, max_entries + 1)

    def build_playlist(level: int) -> tuple[PlaylistEntry, ...]:
        nonlocal entries_left
        out = []
        want = rng.randrange(0, 5)
        while want > 0 and entries_left > 0:
            want -= 1
            entries_left -= 1
            roll = rng.random()
            deeper = [m for lv in mob_levels[level + 1 :] for m in lv]
            if roll < 0.55 or level + 1 >= depth_budget:
                if elements and rng.random() < 0.3:
                    target = rng.choice(sorted(elements))
                else:
                    target = new_element()
            elif roll < 0.8 and deeper:
                target = rng.choice(deeper)
            else:
                target = take_id()
                mob_levels[level + 1].append(target)
            out.append(
                PlaylistEntry(
                    target=target,
                    region=_random_region(rng),
                    time=_random_time(rng, duration),
                    params=_random_params(rng),
                )
            )
        return tuple(out)

    for level in range(depth_budget):
        for mob_id in list(mob_levels[level]):
            mobs[mob_id] = Mob(
                id=mob_id, name=f"mob{mob_id}", playlist=build_playlist(level)
            )
    # mobs created while building playlists of the deepest level
    for level in range(depth_budget):
        for mob_id in mob_levels[level]:
            if mob_id not in mobs:
                mobs[mob_id] = Mob(id=mob_id, name=f"mob{mob_id}", playlist=())

    if not mobs[root_id].playlist and not elements:
        # keep every document non-trivial enough to compile something
        target = new_element()
        mobs[root_id] = Mob(
            id=root_id,
            name=mobs[root_id].name,
            playlist=(PlaylistEntry(target=target),),
        )

    return Document(
        id=doc_id,
        root=root_id,
        canvas=canvas,
        total_duration=duration,
        mobs=mobs,
        elements=elements,
    )


def _reachable_mobs(doc: Document) -> list[int]:
    seen: set[int] = set()
    stack = [doc.root]
    out = []
    while stack:
        object_id = stack.pop()
        if object_id in seen or object_id not in doc.mobs:
            continue
        seen.add(object_id)
        out.append(object_id)
        stack.extend(e.target for e in doc.mobs[object_id].playlist)
    return sorted(out)


def inject_cycle(doc: Document, rng: random.Random) -> Document:
    """Copy of the document with one extra reference closing a random cycle."""
    reachable = _reachable_mobs(doc)
    victim_id = rng.choice(reachable)
    if rng.random() < 0.3:
        back_target = victim_id  # self-loop
    else:
        ancestors = [m for m in reachable if _reaches_mob(doc, m, victim_id)]
        back_target = rng.choice(ancestors) if ancestors else victim_id
    victim = doc.mobs[victim_id]
    where = rng.randrange(0, len(victim.playlist) + 1)
    entry = PlaylistEntry(
        target=back_target,
        region=_random_region(rng),
        time=_random_time(rng, doc.total_duration),
    )
    playlist = victim.playlist[:where] + (entry,) + victim.playlist[where:]
    mobs = dict(doc.mobs)
    mobs[victim_id] = Mob(id=victim_id, name=victim.name, playlist=playlist)
    return Document(
        id=doc.id,
        root=doc.root,
        canvas=doc.canvas,
        total_duration=doc.total_duration,
        mobs=mobs,
        elements=doc.elements,
    )


def _reaches_mob(doc: Document, start: int, goal: int) -> bool:
    seen: set[int] = set()
    stack = [start]
    while stack:
        object_id = stack.pop()
        if object_id == goal:
            return True
        if object_id in seen or object_id not in doc.mobs:
            continue
        seen.add(object_id)
        stack.extend(e.target for e in doc.mobs[object_id].playlist)
    return False
