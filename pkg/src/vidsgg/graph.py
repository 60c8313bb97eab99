"""Temporal bipartite scene graphs.

A scene is a bipartite graph between entity nodes (tracklets) and predicate
nodes.  Each predicate node links one subject and one object entity and owns
one or more time slots, one per relation instance.  The flat form used by the
evaluation code is a list of :class:`RelationTriplet`.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

ROLES = ("subject", "object")
_EPS = 1e-9


class InvalidGraphError(ValueError):
    pass


class TimeSlot(NamedTuple):
    """Half-open normalized time interval ``[start, end)``."""

    start: float
    end: float

    @classmethod
    def from_frames(cls, begin_fid: int, end_fid: int, frame_count: int) -> "TimeSlot":
        return cls(begin_fid / frame_count, end_fid / frame_count)

    def to_frames(self, frame_count: int) -> tuple[int, int]:
        return int(round(self.start * frame_count)), int(round(self.end * frame_count))

    @property
    def length(self) -> float:
        return self.end - self.start

    @property
    def center(self) -> float:
        return 0.5 * (self.start + self.end)

    def is_valid(self) -> bool:
        return 0.0 <= self.start < self.end <= 1.0

    def contains(self, other: "TimeSlot", tol: float = _EPS) -> bool:
        return self.start - tol <= other.start and other.end <= self.end + tol

    def intersect(self, other: "TimeSlot") -> "TimeSlot | None":
        s, e = max(self.start, other.start), min(self.end, other.end)
        return TimeSlot(s, e) if s < e else None


@dataclass(frozen=True, eq=False)
class Tracklet:
    """One entity track: a box per frame over ``[start_fid, start_fid + l)``."""

    id: int
    category: int
    start_fid: int
    boxes: np.ndarray
    frame_count: int

    def __post_init__(self):
        boxes = np.array(self.boxes, dtype=np.float64).reshape(-1, 4)
        boxes.setflags(write=False)
        object.__setattr__(self, "boxes", boxes)

    @property
    def length(self) -> int:
        return len(self.boxes)

    @property
    def end_fid(self) -> int:
        return self.start_fid + self.length

    @property
    def time_slot(self) -> TimeSlot:
        return TimeSlot.from_frames(self.start_fid, self.end_fid, self.frame_count)

    def crop(self, slot: TimeSlot) -> "Tracklet":
        """Restrict to the frames covered by ``slot`` (clamped to the track span)."""
        b, e = slot.to_frames(self.frame_count)
        b, e = max(b, self.start_fid), min(e, self.end_fid)
        if e <= b:
            raise InvalidGraphError(f"slot {slot} does not intersect tracklet {self.id}")
        rows = self.boxes[b - self.start_fid:e - self.start_fid]
        return Tracklet(self.id, self.category, b, rows, self.frame_count)

    def violations(self) -> list[str]:
        out = []
        if self.length == 0:
            out.append(f"tracklet {self.id}: empty")
        if self.start_fid < 0 or self.end_fid > self.frame_count:
            out.append(f"tracklet {self.id}: frames outside video")
        if self.length and not (
            np.all(self.boxes[:, 0] < self.boxes[:, 2]) and np.all(self.boxes[:, 1] < self.boxes[:, 3])
        ):
            out.append(f"tracklet {self.id}: degenerate box")
        return out

    def __eq__(self, other):
        if not isinstance(other, Tracklet):
            return NotImplemented
        return (
            (self.id, self.category, self.start_fid, self.frame_count)
            == (other.id, other.category, other.start_fid, other.frame_count)
            and np.array_equal(self.boxes, other.boxes)
        )

    __hash__ = None


@dataclass(frozen=True)
class PredicateNode:
    category: int
    time_slots: tuple[TimeSlot, ...]
    subject_idx: int
    object_idx: int
    slot_scores: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "time_slots", tuple(TimeSlot(*s) for s in self.time_slots))
        scores = tuple(float(s) for s in self.slot_scores) or (1.0,) * len(self.time_slots)
        object.__setattr__(self, "slot_scores", scores)

    @property
    def num_instances(self) -> int:
        return len(self.time_slots)

    @property
    def score(self) -> float:
        # node-level confidence is its best instance
        return max(self.slot_scores) if self.slot_scores else 0.0


@dataclass(frozen=True)
class TemporalBipartiteGraph:
    entities: tuple[Tracklet, ...] = ()
    predicates: tuple[PredicateNode, ...] = ()
    role_set: tuple[str, str] = field(default=ROLES)

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "predicates", tuple(self.predicates))

    @property
    def n(self) -> int:
        return len(self.entities)

    @property
    def m(self) -> int:
        return len(self.predicates)


@dataclass(frozen=True, eq=False)
class RelationTriplet:
    subject: Tracklet
    predicate_category: int
    object: Tracklet
    time_slot: TimeSlot
    score: float = 1.0

    @property
    def categories(self) -> tuple[int, int, int]:
        return (self.subject.category, self.predicate_category, self.object.category)

    def key(self) -> tuple:
        return (self.subject.id, self.predicate_category, self.object.id,
                self.time_slot.start, self.time_slot.end, self.score)


@dataclass
class ValidationReport:
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


def validate_graph(g: TemporalBipartiteGraph) -> ValidationReport:
    """Collect every violated invariant instead of raising."""
    out: list[str] = []
    if tuple(g.role_set) != ROLES:
        out.append(f"role set must be {ROLES}")
    ids = [e.id for e in g.entities]
    if len(set(ids)) != len(ids):
        out.append("duplicate tracklet id")
    for e in g.entities:
        out.extend(e.violations())
    seen = set()
    for j, p in enumerate(g.predicates):
        tag = f"predicate {j}"
        if p.num_instances < 1:
            out.append(f"{tag}: no time slots")
        if len(p.slot_scores) != p.num_instances:
            out.append(f"{tag}: score count mismatch")
        if any(not 0.0 <= s <= 1.0 for s in p.slot_scores):
            out.append(f"{tag}: score out of range")
        if p.subject_idx == p.object_idx:
            out.append(f"{tag}: self-relation")
        in_range = all(0 <= i < g.n for i in (p.subject_idx, p.object_idx))
        if not in_range:
            out.append(f"{tag}: entity index out of range")
        key = (p.subject_idx, p.category, p.object_idx)
        if key in seen:
            out.append(f"{tag}: duplicate (pair, category) node")
        seen.add(key)
        overlap = None
        if in_range:
            overlap = g.entities[p.subject_idx].time_slot.intersect(g.entities[p.object_idx].time_slot)
        for slot in p.time_slots:
            if not slot.is_valid():
                out.append(f"{tag}: invalid slot {tuple(slot)}")
            elif in_range and (overlap is None or not overlap.contains(slot)):
                out.append(f"{tag}: slot outside overlap {tuple(slot)}")
    return ValidationReport(out)


def to_triplets(g: TemporalBipartiteGraph) -> list[RelationTriplet]:
    """Expand every predicate node into one triplet per time slot."""
    report = validate_graph(g)
    if not report.ok:
        raise InvalidGraphError("; ".join(report.violations))
    rows = []
    for j, p in enumerate(g.predicates):
        subj, obj = g.entities[p.subject_idx], g.entities[p.object_idx]
        for k, (slot, score) in enumerate(zip(p.time_slots, p.slot_scores)):
            rows.append((-score, j, k, RelationTriplet(subj.crop(slot), p.category, obj.crop(slot), slot, score)))
    rows.sort(key=lambda r: r[:3])
    return [r[-1] for r in rows]


def from_triplets(triplets: Sequence[RelationTriplet], entities: Sequence[Tracklet]) -> TemporalBipartiteGraph:
    """Merge triplets sharing (subject, predicate, object) into predicate nodes."""
    index = {e.id: i for i, e in enumerate(entities)}
    groups: dict[tuple[int, int, int], tuple[list, list]] = {}
    for t in triplets:
        for tr in (t.subject, t.object):
            if tr.id not in index:
                raise InvalidGraphError(f"unknown tracklet id {tr.id}")
        key = (index[t.subject.id], t.predicate_category, index[t.object.id])
        slots, scores = groups.setdefault(key, ([], []))
        slots.append(t.time_slot)
        scores.append(t.score)
    nodes = [
        PredicateNode(cat, tuple(slots), s, o, tuple(scores))
        for (s, cat, o), (slots, scores) in groups.items()
    ]
    return TemporalBipartiteGraph(tuple(entities), tuple(nodes))


def triplet_multiset(triplets: Sequence[RelationTriplet]) -> Counter:
    return Counter(t.key() for t in triplets)
