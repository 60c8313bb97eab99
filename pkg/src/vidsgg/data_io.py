"""Synthetic scenes, on-disk formats and dataset statistics.

Annotation files follow the usual video-relation layout::

    {"video_id", "fps", "frame_count",
     "subject/objects": [{"tid", "category"}],
     "trajectories": [[{"tid", "bbox": {"xmin", "ymin", "xmax", "ymax"}}], ...],  # one list per frame
     "relation_instances": [{"subject_tid", "object_tid", "predicate", "begin_fid", "end_fid"}]}

Boxes are stored normalized to ``[0, 1]``; ``end_fid`` is exclusive.  Feature
matrices live next to the annotation as raw little-endian float32 files with
a JSON sidecar describing their shape.
"""
from __future__ import annotations

import json
import math
import os
from collections import Counter
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .graph import PredicateNode, RelationTriplet, TemporalBipartiteGraph, TimeSlot, Tracklet, to_triplets

SCORE_DECIMALS = 6


class SchemaError(ValueError):
    """Malformed file; the message starts with the offending JSON path."""


@dataclass(frozen=True)
class Vocab:
    entities: tuple[str, ...]
    predicates: tuple[str, ...]

    @classmethod
    def synthetic(cls, num_entities: int, num_predicates: int) -> "Vocab":
        return cls(tuple(f"object{i}" for i in range(num_entities)),
                   tuple(f"predicate{i}" for i in range(num_predicates)))

    def entity_index(self, name: str) -> int:
        try:
            return self.entities.index(name)
        except ValueError:
            raise SchemaError(f"unknown entity category {name!r}") from None

    def predicate_index(self, name: str) -> int:
        try:
            return self.predicates.index(name)
        except ValueError:
            raise SchemaError(f"unknown predicate {name!r}") from None

    def to_dict(self) -> dict:
        return {"entities": list(self.entities), "predicates": list(self.predicates)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Vocab":
        return cls(tuple(d["entities"]), tuple(d["predicates"]))


@dataclass
class SynthConfig:
    seed: int = 0
    entity_count: tuple[int, int] = (3, 6)
    num_entity_classes: int = 10
    num_predicate_classes: int = 8
    frames: int = 64
    relation_count: tuple[int, int] = (2, 6)
    multi_instance_prob: float = 0.35
    noise: float = 0.1
    d_a: int = 64
    d_v: int = 64
    fps: int = 16
    world_seed: int = 2022
    predicates_per_pair: int = 3

    def __post_init__(self):
        self.entity_count = tuple(self.entity_count)
        self.relation_count = tuple(self.relation_count)
        if not (2 <= self.entity_count[0] <= self.entity_count[1]):
            raise ValueError("entity_count must be a nonempty range starting at >= 2")
        if not (1 <= self.relation_count[0] <= self.relation_count[1]):
            raise ValueError("relation_count must be a nonempty range starting at >= 1")
        if not 0.0 <= self.multi_instance_prob <= 1.0:
            raise ValueError("multi_instance_prob must lie in [0, 1]")
        if self.num_entity_classes > self.d_a:
            raise ValueError("d_a must hold a one-hot entity code")
        if not 1 <= self.predicates_per_pair <= self.num_predicate_classes:
            raise ValueError("predicates_per_pair must lie in [1, num_predicate_classes]")
        if self.frames < 16:
            raise ValueError("need at least 16 frames")

    def vocab(self) -> Vocab:
        return Vocab.synthetic(self.num_entity_classes, self.num_predicate_classes)


@dataclass(eq=False)
class SceneRecord:
    video_id: str
    frame_count: int
    fps: float
    objects: list[dict]  # [{"tid", "category"}]
    tracks: dict[int, tuple[int, np.ndarray]]  # tid -> (start_fid, (l, 4) boxes)
    relations: list[dict]  # [{"subject_tid", "object_tid", "predicate", "begin_fid", "end_fid"}]
    appearance: dict[int, np.ndarray] | None = None  # tid -> (l, d_a) float32
    frames: np.ndarray | None = None  # (T, d_v) float32

    def tracklets(self, vocab: Vocab) -> list[Tracklet]:
        cats = {o["tid"]: o["category"] for o in self.objects}
        return [Tracklet(tid, vocab.entity_index(cats[tid]), start, boxes, self.frame_count)
                for tid, (start, boxes) in sorted(self.tracks.items())]

    def __eq__(self, other):
        if not isinstance(other, SceneRecord):
            return NotImplemented
        same = (self.video_id, self.frame_count, self.fps, self.objects, self.relations) == \
            (other.video_id, other.frame_count, other.fps, other.objects, other.relations)
        same = same and self.tracks.keys() == other.tracks.keys() and all(
            self.tracks[t][0] == other.tracks[t][0] and np.array_equal(self.tracks[t][1], other.tracks[t][1])
            for t in self.tracks)
        same = same and _maybe_equal(self.frames, other.frames)
        if self.appearance is None or other.appearance is None:
            return same and self.appearance is other.appearance
        return same and self.appearance.keys() == other.appearance.keys() and all(
            np.array_equal(self.appearance[t], other.appearance[t]) for t in self.appearance)


def _maybe_equal(a, b) -> bool:
    if a is None or b is None:
        return a is b
    return a.dtype == b.dtype and np.array_equal(a, b)


def to_graph(record: SceneRecord, vocab: Vocab) -> TemporalBipartiteGraph:
    """Ground-truth bipartite graph; same (pair, predicate) instances share one node."""
    entities = record.tracklets(vocab)
    index = {e.id: i for i, e in enumerate(entities)}
    nodes: dict[tuple[int, int, int], list[TimeSlot]] = {}
    for r in record.relations:
        key = (index[r["subject_tid"]], vocab.predicate_index(r["predicate"]), index[r["object_tid"]])
        nodes.setdefault(key, []).append(TimeSlot.from_frames(r["begin_fid"], r["end_fid"], record.frame_count))
    preds = [PredicateNode(cat, tuple(slots), s, o) for (s, cat, o), slots in nodes.items()]
    return TemporalBipartiteGraph(tuple(entities), tuple(preds))


def gt_triplets(record: SceneRecord, vocab: Vocab) -> list[RelationTriplet]:
    return to_triplets(to_graph(record, vocab))


# ---------------------------------------------------------------- synthesis

@dataclass(frozen=True)
class WorldCodes:
    """Category and predicate signatures shared by every scene of one world seed."""

    subject: np.ndarray  # (C_p, d_a)
    object: np.ndarray  # (C_p, d_a)
    frame: np.ndarray  # (C_p, d_v)
    allowed: np.ndarray  # (C_e, C_e, C_p) bool, predicates a category pair can take


@lru_cache(maxsize=8)
def world_codes(world_seed: int, num_predicates: int, d_a: int, d_v: int,
                num_entities: int = 10, per_pair: int = 3) -> WorldCodes:
    rng = np.random.default_rng(world_seed)

    def unit(rows, dim):
        v = rng.standard_normal((rows, dim))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    subject, obj, frame = unit(num_predicates, d_a), unit(num_predicates, d_a), unit(num_predicates, d_v)
    allowed = np.zeros((num_entities, num_entities, num_predicates), dtype=bool)
    for s in range(num_entities):
        for o in range(num_entities):
            allowed[s, o, rng.choice(num_predicates, size=per_pair, replace=False)] = True
    return WorldCodes(subject, obj, frame, allowed)


def _linear_boxes(rng: np.random.Generator, length: int) -> np.ndarray:
    w, h = rng.uniform(0.1, 0.3, size=2)
    cx0, cy0 = rng.uniform(0.2, 0.8, size=2)
    vx, vy = rng.uniform(-0.005, 0.005, size=2)
    t = np.arange(length)
    cx = np.clip(cx0 + vx * t, w / 2, 1 - w / 2)
    cy = np.clip(cy0 + vy * t, h / 2, 1 - h / 2)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def _instance_slots(rng: np.random.Generator, lo: int, hi: int, k: int) -> list[tuple[int, int]]:
    """``k`` disjoint frame ranges inside ``[lo, hi)``, one per equal segment."""
    span = hi - lo
    if k == 1:
        length = int(rng.integers(math.ceil(0.6 * span), span + 1))
        start = int(rng.integers(lo, hi - length + 1))
        return [(start, start + length)]
    out = []
    for i in range(k):
        a, b = lo + (i * span) // k, lo + ((i + 1) * span) // k
        seg = b - a
        length = int(rng.integers(max(2, math.ceil(0.4 * seg)), max(2, int(0.7 * seg)) + 1))
        start = int(rng.integers(a, b - length + 1))
        out.append((start, start + length))
    return out


def generate_scene(cfg: SynthConfig) -> SceneRecord:
    """One synthetic video, fully determined by ``cfg``.

    Tracklets move linearly.  While a relation holds, the subject's and the
    object's appearance receive role-specific predicate codes and the frame
    features receive the predicate's frame code, so both classification and
    grounding have a learnable signal.
    """
    rng = np.random.default_rng(cfg.seed)
    vocab = cfg.vocab()
    codes = world_codes(cfg.world_seed, cfg.num_predicate_classes, cfg.d_a, cfg.d_v,
                        cfg.num_entity_classes, cfg.predicates_per_pair)
    t_len = cfg.frames
    n = int(rng.integers(cfg.entity_count[0], cfg.entity_count[1] + 1))
    objects, tracks = [], {}
    for tid in range(n):
        cat = int(rng.integers(cfg.num_entity_classes))
        begin = int(rng.integers(0, int(0.3 * t_len) + 1))
        end = int(rng.integers(math.ceil(0.7 * t_len), t_len + 1))
        objects.append({"tid": tid, "category": vocab.entities[cat]})
        tracks[tid] = (begin, _linear_boxes(rng, end - begin))

    # distinct predicates per scene keep every relation identifiable from its codes;
    # each goes to a random pair whose categories admit it, skipped if none does
    r = int(rng.integers(cfg.relation_count[0], cfg.relation_count[1] + 1))
    cats = [vocab.entity_index(o["category"]) for o in objects]
    pairs = [(s, o) for s in range(n) for o in range(n) if s != o]
    relations, planted = [], []
    for p in rng.permutation(cfg.num_predicate_classes):
        if len({x[2] for x in planted}) >= r:
            break
        fits = [pr for pr in pairs if codes.allowed[cats[pr[0]], cats[pr[1]], p]]
        if not fits:
            continue
        s, o = fits[int(rng.integers(len(fits)))]
        lo = max(tracks[s][0], tracks[o][0])
        hi = min(tracks[s][0] + len(tracks[s][1]), tracks[o][0] + len(tracks[o][1]))
        k = int(rng.integers(2, 4)) if rng.random() < cfg.multi_instance_prob else 1
        for b, e in _instance_slots(rng, lo, hi, k):
            relations.append({"subject_tid": s, "object_tid": o, "predicate": vocab.predicates[int(p)],
                              "begin_fid": b, "end_fid": e})
            planted.append((s, o, int(p), b, e))

    appearance = {}
    for tid, (begin, boxes) in tracks.items():
        feat = cfg.noise * rng.standard_normal((len(boxes), cfg.d_a))
        feat[:, vocab.entity_index(objects[tid]["category"])] += 1.0
        appearance[tid] = feat
    frames = cfg.noise * rng.standard_normal((t_len, cfg.d_v))
    for s, o, p, b, e in planted:
        appearance[s][b - tracks[s][0]:e - tracks[s][0]] += codes.subject[p]
        appearance[o][b - tracks[o][0]:e - tracks[o][0]] += codes.object[p]
        frames[b:e] += codes.frame[p]
    return SceneRecord(
        video_id=f"synth_{cfg.seed:08d}", frame_count=t_len, fps=cfg.fps, objects=objects,
        tracks=tracks, relations=relations,
        appearance={t: a.astype(np.float32) for t, a in appearance.items()},
        frames=frames.astype(np.float32))


def corpus_seeds(base_seed: int, count: int) -> list[int]:
    return [base_seed * 100_003 + i for i in range(count)]


def generate_corpus(cfg: SynthConfig, count: int) -> list[SceneRecord]:
    return [generate_scene(replace(cfg, seed=s)) for s in corpus_seeds(cfg.seed, count)]


# ---------------------------------------------------------------- matrices

def save_matrix(path: str | os.PathLike, values: np.ndarray, **meta) -> None:
    """Row-major little-endian float32 payload plus ``<path>.json`` sidecar."""
    path = Path(path)
    arr = np.ascontiguousarray(values, dtype="<f4")
    path.write_bytes(arr.tobytes())
    side = {**meta, "shape": list(arr.shape), "dtype": "float32"}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(side, sort_keys=True), encoding="utf-8")


def load_matrix(path: str | os.PathLike) -> tuple[np.ndarray, dict]:
    path = Path(path)
    side = json.loads(path.with_suffix(path.suffix + ".json").read_text(encoding="utf-8"))
    arr = np.frombuffer(path.read_bytes(), dtype="<f4")
    shape = tuple(side["shape"])
    if arr.size != math.prod(shape):
        raise SchemaError(f"{path}: payload size {arr.size} does not match shape {shape}")
    return arr.reshape(shape).astype(np.float32), side


# ---------------------------------------------------------------- annotations

def record_to_json(rec: SceneRecord) -> dict:
    per_frame: list[list[dict]] = [[] for _ in range(rec.frame_count)]
    for tid, (start, boxes) in sorted(rec.tracks.items()):
        for i, b in enumerate(boxes):
            per_frame[start + i].append({"tid": tid, "bbox": {"xmin": float(b[0]), "ymin": float(b[1]),
                                                              "xmax": float(b[2]), "ymax": float(b[3])}})
    return {"video_id": rec.video_id, "fps": rec.fps, "frame_count": rec.frame_count,
            "subject/objects": [dict(o) for o in rec.objects],
            "trajectories": per_frame,
            "relation_instances": [dict(r) for r in rec.relations]}


def save_scene(rec: SceneRecord, directory: str | os.PathLike) -> Path:
    """Write annotation + feature files into ``directory/<video_id>/``; returns the annotation path."""
    out = Path(directory) / rec.video_id
    out.mkdir(parents=True, exist_ok=True)
    ann = out / "annotation.json"
    ann.write_text(json.dumps(record_to_json(rec), sort_keys=True), encoding="utf-8")
    if rec.frames is not None:
        save_matrix(out / "frames.f32", rec.frames, video_id=rec.video_id, T=int(rec.frames.shape[0]),
                    d_v=int(rec.frames.shape[1]), fps=rec.fps)
    for tid, feat in (rec.appearance or {}).items():
        save_matrix(out / f"appearance_{tid}.f32", feat, video_id=rec.video_id, tid=tid)
    return ann


def _require(obj, key, path, kind=None):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"{path}.{key}: missing")
    val = obj[key]
    if kind is not None and (not isinstance(val, kind) or (isinstance(val, bool) and kind is not bool)):
        raise SchemaError(f"{path}.{key}: expected {getattr(kind, '__name__', kind)}")
    return val


def parse_annotation(doc: dict, where: str = "$") -> SceneRecord:
    vid = _require(doc, "video_id", where, str)
    fps = _require(doc, "fps", where, (int, float))
    t_len = _require(doc, "frame_count", where, int)
    if t_len < 1:
        raise SchemaError(f"{where}.frame_count: must be positive")
    objects = []
    cats = {}
    for i, o in enumerate(_require(doc, "subject/objects", where, list)):
        p = f"{where}.subject/objects[{i}]"
        tid = _require(o, "tid", p, int)
        cat = _require(o, "category", p, str)
        if tid in cats:
            raise SchemaError(f"{p}.tid: duplicate tid {tid}")
        cats[tid] = cat
        objects.append({"tid": tid, "category": cat})
    traj = _require(doc, "trajectories", where, list)
    if len(traj) != t_len:
        raise SchemaError(f"{where}.trajectories: {len(traj)} frames, frame_count is {t_len}")
    frames_of: dict[int, list[tuple[int, list[float]]]] = {}
    for f, boxes in enumerate(traj):
        if not isinstance(boxes, list):
            raise SchemaError(f"{where}.trajectories[{f}]: expected list")
        for j, b in enumerate(boxes):
            p = f"{where}.trajectories[{f}][{j}]"
            tid = _require(b, "tid", p, int)
            if tid not in cats:
                raise SchemaError(f"{p}.tid: unknown tid {tid}")
            bbox = _require(b, "bbox", p, dict)
            coords = [float(_require(bbox, k, f"{p}.bbox", (int, float))) for k in ("xmin", "ymin", "xmax", "ymax")]
            frames_of.setdefault(tid, []).append((f, coords))
    tracks = {}
    for tid in cats:
        rows = frames_of.get(tid)
        if not rows:
            raise SchemaError(f"{where}.trajectories: tid {tid} has no boxes")
        fids = [f for f, _ in rows]
        if fids != list(range(fids[0], fids[0] + len(fids))):
            raise SchemaError(f"{where}.trajectories: tid {tid} is not contiguous in time")
        tracks[tid] = (fids[0], np.array([c for _, c in rows], dtype=np.float64))
    relations = []
    for i, r in enumerate(_require(doc, "relation_instances", where, list)):
        p = f"{where}.relation_instances[{i}]"
        rel = {"subject_tid": _require(r, "subject_tid", p, int), "object_tid": _require(r, "object_tid", p, int),
               "predicate": _require(r, "predicate", p, str),
               "begin_fid": _require(r, "begin_fid", p, int), "end_fid": _require(r, "end_fid", p, int)}
        for k in ("subject_tid", "object_tid"):
            if rel[k] not in cats:
                raise SchemaError(f"{p}.{k}: unknown tid {rel[k]}")
        if not 0 <= rel["begin_fid"] < rel["end_fid"] <= t_len:
            raise SchemaError(f"{p}: fid range [{rel['begin_fid']}, {rel['end_fid']}) outside [0, {t_len}]")
        relations.append(rel)
    return SceneRecord(vid, t_len, fps, objects, tracks, relations)


def load_annotations(path: str | os.PathLike, features: bool = True) -> list[SceneRecord]:
    """Parse one annotation file (an object or a list of objects).

    Feature matrices saved alongside by :func:`save_scene` are attached when
    present and ``features`` is true.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"$: invalid JSON ({exc})") from exc
    docs = doc if isinstance(doc, list) else [doc]
    out = []
    for i, d in enumerate(docs):
        rec = parse_annotation(d, "$" if not isinstance(doc, list) else f"$[{i}]")
        if features:
            _attach_features(rec, path.parent)
        out.append(rec)
    return out


def _attach_features(rec: SceneRecord, folder: Path) -> None:
    fpath = folder / "frames.f32"
    if fpath.exists():
        rec.frames, _ = load_matrix(fpath)
    app = {}
    for tid, (_, boxes) in rec.tracks.items():
        apath = folder / f"appearance_{tid}.f32"
        if apath.exists():
            feat, _ = load_matrix(apath)
            if len(feat) != len(boxes):
                raise SchemaError(f"{apath}: {len(feat)} rows, tracklet {tid} has {len(boxes)} frames")
            app[tid] = feat
    if app:
        rec.appearance = app


# ---------------------------------------------------------------- manifest

def write_manifest(path: str | os.PathLike, splits: Mapping[str, Sequence[str]], vocab: Vocab,
                   synth: SynthConfig | None = None) -> None:
    doc = {"splits": {k: list(v) for k, v in splits.items()}, "vocab": vocab.to_dict()}
    if synth is not None:
        doc["synth"] = asdict(synth)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")


@dataclass
class Manifest:
    root: Path
    splits: dict[str, list[str]]
    vocab: Vocab
    synth: dict | None = None

    def records(self, split: str, features: bool = True) -> list[SceneRecord]:
        if split not in self.splits:
            raise SchemaError(f"$.splits: no split named {split!r}")
        out = []
        for rel in self.splits[split]:
            out.extend(load_annotations(self.root / rel, features=features))
        return out


def read_manifest(path: str | os.PathLike) -> Manifest:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    splits = _require(doc, "splits", "$", dict)
    vocab = Vocab.from_dict(_require(doc, "vocab", "$", dict))
    return Manifest(path.parent, {k: list(v) for k, v in splits.items()}, vocab, doc.get("synth"))


# ---------------------------------------------------------------- predictions

def prediction_json(preds: Mapping[str, Sequence[RelationTriplet]], vocab: Vocab) -> dict:
    doc = {}
    for vid, triplets in preds.items():
        rows = []
        for t in sorted(triplets, key=lambda t: -t.score):
            rows.append({
                "triplet": [vocab.entities[t.subject.category], vocab.predicates[t.predicate_category],
                            vocab.entities[t.object.category]],
                "score": round(float(t.score), SCORE_DECIMALS),
                "duration": [t.subject.start_fid, t.subject.end_fid],
                "sub_traj": t.subject.boxes.tolist(),
                "obj_traj": t.object.boxes.tolist(),
            })
        doc[vid] = rows
    return doc


def save_predictions(preds: Mapping[str, Sequence[RelationTriplet]], path: str | os.PathLike, vocab: Vocab) -> None:
    Path(path).write_text(json.dumps(prediction_json(preds, vocab), sort_keys=True), encoding="utf-8")


def validate_prediction_doc(doc) -> None:
    if not isinstance(doc, dict):
        raise SchemaError("$: expected an object keyed by video id")
    for vid, rows in doc.items():
        if not isinstance(rows, list):
            raise SchemaError(f"$.{vid}: expected list")
        for i, r in enumerate(rows):
            p = f"$.{vid}[{i}]"
            trip = _require(r, "triplet", p, list)
            if len(trip) != 3 or not all(isinstance(x, str) for x in trip):
                raise SchemaError(f"{p}.triplet: expected three category names")
            _require(r, "score", p, (int, float))
            dur = _require(r, "duration", p, list)
            if len(dur) != 2 or not all(isinstance(x, int) for x in dur) or not 0 <= dur[0] < dur[1]:
                raise SchemaError(f"{p}.duration: expected [begin_fid, end_fid) with begin < end")
            for k in ("sub_traj", "obj_traj"):
                traj = _require(r, k, p, list)
                if len(traj) != dur[1] - dur[0] or any(len(b) != 4 for b in traj):
                    raise SchemaError(f"{p}.{k}: expected {dur[1] - dur[0]} boxes of 4 coordinates")


def load_predictions(path: str | os.PathLike, vocab: Vocab,
                     frame_counts: Mapping[str, int] | None = None) -> dict[str, list[RelationTriplet]]:
    """Read a prediction file back into triplets (tracklet ids are not stored and come back as -1/-2)."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    validate_prediction_doc(doc)
    out = {}
    for vid, rows in doc.items():
        triplets = []
        for r in rows:
            b, e = r["duration"]
            t_len = frame_counts[vid] if frame_counts and vid in frame_counts else e
            s_cat, p_cat, o_cat = r["triplet"]
            subj = Tracklet(-1, vocab.entity_index(s_cat), b, np.array(r["sub_traj"]), t_len)
            obj = Tracklet(-2, vocab.entity_index(o_cat), b, np.array(r["obj_traj"]), t_len)
            triplets.append(RelationTriplet(subj, vocab.predicate_index(p_cat), obj,
                                            TimeSlot.from_frames(b, e, t_len), float(r["score"])))
        out[vid] = triplets
    return out


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], manifest: dict) -> None:
    """Named float64 tensors concatenated into ``<stem>.bin``; names, shapes, offsets and config in ``path``."""
    path = Path(path)
    blob = bytearray()
    entries = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": len(blob)})
        blob.extend(arr.tobytes())
    bin_path = path.with_suffix(".bin")
    bin_path.write_bytes(bytes(blob))
    doc = {**manifest, "blob": bin_path.name, "tensors": entries}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")


def load_checkpoint(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    blob = (path.parent / doc["blob"]).read_bytes()
    tensors = {}
    for ent in doc["tensors"]:
        shape = tuple(ent["shape"])
        count = math.prod(shape)
        if ent["offset"] + 8 * count > len(blob):
            raise SchemaError(f"{path}: tensor {ent['name']!r} runs past the end of {doc['blob']}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=ent["offset"]) if count else np.zeros(0)
        tensors[ent["name"]] = arr.reshape(shape).astype(np.float64)
    return doc, tensors


# ---------------------------------------------------------------- statistics

@dataclass
class MultiInstanceStats:
    samples: int
    single: float
    double: float
    triple_plus: float
    multi_share: float
    occupied_bins: int
    collided_bins: int
    bins: int

    @property
    def collision_share(self) -> float:
        return self.collided_bins / self.occupied_bins if self.occupied_bins else 0.0

    def to_dict(self) -> dict:
        return {**asdict(self), "collision_share": self.collision_share}


def multi_instance_stats(graphs: Iterable[TemporalBipartiteGraph], bins: int) -> MultiInstanceStats:
    """Instance-count distribution of predicate nodes and bin collisions among multi-instance nodes.

    A bin collides when two or more instance centers of one node fall into it.
    """
    counts = Counter()
    occupied = collided = 0
    for g in graphs:
        for p in g.predicates:
            k = p.num_instances
            counts[min(k, 3)] += 1
            if k < 2:
                continue
            per_bin = Counter(min(int(math.floor(s.center * bins)), bins - 1) for s in p.time_slots)
            occupied += len(per_bin)
            collided += sum(1 for c in per_bin.values() if c >= 2)
    total = sum(counts.values())

    def share(k):
        return counts[k] / total if total else 0.0

    return MultiInstanceStats(total, share(1), share(2), share(3), share(2) + share(3),
                              occupied, collided, bins)
