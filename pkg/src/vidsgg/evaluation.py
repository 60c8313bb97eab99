"""Relation detection / tagging metrics for video scene graphs.

Predictions and ground truth are lists of :class:`RelationTriplet` per video.
A prediction hits a ground-truth instance when the category triplet matches
and both subject and object tracklets reach the vIoU threshold.
"""
from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .graph import RelationTriplet, TimeSlot, Tracklet

VIOU_THRESH = 0.5
RECALL_KS = (50, 100)
PRECISION_KS = (1, 5, 10)
FRACTION_KS = (50, 100, 150)


def _mean(values) -> float:
    """Correctly rounded mean, independent of summation order."""
    values = list(values)
    return math.fsum(values) / len(values) if values else 0.0


def _areas(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def viou(a: Tracklet, b: Tracklet) -> float:
    """Volume IoU: per-frame box intersections over per-frame unions, summed over time."""
    area_a, area_b = _areas(a.boxes), _areas(b.boxes)
    lo, hi = max(a.start_fid, b.start_fid), min(a.end_fid, b.end_fid)
    inter = 0.0
    if lo < hi:
        ba = a.boxes[lo - a.start_fid:hi - a.start_fid]
        bb = b.boxes[lo - b.start_fid:hi - b.start_fid]
        w = np.clip(np.minimum(ba[:, 2], bb[:, 2]) - np.maximum(ba[:, 0], bb[:, 0]), 0, None)
        h = np.clip(np.minimum(ba[:, 3], bb[:, 3]) - np.maximum(ba[:, 1], bb[:, 1]), 0, None)
        inter = float((w * h).sum())
    union = float(area_a.sum() + area_b.sum()) - inter
    return inter / union if union > 0 else 0.0


def tiou(a: TimeSlot, b: TimeSlot) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def rank(preds: Sequence[RelationTriplet]) -> list[RelationTriplet]:
    """Descending score; equal scores keep insertion order."""
    return sorted(preds, key=lambda t: -t.score)


def greedy_match(preds: Sequence[RelationTriplet], gts: Sequence[RelationTriplet],
                 thresh: float = VIOU_THRESH) -> tuple[np.ndarray, np.ndarray]:
    """Walk predictions in the given order and claim the best free ground truth.

    Among eligible ground truths the one with the largest ``min(subject vIoU,
    object vIoU)`` wins, lowest index on ties.

    Returns:
        ``hits`` (bool per prediction) and ``gt_hit`` (claiming prediction
        index per ground truth, -1 if missed).
    """
    by_cats: dict[tuple, list[int]] = defaultdict(list)
    for g, t in enumerate(gts):
        by_cats[t.categories].append(g)
    hits = np.zeros(len(preds), dtype=bool)
    gt_hit = np.full(len(gts), -1, dtype=np.int64)
    for i, p in enumerate(preds):
        best, best_ov = -1, -1.0
        for g in by_cats.get(p.categories, ()):
            if gt_hit[g] >= 0:
                continue
            ov = min(viou(p.subject, gts[g].subject), viou(p.object, gts[g].object))
            if ov >= thresh and ov > best_ov:
                best, best_ov = g, ov
        if best >= 0:
            hits[i] = True
            gt_hit[best] = i
    return hits, gt_hit


def average_precision(hits: np.ndarray, num_gt: int) -> float:
    """Precision at each hit rank, summed and divided by the ground-truth count."""
    if num_gt == 0:
        return 0.0
    ranks = np.flatnonzero(hits) + 1
    return math.fsum((np.arange(1, len(ranks) + 1) / ranks).tolist()) / num_gt


def _videos(gts: Mapping[str, Sequence]) -> list[str]:
    return [v for v in gts if len(gts[v]) > 0]


def reldet(preds: Mapping[str, Sequence[RelationTriplet]], gts: Mapping[str, Sequence[RelationTriplet]],
           ks: Sequence[int] = RECALL_KS, thresh: float = VIOU_THRESH) -> tuple[float, dict[int, float], dict]:
    """mAP and Recall@K averaged over videos that have ground truth.

    Returns:
        ``(mAP, {K: recall}, per_video)`` with per-video ``{"ap", "recall@K"}``.
    """
    per_video = {}
    for vid in _videos(gts):
        ranked = rank(preds.get(vid, []))
        hits, _ = greedy_match(ranked, gts[vid], thresh)
        n = len(gts[vid])
        row = {"ap": average_precision(hits, n)}
        for k in ks:
            row[f"recall@{k}"] = int(hits[:k].sum()) / n
        per_video[vid] = row
    if not per_video:
        return 0.0, {k: 0.0 for k in ks}, per_video
    m_ap = _mean(r["ap"] for r in per_video.values())
    recall = {k: _mean(r[f"recall@{k}"] for r in per_video.values()) for k in ks}
    return m_ap, recall, per_video


def reltag(preds: Mapping[str, Sequence[RelationTriplet]], gts: Mapping[str, Sequence[RelationTriplet]],
           ks: Sequence[int] = PRECISION_KS) -> tuple[dict[int, float], dict]:
    """Precision@K of unique category triplets, ignoring localization."""
    per_video = {}
    for vid in _videos(gts):
        truth = {t.categories for t in gts[vid]}
        unique: list[tuple] = []
        seen = set()
        for t in rank(preds.get(vid, [])):
            if t.categories not in seen:
                seen.add(t.categories)
                unique.append(t.categories)
        per_video[vid] = {f"precision@{k}": sum(c in truth for c in unique[:k]) / k for k in ks}
    if not per_video:
        return {k: 0.0 for k in ks}, per_video
    return {k: _mean(r[f"precision@{k}"] for r in per_video.values()) for k in ks}, per_video


def fraction_recall(preds: Mapping[str, Sequence[RelationTriplet]], gts: Mapping[str, Sequence[RelationTriplet]],
                    ks: Sequence[int] = FRACTION_KS, thresh: float = VIOU_THRESH) -> tuple[dict[int, float], dict[int, float]]:
    """Per-sample hit fraction, averaged separately over single- and multi-instance samples.

    A sample is every ground-truth instance sharing (subject tracklet, object
    tracklet, predicate).  Means are pooled over all samples of all videos.
    """
    fr_single: dict[int, list[float]] = {k: [] for k in ks}
    fr_multi: dict[int, list[float]] = {k: [] for k in ks}
    for vid in _videos(gts):
        samples: dict[tuple, list[int]] = defaultdict(list)
        for g, t in enumerate(gts[vid]):
            samples[(t.subject.id, t.object.id, t.predicate_category)].append(g)
        ranked = rank(preds.get(vid, []))
        for k in ks:
            _, gt_hit = greedy_match(ranked[:k], gts[vid], thresh)
            for members in samples.values():
                frac = int((gt_hit[members] >= 0).sum()) / len(members)
                (fr_single if len(members) == 1 else fr_multi)[k].append(frac)
    single = {k: _mean(v) for k, v in fr_single.items()}
    multi = {k: _mean(v) for k, v in fr_multi.items()}
    return single, multi


@dataclass
class EvalReport:
    aggregate: dict[str, float]
    per_video: dict[str, dict[str, float]]
    counts: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"aggregate": self.aggregate, "per_video": self.per_video,
                           "counts": self.counts}, indent=2, sort_keys=True)

    def to_table(self) -> str:
        """Plain-text table: RelDet | RelTag | fraction recall columns."""
        cols = (["mAP", "R@50", "R@100"], ["P@1", "P@5", "P@10"],
                ["fR_S@50", "fR_S@100", "fR_S@150"], ["fR_M@50", "fR_M@100", "fR_M@150"])
        groups = ("RelDet", "RelTag", "fR_S", "fR_M")
        widths = [max(9 * len(c), len(g)) for c, g in zip(cols, groups)]
        head1 = " | ".join(g.center(w) for g, w in zip(groups, widths))
        head2 = " | ".join("".join(n.rjust(9) for n in c).rjust(w) for c, w in zip(cols, widths))
        vals = " | ".join("".join(f"{100 * self.aggregate[n]:9.2f}" for n in c).rjust(w) for c, w in zip(cols, widths))
        rule = "-" * len(head2)
        counts = ", ".join(f"{k}={v}" for k, v in self.counts.items())
        return "\n".join([head1, head2, rule, vals, rule, counts]) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = sorted({k for row in self.per_video.values() for k in row})
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["video_id", *names])
        for vid in sorted(self.per_video):
            writer.writerow([vid, *(f"{self.per_video[vid].get(n, 0.0):.6f}" for n in names)])
        return buf.getvalue()


def evaluate(preds: Mapping[str, Sequence[RelationTriplet]], gts: Mapping[str, Sequence[RelationTriplet]],
             thresh: float = VIOU_THRESH) -> EvalReport:
    m_ap, recall, det_rows = reldet(preds, gts, thresh=thresh)
    precision, tag_rows = reltag(preds, gts)
    fr_s, fr_m = fraction_recall(preds, gts, thresh=thresh)
    agg = {"mAP": m_ap}
    agg.update({f"R@{k}": v for k, v in recall.items()})
    agg.update({f"P@{k}": v for k, v in precision.items()})
    agg.update({f"fR_S@{k}": v for k, v in fr_s.items()})
    agg.update({f"fR_M@{k}": v for k, v in fr_m.items()})
    per_video = {vid: {**det_rows[vid], **tag_rows[vid]} for vid in det_rows}
    hits = 0
    for vid in det_rows:
        h, _ = greedy_match(rank(preds.get(vid, [])), gts[vid], thresh)
        hits += int(h.sum())
    counts = {"videos": len(det_rows),
              "gt": int(sum(len(gts[v]) for v in gts)),
              "predictions": int(sum(len(preds.get(v, [])) for v in gts)),
              "hits": hits}
    return EvalReport(agg, per_video, counts)
