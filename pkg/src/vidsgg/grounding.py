"""Grounding stage: localize each classified relation in time.

A relation ``(subject, predicate, object)`` acts as a three-token language
query over frame features.  The head predicts, for each of ``K`` bins that
split the normalized video length, a per-frame foreground score, a
``(start, end)`` regression and a confidence.  At inference the bins are
decoded, the subject/object overlap slot is added and temporal NMS keeps the
final instances.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .classifier import Candidate
from .evaluation import tiou
from .graph import RelationTriplet, TimeSlot, Tracklet
from .layers import MLP, EncoderLayer, seeded_unit_vectors, sinusoidal_positions

SCORE_FLOOR = 0.2
NMS_THRESH = 0.8
DEFAULT_BINS = 10
LOG_CLAMP = 1e-12


@dataclass
class GroundingConfig:
    num_entity_classes: int
    num_predicate_classes: int
    d_v: int = 1024
    d_w: int = 300
    d: int = 256
    d_hidden: int = 512
    bins: int = DEFAULT_BINS
    heads: int = 4
    positions: bool = True
    context_layers: int = 1
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class HeadOutput:
    """Per-frame head outputs; a leading query axis is allowed."""

    cls: torch.Tensor  # (..., T, K) in (0, 1)
    reg: torch.Tensor  # (..., T, 2K) absolute normalized (start, end) per bin
    conf: torch.Tensor  # (..., T, K) in (0, 1)

    def __getitem__(self, i) -> "HeadOutput":
        return HeadOutput(self.cls[i], self.reg[i], self.conf[i])


@dataclass(frozen=True)
class GroundedSlot:
    slot: TimeSlot
    score: float
    bin: int


def _head(d: int, out: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv1d(d, d, 3, padding=1), nn.ReLU(), nn.Conv1d(d, out, 1))


class GroundingModel(nn.Module):
    def __init__(self, cfg: GroundingConfig):
        super().__init__()
        self.cfg = cfg
        d, k = cfg.d, cfg.bins
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.mlp_w = MLP(cfg.d_w, cfg.d_hidden, cfg.d_w)
            self.mlp_t = MLP(2, cfg.d_hidden, cfg.d_w)
            self.frame_proj = nn.Linear(cfg.d_v, d)
            self.frame_enc = EncoderLayer(d, cfg.heads, cfg.d_hidden)
            self.query_proj = nn.Linear(cfg.d_w, d)
            self.query_enc = EncoderLayer(d, cfg.heads, cfg.d_hidden)
            self.cross_q = nn.Linear(d, d)
            self.cross_k = nn.Linear(d, d)
            self.cross_v = nn.Linear(d, d)
            self.fuse_proj = nn.Linear(3 * d, d)
            self.context = nn.ModuleList(EncoderLayer(d, cfg.heads, cfg.d_hidden) for _ in range(cfg.context_layers))
            self.cls_head = _head(d, k)
            self.reg_head = _head(d, 2 * k)
            self.conf_head = _head(d, k)
        self.register_buffer("entity_embeddings", seeded_unit_vectors(cfg.num_entity_classes, cfg.d_w, cfg.seed + 1))
        self.register_buffer("predicate_embeddings",
                             seeded_unit_vectors(cfg.num_predicate_classes, cfg.d_w, cfg.seed + 2))
        self.double()

    def query_feature(self, cats: torch.Tensor, overlaps: torch.Tensor) -> torch.Tensor:
        """``MLP_w(S) + MLP_t([s, e])`` for ``cats (q, 3)`` and ``overlaps (q, 2)`` -> ``(q, 3, d_w)``."""
        tokens = torch.stack([self.entity_embeddings[cats[:, 0]],
                              self.predicate_embeddings[cats[:, 1]],
                              self.entity_embeddings[cats[:, 2]]], dim=1)
        return self.mlp_w(tokens) + self.mlp_t(overlaps)[:, None, :]

    def fuse(self, frames: torch.Tensor, query: torch.Tensor) -> torch.Tensor:
        """Frame stream attends over each query's tokens -> ``(q, T, d)``."""
        x = self.frame_proj(frames)
        if self.cfg.positions:
            x = x + sinusoidal_positions(len(frames), self.cfg.d, x.dtype)
        x = self.frame_enc(x)
        s = self.query_enc(self.query_proj(query))
        att = torch.softmax(self.cross_q(x) @ self.cross_k(s).transpose(-1, -2) / math.sqrt(self.cfg.d), dim=-1)
        c = att @ self.cross_v(s)
        x = x.expand_as(c)
        return torch.relu(self.fuse_proj(torch.cat([x, c, x * c], dim=-1)))

    def head(self, fused: torch.Tensor) -> HeadOutput:
        t = fused.shape[-2]
        h = fused.transpose(-1, -2)
        cls = torch.sigmoid(self.cls_head(h)).transpose(-1, -2)
        conf = torch.sigmoid(self.conf_head(h)).transpose(-1, -2)
        # distances to the boundaries, anchored at each frame center
        dist = torch.sigmoid(self.reg_head(h)).transpose(-1, -2)
        center = (torch.arange(t, dtype=fused.dtype) + 0.5)[:, None] / t
        reg = torch.empty_like(dist)
        reg[..., 0::2] = center - dist[..., 0::2]
        reg[..., 1::2] = center + dist[..., 1::2]
        return HeadOutput(cls, reg, conf)

    def forward(self, frames: torch.Tensor, cats: torch.Tensor, overlaps: torch.Tensor) -> HeadOutput:
        if frames.ndim != 2 or len(frames) < 1:
            raise ValueError("frame features must be (T >= 1, d_v)")
        return self.head(self.temporal_context(self.fuse(frames, self.query_feature(cats, overlaps))))

    def temporal_context(self, fused: torch.Tensor) -> torch.Tensor:
        """Self-attention over each query's fused frames, so every frame sees the query's whole response."""
        for layer in self.context:
            fused = layer(fused)
        return fused


def query_feature(cats, overlap: TimeSlot, model: GroundingModel) -> torch.Tensor:
    cats = torch.as_tensor([list(cats)], dtype=torch.long)
    return model.query_feature(cats, torch.tensor([list(overlap)], dtype=torch.float64))[0]


def multimodal_fuse(frames: torch.Tensor, query: torch.Tensor, model: GroundingModel) -> torch.Tensor:
    return model.fuse(frames, query[None])[0]


def assign_bins(gt_slots: Sequence[TimeSlot], k: int) -> list[TimeSlot | None]:
    """Give each bin the target slot whose center falls in it; the longest wins collisions."""
    if k < 1:
        raise ValueError("need at least one bin")
    out: list[TimeSlot | None] = [None] * k
    for slot in gt_slots:
        slot = TimeSlot(*slot)
        b = min(int(math.floor(slot.center * k)), k - 1)
        if out[b] is None or slot.length > out[b].length:
            out[b] = slot
    return out


def bin_of(slot: TimeSlot, k: int) -> int:
    return min(int(math.floor(TimeSlot(*slot).center * k)), k - 1)


@dataclass
class BinTargets:
    positive: torch.Tensor  # (q, T, K) frame inside the bin's target
    bounds: torch.Tensor  # (q, K, 2)
    has_target: torch.Tensor  # (q, K)


def bin_targets(targets: Sequence[Sequence[TimeSlot | None]], frame_count: int) -> BinTargets:
    q, k = len(targets), len(targets[0]) if targets else 0
    centers = (np.arange(frame_count) + 0.5) / frame_count
    pos = np.zeros((q, frame_count, k))
    bounds = np.zeros((q, k, 2))
    has = np.zeros((q, k))
    for i, bins in enumerate(targets):
        for b, slot in enumerate(bins):
            if slot is None:
                continue
            has[i, b] = 1.0
            bounds[i, b] = slot
            pos[i, :, b] = (centers >= slot[0]) & (centers < slot[1])
    return BinTargets(torch.as_tensor(pos), torch.as_tensor(bounds), torch.as_tensor(has))


def _bce(pred, target):
    return -(target * torch.log(torch.clamp(pred, min=LOG_CLAMP))
             + (1.0 - target) * torch.log(torch.clamp(1.0 - pred, min=LOG_CLAMP)))


def confidence_targets(head: HeadOutput, bt: BinTargets) -> torch.Tensor:
    """tIoU between each frame's regressed slot and its bin target, ``(q, T, K)``, detached."""
    with torch.no_grad():
        s, e = head.reg[..., 0::2], head.reg[..., 1::2]
        lo, hi = torch.minimum(s, e), torch.maximum(s, e)
        ts, te = bt.bounds[..., 0][:, None, :], bt.bounds[..., 1][:, None, :]
        inter = torch.clamp(torch.minimum(hi, te) - torch.maximum(lo, ts), min=0.0)
        union = (hi - lo) + (te - ts) - inter
        return torch.where(union > 0, inter / torch.clamp(union, min=LOG_CLAMP), torch.zeros_like(union))


def grounding_loss(head: HeadOutput, bt: BinTargets, conf_target: torch.Tensor | None = None) -> torch.Tensor:
    """Classification + boundary L1 + confidence loss, averaged over bins and queries.

    Bins without a target only contribute the all-negative classification term.
    """
    if conf_target is None:
        conf_target = confidence_targets(head, bt)
    pos = bt.positive
    n_pos = pos.sum(dim=-2)  # (q, K)
    denom = torch.clamp(n_pos, min=1.0)
    cls = _bce(head.cls, pos).mean(dim=-2)
    l1 = (head.reg[..., 0::2] - bt.bounds[..., 0][:, None, :]).abs() \
        + (head.reg[..., 1::2] - bt.bounds[..., 1][:, None, :]).abs()
    reg = (l1 * pos).sum(dim=-2) / denom
    conf = (_bce(head.conf, conf_target) * pos).sum(dim=-2) / denom
    return (cls + reg + conf).mean()


def decode_slots(head: HeadOutput) -> list[GroundedSlot]:
    """Best frame per bin -> one clamped slot scored ``cls * conf``; degenerate slots are dropped."""
    cls = _np(head.cls)
    reg = _np(head.reg)
    conf = _np(head.conf)
    out = []
    for k in range(cls.shape[1]):
        t = int(np.argmax(cls[:, k]))
        s, e = np.clip(reg[t, 2 * k:2 * k + 2], 0.0, 1.0)
        if s > e:
            s, e = e, s
        if e - s <= 0.0:
            continue
        out.append(GroundedSlot(TimeSlot(float(s), float(e)), float(cls[t, k] * conf[t, k]), k))
    return out


def _np(x):
    return x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)


def temporal_nms(slots: Sequence[GroundedSlot], threshold: float = NMS_THRESH) -> list[GroundedSlot]:
    """Greedy NMS: keep by descending score, suppress tIoU above ``threshold`` with any kept slot."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    kept: list[GroundedSlot] = []
    for cand in sorted(slots, key=lambda s: -s.score):
        if all(tiou(cand.slot, k.slot) <= threshold for k in kept):
            kept.append(cand)
    return kept


def snap_to_frames(slot: TimeSlot, frame_count: int, within: TimeSlot) -> TimeSlot | None:
    """Round ``slot`` to whole frames inside ``within``; ``None`` if nothing is left."""
    lo, hi = within.to_frames(frame_count)
    b, e = slot.to_frames(frame_count)
    b, e = max(b, lo), min(e, hi)
    if e <= b:
        return None
    return TimeSlot.from_frames(b, e, frame_count)


def infer_pipeline(entities: Sequence[Tracklet], candidates: Sequence[Candidate],
                   grounded: Sequence[Sequence[GroundedSlot]] | None = None,
                   score_floor: float = SCORE_FLOOR, nms_thresh: float = NMS_THRESH) -> list[RelationTriplet]:
    """Turn classified candidates and their decoded bins into scored triplets.

    Candidates without subject/object overlap are dropped, as are candidates
    whose best grounded score is below ``score_floor``.  The overlap slot is
    added with score 1.0 and temporal NMS selects the surviving instances.
    With ``grounded=None`` only the overlap slot is used.
    """
    out = []
    for c_idx, cand in enumerate(candidates):
        subj, obj = entities[cand.subject_idx], entities[cand.object_idx]
        overlap = subj.time_slot.intersect(obj.time_slot)
        if overlap is None:
            continue
        slots = list(grounded[c_idx]) if grounded is not None else []
        if slots and max(s.score for s in slots) < score_floor:
            continue
        frames = subj.frame_count
        pool = [GroundedSlot(snap_to_frames(overlap, frames, overlap), 1.0, -1)]
        for s in slots:
            snapped = snap_to_frames(s.slot, frames, overlap)
            if snapped is not None:
                pool.append(GroundedSlot(snapped, s.score, s.bin))
        for s in temporal_nms(pool, nms_thresh):
            out.append(RelationTriplet(subj.crop(s.slot), cand.category, obj.crop(s.slot),
                                       s.slot, cand.prob * s.score))
    return sorted(out, key=lambda t: -t.score)


def vidvrd_mode(entities: Sequence[Tracklet], candidates: Sequence[Candidate]) -> list[RelationTriplet]:
    """One triplet per candidate spanning the subject/object overlap."""
    return infer_pipeline(entities, candidates, None)
