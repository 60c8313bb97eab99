"""Training loops for both stages and the end-to-end inference path."""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .classifier import (ClassifierConfig, RelationClassifier, SceneInput, build_prior, top_candidates)
from .data_io import SceneRecord, SchemaError, Vocab, load_checkpoint, save_checkpoint, to_graph
from .features import spatial_feature
from .graph import RelationTriplet, TemporalBipartiteGraph, Tracklet
from .grounding import (GroundingConfig, GroundingModel, assign_bins, bin_targets, decode_slots,
                        grounding_loss, infer_pipeline, vidvrd_mode)
from .matching import LAMBDA_ATT, GtTargets, assign_gt_entities, gt_targets, stage_loss

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int
    lr: float
    batch_size: int
    milestones: tuple[int, ...] = ()
    gamma: float = 0.2
    seed: int = 0
    lam: float = LAMBDA_ATT
    grad_clip: float | None = 1.0

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch under step decay."""
        return self.lr * self.gamma ** sum(epoch >= m for m in self.milestones)


# Classification: 5e-5 for 50 epochs, then 1e-5; grounding: 5e-5 decayed 5x at epochs 40 and 60.
CLS_DEFAULTS = dict(epochs=60, lr=5e-5, batch_size=4, milestones=(50,), gamma=0.2)
GRD_DEFAULTS = dict(epochs=70, lr=5e-5, batch_size=8, milestones=(40, 60), gamma=0.2)


def scene_input(entities: Sequence[Tracklet], appearance: Sequence[np.ndarray]) -> SceneInput:
    return SceneInput(
        [torch.as_tensor(np.asarray(a, dtype=np.float64)) for a in appearance],
        [torch.as_tensor(spatial_feature(e.boxes)) for e in entities],
        torch.as_tensor([e.category for e in entities], dtype=torch.long),
    )


@dataclass
class ClsExample:
    video_id: str
    entities: list[Tracklet]
    inputs: SceneInput
    targets: GtTargets
    graph: TemporalBipartiteGraph


def cls_examples(records: Sequence[SceneRecord], vocab: Vocab) -> list[ClsExample]:
    """Ground-truth tracklets stand in for detections."""
    out = []
    for rec in records:
        if rec.appearance is None:
            raise ValueError(f"{rec.video_id}: appearance features missing")
        graph = to_graph(rec, vocab)
        detected = list(graph.entities)
        emap = assign_gt_entities(detected, graph.entities)
        inputs = scene_input(detected, [rec.appearance[e.id] for e in detected])
        out.append(ClsExample(rec.video_id, detected, inputs, gt_targets(graph, emap), graph))
    return out


@dataclass
class GrdExample:
    video_id: str
    frames: torch.Tensor  # (T, d_v)
    cats: torch.Tensor  # (q, 3)
    overlaps: torch.Tensor  # (q, 2)
    slots: list[list]  # per query, its ground-truth slots


def grd_examples(records: Sequence[SceneRecord], vocab: Vocab) -> list[GrdExample]:
    """One query per ground-truth predicate node whose subject and object overlap."""
    out = []
    for rec in records:
        if rec.frames is None:
            raise ValueError(f"{rec.video_id}: frame features missing")
        g = to_graph(rec, vocab)
        cats, overlaps, slots = [], [], []
        for p in g.predicates:
            s, o = g.entities[p.subject_idx], g.entities[p.object_idx]
            ov = s.time_slot.intersect(o.time_slot)
            if ov is None:
                continue
            cats.append([s.category, p.category, o.category])
            overlaps.append(list(ov))
            slots.append(list(p.time_slots))
        if cats:
            out.append(GrdExample(rec.video_id, torch.as_tensor(rec.frames, dtype=torch.float64),
                                  torch.as_tensor(cats, dtype=torch.long),
                                  torch.as_tensor(overlaps, dtype=torch.float64), slots))
    return out


def cls_loss(model: RelationClassifier, ex: ClsExample, lam: float = LAMBDA_ATT) -> torch.Tensor:
    out = model(ex.inputs)
    loss, _ = stage_loss(out.probs, out.attention, ex.targets, lam)
    return loss


def grd_loss(model: GroundingModel, ex: GrdExample) -> torch.Tensor:
    head = model(ex.frames, ex.cats, ex.overlaps)
    bt = bin_targets([assign_bins(s, model.cfg.bins) for s in ex.slots], len(ex.frames))
    return grounding_loss(head, bt)


def fit(model: torch.nn.Module, examples: Sequence, loss_fn: Callable, cfg: TrainConfig,
        on_epoch: Callable[[int, float], None] | None = None) -> list[float]:
    """Adam with step decay; returns the mean loss of every epoch."""
    if not examples:
        raise ValueError("no training examples")
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history = []
    model.train()
    for epoch in range(cfg.epochs):
        for group in opt.param_groups:
            group["lr"] = cfg.lr_at(epoch)
        order = rng.permutation(len(examples))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [examples[i] for i in order[start:start + cfg.batch_size]]
            opt.zero_grad()
            loss = sum(loss_fn(model, ex) for ex in batch) / len(batch)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}, batch starting {start}")
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            total += loss.item() * len(batch)
        history.append(total / len(examples))
        log.info("epoch %d loss %.6f", epoch + 1, history[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, history[-1])
    model.eval()
    return history


def train_classifier(records: Sequence[SceneRecord], vocab: Vocab, model_cfg: ClassifierConfig,
                     train_cfg: TrainConfig, out_dir: str | os.PathLike | None = None) -> tuple[RelationClassifier, list[float]]:
    examples = cls_examples(records, vocab)
    prior = build_prior((ex.graph for ex in examples), model_cfg.num_entity_classes, model_cfg.num_predicate_classes)
    model = RelationClassifier(model_cfg, prior)
    torch.manual_seed(train_cfg.seed)
    writer = _EpochWriter(out_dir, "cls", model, vocab, train_cfg) if out_dir else None
    history = fit(model, examples, lambda m, ex: cls_loss(m, ex, train_cfg.lam), train_cfg, writer)
    return model, history


def train_grounding(records: Sequence[SceneRecord], vocab: Vocab, model_cfg: GroundingConfig,
                    train_cfg: TrainConfig, out_dir: str | os.PathLike | None = None) -> tuple[GroundingModel, list[float]]:
    examples = grd_examples(records, vocab)
    model = GroundingModel(model_cfg)
    torch.manual_seed(train_cfg.seed)
    writer = _EpochWriter(out_dir, "grd", model, vocab, train_cfg) if out_dir else None
    history = fit(model, examples, grd_loss, train_cfg, writer)
    return model, history


class _EpochWriter:
    """Appends the loss CSV and rewrites the checkpoint after every epoch."""

    def __init__(self, out_dir, stage: str, model, vocab: Vocab, train_cfg: TrainConfig):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.stage, self.model, self.vocab, self.train_cfg = stage, model, vocab, train_cfg
        self.csv = self.dir / f"{stage}_loss.csv"
        with open(self.csv, "w", newline="") as fh:
            csv.writer(fh).writerow(["epoch", "lr", "loss"])

    def __call__(self, epoch: int, loss: float) -> None:
        with open(self.csv, "a", newline="") as fh:
            csv.writer(fh).writerow([epoch, f"{self.train_cfg.lr_at(epoch - 1):.6g}", f"{loss:.10f}"])
        save_model(self.dir / f"{self.stage}.json", self.model, self.vocab, epoch=epoch)


def save_model(path: str | os.PathLike, model: torch.nn.Module, vocab: Vocab, **extra) -> None:
    kind = "classifier" if isinstance(model, RelationClassifier) else "grounding"
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    save_checkpoint(path, tensors, {"kind": kind, "config": model.cfg.to_dict(), "vocab": vocab.to_dict(), **extra})


def load_model(path: str | os.PathLike):
    doc, tensors = load_checkpoint(path)
    if doc["kind"] == "classifier":
        model = RelationClassifier(ClassifierConfig(**doc["config"]))
    elif doc["kind"] == "grounding":
        model = GroundingModel(GroundingConfig(**doc["config"]))
    else:
        raise SchemaError(f"unknown checkpoint kind {doc['kind']!r}")
    model.load_state_dict({k: torch.as_tensor(v) for k, v in tensors.items()})
    model.eval()
    return model, Vocab.from_dict(doc["vocab"])


@torch.no_grad()
def infer_scene(cls_model: RelationClassifier, rec: SceneRecord, vocab: Vocab,
                grd_model: GroundingModel | None = None, k_keep: int = 3,
                score_floor: float = 0.2, nms_thresh: float = 0.8) -> list[RelationTriplet]:
    """Classification, then grounding (or overlap slots only when ``grd_model`` is None)."""
    entities = rec.tracklets(vocab)
    out = cls_model(scene_input(entities, [rec.appearance[e.id] for e in entities]))
    candidates = top_candidates(out, k_keep, entities)
    if grd_model is None or not candidates:
        return vidvrd_mode(entities, candidates)
    grounded = ground_candidates(grd_model, rec, entities, candidates)
    return infer_pipeline(entities, candidates, grounded, score_floor, nms_thresh)


@torch.no_grad()
def ground_candidates(grd_model: GroundingModel, rec: SceneRecord, entities: Sequence[Tracklet], candidates) -> list:
    cats, overlaps = [], []
    for c in candidates:
        s, o = entities[c.subject_idx], entities[c.object_idx]
        cats.append([s.category, c.category, o.category])
        overlaps.append(list(s.time_slot.intersect(o.time_slot)))
    head = grd_model(torch.as_tensor(rec.frames, dtype=torch.float64),
                     torch.as_tensor(cats, dtype=torch.long), torch.as_tensor(overlaps, dtype=torch.float64))
    return [decode_slots(head[i]) for i in range(len(candidates))]


def infer(cls_model, records: Sequence[SceneRecord], vocab: Vocab, grd_model=None, **kw) -> dict[str, list[RelationTriplet]]:
    cls_model.eval()
    if grd_model is not None:
        grd_model.eval()
    return {rec.video_id: infer_scene(cls_model, rec, vocab, grd_model, **kw) for rec in records}
