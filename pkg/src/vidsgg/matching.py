"""Set-prediction matching for the classification stage.

Ground-truth entities are first mapped to detected tracklets by vIoU, then
predicted predicate nodes are matched one-to-one to ground-truth nodes with
the Hungarian algorithm, and the stage loss is evaluated on that matching.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .evaluation import viou
from .graph import TemporalBipartiteGraph, Tracklet

LAMBDA_ATT = 30.0
LOG_CLAMP = 1e-12
ENTITY_IOU = 0.5


def assign_gt_entities(detected: Sequence[Tracklet], gt: Sequence[Tracklet],
                       thresh: float = ENTITY_IOU) -> list[int | None]:
    """Greedy one-to-one assignment of detections to ground truth.

    Pairs are visited in descending vIoU order; a pair is accepted when both
    sides are free, categories agree and vIoU reaches ``thresh``.

    Returns:
        For each detection, the index of its ground-truth entity or ``None``.
    """
    pairs = []
    for i, d in enumerate(detected):
        for g, t in enumerate(gt):
            if d.category == t.category:
                v = viou(d, t)
                if v >= thresh:
                    pairs.append((-v, i, g))
    pairs.sort()
    out: list[int | None] = [None] * len(detected)
    claimed = set()
    for _, i, g in pairs:
        if out[i] is None and g not in claimed:
            out[i] = g
            claimed.add(g)
    return out


@dataclass
class GtTargets:
    """Ground-truth predicate classes and role adjacency ``(g, 2, n)`` over detections."""

    classes: np.ndarray
    adjacency: np.ndarray

    def padded(self, m: int, background: int) -> tuple[np.ndarray, np.ndarray]:
        """Pad to ``m`` nodes with background rows of all-zero adjacency."""
        g, _, n = self.adjacency.shape
        if g > m:
            raise ValueError(f"{g} ground-truth nodes exceed {m} queries")
        classes = np.full(m, background, dtype=np.int64)
        classes[:g] = self.classes
        adj = np.zeros((m, 2, n))
        adj[:g] = self.adjacency
        return classes, adj


def gt_targets(gt: TemporalBipartiteGraph, entity_map: Sequence[int | None]) -> GtTargets:
    n = len(entity_map)
    inverse = {g: i for i, g in enumerate(entity_map) if g is not None}
    adj = np.zeros((gt.m, 2, n))
    for j, p in enumerate(gt.predicates):
        for r, idx in enumerate((p.subject_idx, p.object_idx)):
            if idx in inverse:
                adj[j, r, inverse[idx]] = 1.0
    return GtTargets(np.array([p.category for p in gt.predicates], dtype=np.int64), adj)


def _bce(target: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    pred_pos = torch.clamp(pred, min=LOG_CLAMP)
    pred_neg = torch.clamp(1.0 - pred, min=LOG_CLAMP)
    return -(target * torch.log(pred_pos) + (1.0 - target) * torch.log(pred_neg))


def match_cost(gt_class: int, gt_adj, probs, attn_row, background: int, lam: float = LAMBDA_ATT) -> float:
    """Cost of pairing one ground-truth node with one predicted node."""
    if gt_class == background:
        return 0.0
    probs = torch.as_tensor(probs, dtype=torch.float64)
    attn_row = torch.as_tensor(attn_row, dtype=torch.float64)
    gt_adj = torch.as_tensor(gt_adj, dtype=torch.float64)
    nll = -torch.log(torch.clamp(probs[gt_class], min=LOG_CLAMP))
    return float(nll + lam * _bce(gt_adj, attn_row).mean())


def cost_matrix(probs: torch.Tensor, attention: torch.Tensor, targets: GtTargets,
                lam: float = LAMBDA_ATT) -> torch.Tensor:
    """``(g, m)`` matching costs of every real ground-truth node vs. every query.

    Background padding rows cost zero everywhere and are left implicit.
    """
    g = len(targets.classes)
    m = probs.shape[0]
    if g == 0:
        return probs.new_zeros((0, m))
    nll = -torch.log(torch.clamp(probs[:, torch.as_tensor(targets.classes)].T, min=LOG_CLAMP))
    pred = attention.permute(1, 0, 2)  # (m, 2, n)
    adj = torch.as_tensor(targets.adjacency, dtype=probs.dtype)  # (g, 2, n)
    bce = _bce(adj[:, None], pred[None]).flatten(2).mean(-1)
    return nll + lam * bce


def hungarian(cost) -> np.ndarray:
    """Minimum-cost permutation for a square cost matrix.

    Shortest-augmenting-path form with dual potentials, O(n^3).

    Returns:
        ``cols`` with ``cols[i]`` the column assigned to row ``i``.
    """
    a = np.asarray(cost, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"cost must be a square matrix, got shape {a.shape}")
    rows, cols = a.shape
    if not np.isfinite(a).all():
        raise ValueError("cost matrix has non-finite entries")
    u = np.zeros(rows + 1)
    v = np.zeros(cols + 1)
    owner = np.zeros(cols + 1, dtype=np.int64)  # 1-based row owning each column, 0 = free
    way = np.zeros(cols + 1, dtype=np.int64)
    for i in range(1, rows + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(cols + 1, np.inf)
        used = np.zeros(cols + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    out = np.empty(rows, dtype=np.int64)
    for j in range(1, cols + 1):
        if owner[j]:
            out[owner[j] - 1] = j - 1
    return out


@dataclass
class MatchResult:
    assignment: np.ndarray  # ground-truth node j -> query index
    costs: np.ndarray  # per matched pair

    @property
    def total(self) -> float:
        return float(self.costs.sum())


def match(probs: torch.Tensor, attention: torch.Tensor, targets: GtTargets, lam: float = LAMBDA_ATT) -> MatchResult:
    with torch.no_grad():
        c = cost_matrix(probs, attention, targets, lam).cpu().numpy()
    g, m = c.shape
    if g == 0:
        return MatchResult(np.zeros(0, dtype=np.int64), np.zeros(0))
    if g > m:
        raise ValueError(f"{g} ground-truth nodes but only {m} queries")
    # background rows cost nothing against any query
    square = np.zeros((m, m))
    square[:g] = c
    cols = hungarian(square)[:g]
    return MatchResult(cols, c[np.arange(g), cols])


def stage_loss(probs: torch.Tensor, attention: torch.Tensor, targets: GtTargets,
               lam: float = LAMBDA_ATT, matching: MatchResult | None = None) -> tuple[torch.Tensor, MatchResult]:
    """Matched classification + edge loss plus background loss on unmatched queries.

    The matching is held constant for differentiation; pass ``matching`` to
    reuse one computed elsewhere.
    """
    if matching is None:
        matching = match(probs, attention, targets, lam)
    m = probs.shape[0]
    background = probs.shape[1] - 1
    loss = probs.new_zeros(())
    if len(matching.assignment):
        c = cost_matrix(probs, attention, targets, lam)
        loss = loss + c[torch.arange(len(matching.assignment)), torch.as_tensor(matching.assignment)].sum()
    unmatched = np.setdiff1d(np.arange(m), matching.assignment)
    if len(unmatched):
        p_bg = probs[torch.as_tensor(unmatched), background]
        loss = loss - torch.log(torch.clamp(p_bg, min=LOG_CLAMP)).sum()
    return loss, matching
