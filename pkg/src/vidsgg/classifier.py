"""Classification stage: entity encoder, role-aware decoder, predicate head."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .features import TrackletFeatureExtractor
from .graph import TemporalBipartiteGraph
from .layers import MLP, EncoderLayer, MultiHeadSelfAttention, seeded_unit_vectors

PRIOR_EPS = 1e-3


@dataclass
class ClassifierConfig:
    num_entity_classes: int
    num_predicate_classes: int
    d_a: int = 1024
    d_e: int = 512
    d_q: int = 512
    d_w: int = 300
    d_hidden: int = 512
    num_queries: int = 192
    enc_layers: int = 3
    dec_layers: int = 3
    heads: int = 8
    pool_len: int = 4
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SceneInput:
    """Tensors one classifier forward pass needs for a single video."""

    appearance: list[torch.Tensor]  # each (l_i, d_a)
    spatial: list[torch.Tensor]  # each (l_i, 8)
    categories: torch.Tensor  # (n,) long


@dataclass
class ClassifierOutput:
    probs: torch.Tensor  # (m, C_p + 1); last column is background
    attention: torch.Tensor  # (2, m, n)
    edges: np.ndarray  # (m, 2) subject/object entity indices
    entity_features: torch.Tensor  # (n, d_e) pooled, pre-encoder
    queries: torch.Tensor  # (m, d_q)


def double_softmax(logits: torch.Tensor) -> torch.Tensor:
    """Product of the softmax over entities and the softmax over the two roles.

    Args:
        logits: ``(2, m, n)`` role-channel attention logits.
    """
    return torch.softmax(logits, dim=-1) * torch.softmax(logits, dim=0)


class RoleAwareCrossAttention(nn.Module):
    """Single-head cross-attention per role channel, fused by role-specific MLPs."""

    def __init__(self, d_q: int, d_e: int, d_hidden: int):
        super().__init__()
        self.d_e = d_e
        self.w_query = nn.Parameter(torch.randn(2, d_q, d_e) / math.sqrt(d_q))
        self.w_key = nn.Parameter(torch.randn(2, d_e, d_e) / math.sqrt(d_e))
        self.f_subject = MLP(d_e, d_hidden, d_q)
        self.f_object = MLP(d_e, d_hidden, d_q)

    def logits(self, queries: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
        q = torch.einsum("md,rde->rme", queries, self.w_query)
        k = torch.einsum("nd,rde->rne", keys, self.w_key)
        return q @ k.transpose(-1, -2) / math.sqrt(self.d_e)

    def forward(self, queries: torch.Tensor, entities: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        attn = double_softmax(self.logits(queries, entities))
        fused = self.f_subject(attn[0] @ entities) + self.f_object(attn[1] @ entities)
        return fused, attn


class DecoderLayer(nn.Module):
    def __init__(self, d_q: int, d_e: int, heads: int, d_hidden: int):
        super().__init__()
        self.self_attn = MultiHeadSelfAttention(d_q, heads)
        self.norm1 = nn.LayerNorm(d_q)
        self.raca = RoleAwareCrossAttention(d_q, d_e, d_hidden)
        self.norm2 = nn.LayerNorm(d_q)
        self.ffn = MLP(d_q, d_hidden, d_q)
        self.norm3 = nn.LayerNorm(d_q)

    def forward(self, q: torch.Tensor, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        q1 = self.norm1(q + self.self_attn(q))
        fused, attn = self.raca(q1, h)
        q2 = self.norm2(q1 + fused)
        return self.norm3(q2 + self.ffn(q2)), attn


class EntityEncoder(nn.Module):
    def __init__(self, d_e: int, layers: int, heads: int, d_ff: int):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(d_e, heads, d_ff) for _ in range(layers))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(h).all():
            raise ValueError("non-finite entity features")
        for layer in self.layers:
            h = layer(h)
        return h


class PredicateDecoder(nn.Module):
    def __init__(self, num_queries: int, d_q: int, d_e: int, layers: int, heads: int, d_hidden: int):
        super().__init__()
        self.query_embed = nn.Parameter(torch.randn(num_queries, d_q))
        self.layers = nn.ModuleList(DecoderLayer(d_q, d_e, heads, d_hidden) for _ in range(layers))

    def forward(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        q, attn = self.query_embed, None
        for layer in self.layers:
            q, attn = layer(q, h)
        return q, attn


def encoder_forward(h: torch.Tensor, encoder: EntityEncoder) -> torch.Tensor:
    return encoder(h)


def raca_forward(q_prime: torch.Tensor, h_tilde: torch.Tensor, raca: RoleAwareCrossAttention):
    return raca(q_prime, h_tilde)


def decoder_forward(h_tilde: torch.Tensor, decoder: PredicateDecoder):
    return decoder(h_tilde)


def select_edges(attention) -> np.ndarray:
    """Subject/object entity per query: argmax of each role channel, lowest index on ties."""
    a = attention.detach().cpu().numpy() if isinstance(attention, torch.Tensor) else np.asarray(attention)
    if a.ndim != 3 or a.shape[0] != 2 or a.shape[2] < 1:
        raise ValueError(f"attention must be (2, m, n>=1), got {a.shape}")
    return np.stack([a[0].argmax(axis=1), a[1].argmax(axis=1)], axis=1)


def predicate_probabilities(mlp_out: torch.Tensor, prior_row: torch.Tensor) -> torch.Tensor:
    """``softmax(MLP_p(f) + b)`` along the last axis."""
    return torch.softmax(mlp_out + prior_row, dim=-1)


def build_prior(graphs: Iterable[TemporalBipartiteGraph], num_entity_classes: int,
                num_predicate_classes: int, eps: float = PRIOR_EPS) -> np.ndarray:
    """Log-frequency triplet prior ``b[s, o, p]`` with additive smoothing.

    Each predicate node counts once regardless of its instance count.
    """
    counts = np.zeros((num_entity_classes, num_entity_classes, num_predicate_classes))
    seen = False
    for g in graphs:
        seen = True
        for p in g.predicates:
            s, o = g.entities[p.subject_idx].category, g.entities[p.object_idx].category
            counts[s, o, p.category] += 1
    if not seen:
        raise ValueError("prior needs at least one training graph")
    pair = counts.sum(axis=2, keepdims=True)
    return np.log((counts + eps) / (pair + eps * num_predicate_classes))


class RelationClassifier(nn.Module):
    """Tracklet features -> encoder -> role-aware decoder -> predicate head."""

    def __init__(self, cfg: ClassifierConfig, prior: np.ndarray | None = None,
                 entity_embeddings: torch.Tensor | None = None):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.features = TrackletFeatureExtractor(cfg.d_a, cfg.d_e, cfg.d_hidden, cfg.pool_len)
            self.encoder = EntityEncoder(cfg.d_e, cfg.enc_layers, cfg.heads, cfg.d_hidden)
            self.decoder = PredicateDecoder(cfg.num_queries, cfg.d_q, cfg.d_e, cfg.dec_layers,
                                            cfg.heads, cfg.d_hidden)
            d_cls = cfg.d_q + 2 * cfg.d_e + 2 * cfg.d_w
            self.cls_mlp = MLP(d_cls, cfg.d_hidden, cfg.num_predicate_classes + 1)
        if entity_embeddings is None:
            entity_embeddings = seeded_unit_vectors(cfg.num_entity_classes, cfg.d_w, cfg.seed + 1)
        self.register_buffer("entity_embeddings", torch.as_tensor(entity_embeddings, dtype=torch.float64))
        shape = (cfg.num_entity_classes, cfg.num_entity_classes, cfg.num_predicate_classes)
        prior = np.zeros(shape) if prior is None else np.asarray(prior, dtype=np.float64)
        if prior.shape != shape or not np.isfinite(prior).all():
            raise ValueError(f"prior table must be finite with shape {shape}")
        self.register_buffer("prior_table", torch.as_tensor(prior))
        self.double()

    def set_prior(self, prior: np.ndarray) -> None:
        with torch.no_grad():
            self.prior_table.copy_(torch.as_tensor(prior))

    def prior_rows(self, subj_cats: torch.Tensor, obj_cats: torch.Tensor) -> torch.Tensor:
        rows = self.prior_table[subj_cats, obj_cats]
        # the background class carries no prior
        return torch.cat([rows, rows.new_zeros(len(rows), 1)], dim=1)

    def forward(self, scene: SceneInput) -> ClassifierOutput:
        cats = scene.categories
        if cats.numel() and (cats.min() < 0 or cats.max() >= self.cfg.num_entity_classes):
            raise ValueError("unknown entity category index")
        _, h = self.features(scene.appearance, scene.spatial)
        h_tilde = self.encoder(h)
        q, attn = self.decoder(h_tilde)
        edges = select_edges(attn)
        s_idx = torch.as_tensor(edges[:, 0])
        o_idx = torch.as_tensor(edges[:, 1])
        feat = torch.cat([q, h[s_idx], h[o_idx],
                          self.entity_embeddings[cats[s_idx]],
                          self.entity_embeddings[cats[o_idx]]], dim=1)
        probs = predicate_probabilities(self.cls_mlp(feat), self.prior_rows(cats[s_idx], cats[o_idx]))
        return ClassifierOutput(probs, attn, edges, h, q)


@dataclass
class Candidate:
    """One classified relation awaiting temporal grounding."""

    subject_idx: int
    object_idx: int
    category: int
    prob: float
    query: int = -1
    extra: dict = field(default_factory=dict)


def top_candidates(out: ClassifierOutput, k_keep: int, entities: Sequence | None = None) -> list[Candidate]:
    """Keep the top ``k_keep`` foreground categories per query, then drop
    self-pairs, pairs without temporal overlap, and duplicate triplets."""
    probs = out.probs.detach().cpu().numpy()[:, :-1]
    best: dict[tuple[int, int, int], Candidate] = {}
    for j, row in enumerate(probs):
        s, o = int(out.edges[j, 0]), int(out.edges[j, 1])
        if s == o:
            continue
        if entities is not None and entities[s].time_slot.intersect(entities[o].time_slot) is None:
            continue
        for c in np.argsort(-row, kind="stable")[:k_keep]:
            key = (s, int(c), o)
            if key not in best or row[c] > best[key].prob:
                best[key] = Candidate(s, o, int(c), float(row[c]), j)
    return sorted(best.values(), key=lambda c: (-c.prob, c.query, c.category))
