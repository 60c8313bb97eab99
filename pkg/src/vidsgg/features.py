"""Per-tracklet features: spatial encoding, MLP + 1-D conv, chunk pooling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .layers import MLP


def spatial_feature(boxes: np.ndarray) -> np.ndarray:
    """Concatenate each box with its offset to the next frame.

    The last frame has no successor and gets a zero offset.

    Args:
        boxes: ``(l, 4)`` array of ``(xmin, ymin, xmax, ymax)``.

    Returns:
        ``(l, 8)`` array.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.ndim != 2 or boxes.shape[1] != 4 or len(boxes) == 0:
        raise ValueError(f"expected non-empty (l, 4) boxes, got shape {boxes.shape}")
    delta = np.zeros_like(boxes)
    delta[:-1] = boxes[1:] - boxes[:-1]
    return np.concatenate([boxes, delta], axis=1)


def chunk_bounds(length: int, pool_len: int) -> list[tuple[int, int]]:
    """Frame ranges of ``pool_len`` near-equal chunks; short tracks repeat frames."""
    bounds = []
    for c in range(pool_len):
        lo = (c * length) // pool_len
        hi = max(lo + 1, ((c + 1) * length) // pool_len)
        bounds.append((lo, hi))
    return bounds


def pooling_matrix(length: int, pool_len: int, width: int | None = None, dtype=torch.float64) -> torch.Tensor:
    width = length if width is None else width
    mat = torch.zeros(pool_len, width, dtype=dtype)
    for c, (lo, hi) in enumerate(chunk_bounds(length, pool_len)):
        mat[c, lo:hi] = 1.0 / (hi - lo)
    return mat


def chunk_pool(seq: torch.Tensor, pool_len: int) -> torch.Tensor:
    """Mean of each chunk, ``(l, d) -> (pool_len, d)``."""
    return pooling_matrix(len(seq), pool_len, dtype=seq.dtype) @ seq


@dataclass
class TrackletFeature:
    sequence: torch.Tensor  # (l, d_e)
    pooled: torch.Tensor  # (d_e,)


class TrackletFeatureExtractor(nn.Module):
    """``f = Conv[MLP_a(appearance); MLP_s(spatial)]`` followed by chunk pooling and a projection."""

    def __init__(self, d_a: int, d_e: int, d_hidden: int = 512, pool_len: int = 4, kernel: int = 3):
        super().__init__()
        if pool_len < 1:
            raise ValueError("pool_len must be >= 1")
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd for same-padding")
        self.d_a, self.d_e, self.pool_len = d_a, d_e, pool_len
        self.mlp_a = MLP(d_a, d_hidden, d_e)
        self.mlp_s = MLP(8, d_hidden, d_e)
        self.conv = nn.Conv1d(2 * d_e, d_e, kernel, padding=kernel // 2)
        self.pool_proj = MLP(pool_len * d_e, d_hidden, d_e)

    def forward(self, appearance: Sequence[torch.Tensor], spatial: Sequence[torch.Tensor]) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Encode a set of tracklets at once.

        Returns the per-frame sequences and the ``(n, d_e)`` pooled matrix.
        """
        if len(appearance) != len(spatial):
            raise ValueError("appearance / spatial count mismatch")
        lengths = [len(a) for a in appearance]
        for a, s in zip(appearance, spatial):
            if a.ndim != 2 or a.shape[1] != self.d_a or s.shape != (len(a), 8) or len(a) == 0:
                raise ValueError(f"bad tracklet input shapes {tuple(a.shape)} / {tuple(s.shape)}")
        n, width = len(lengths), max(lengths)
        dtype = self.conv.weight.dtype
        app = appearance[0].new_zeros((n, width, self.d_a), dtype=dtype)
        spa = app.new_zeros((n, width, 8))
        mask = app.new_zeros((n, width, 1))
        for i, (a, s) in enumerate(zip(appearance, spatial)):
            app[i, : len(a)] = a
            spa[i, : len(a)] = s
            mask[i, : len(a)] = 1.0
        # padded frames must be exactly zero so the conv sees same-padding at each track end
        x = torch.cat([self.mlp_a(app), self.mlp_s(spa)], dim=-1) * mask
        seq = self.conv(x.transpose(1, 2)).transpose(1, 2)
        pool = torch.stack([pooling_matrix(l, self.pool_len, width, dtype) for l in lengths])
        pooled = self.pool_proj((pool @ seq).reshape(n, -1))
        return [seq[i, :l] for i, l in enumerate(lengths)], pooled


def tracklet_feature(app: torch.Tensor, spat: torch.Tensor, params: TrackletFeatureExtractor) -> TrackletFeature:
    seqs, pooled = params([app], [spat])
    return TrackletFeature(seqs[0], pooled[0])
