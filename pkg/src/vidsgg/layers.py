"""Small transformer building blocks shared by both stages."""
from __future__ import annotations

import math

import torch
from torch import nn


class MLP(nn.Sequential):
    """Two fully-connected layers with a ReLU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__(nn.Linear(d_in, d_hidden), nn.ReLU(), nn.Linear(d_hidden, d_out))


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (..., L, d)
        *lead, length, d = x.shape
        h, dh = self.heads, d // self.heads

        def split(t):
            return t.reshape(*lead, length, h, dh).transpose(-3, -2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        y = (att @ v).transpose(-3, -2).reshape(*lead, length, d)
        return self.out(y)


class EncoderLayer(nn.Module):
    """Post-norm transformer layer: ``x <- LN(x + MHSA(x)); x <- LN(x + FFN(x))``."""

    def __init__(self, d: int, heads: int, d_ff: int):
        super().__init__()
        self.attn = MultiHeadSelfAttention(d, heads)
        self.norm1 = nn.LayerNorm(d)
        self.ffn = MLP(d, d_ff, d)
        self.norm2 = nn.LayerNorm(d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.attn(x))
        return self.norm2(x + self.ffn(x))


def sinusoidal_positions(length: int, d: int, dtype=torch.float64) -> torch.Tensor:
    pos = torch.arange(length, dtype=dtype)[:, None]
    i = torch.arange(0, d, 2, dtype=dtype)
    freq = torch.exp(-math.log(10000.0) * i / d)
    pe = torch.zeros(length, d, dtype=dtype)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)[:, : d // 2]
    return pe


def seeded_unit_vectors(count: int, dim: int, seed: int) -> torch.Tensor:
    """Deterministic stand-in word embeddings, one unit vector per category."""
    gen = torch.Generator().manual_seed(seed)
    v = torch.randn(count, dim, generator=gen, dtype=torch.float64)
    return v / v.norm(dim=1, keepdim=True)


def zero_parameters(module: nn.Module, keep_norms: bool = True) -> None:
    """Zero every weight; LayerNorm gains stay at one when ``keep_norms``."""
    with torch.no_grad():
        for mod in module.modules():
            if keep_norms and isinstance(mod, nn.LayerNorm):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
                continue
            for p in mod.parameters(recurse=False):
                p.zero_()
