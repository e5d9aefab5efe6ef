"""Self-attention encoder over layout tokens.

Mixes information across the k tokens so each object's embedding reflects
the other objects around it. Token 0 (the whole-canvas token) doubles as a
summary of the entire layout after encoding. Blocks are pre-norm residual
(norm -> attention -> add, norm -> feedforward -> add) and add no index
positional encodings: position information enters only through the box
embedding, so rows 1..k-1 stay permutation-equivariant. Padding tokens are
not masked; they attend and are attended to like any other token.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import NonFiniteInput, ShapeMismatch


@dataclass(frozen=True)
class LayoutEncoderConfig:
    depth: int = 3
    heads: int = 4
    width: int = 64
    mlp_ratio: float = 4.0
    dropout: float = 0.0

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError(f"depth must be >= 0, got {self.depth}")
        if self.depth > 0 and self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")


@dataclass
class FusedLayout:
    tokens: torch.Tensor  # ... x k x width
    global_token: torch.Tensor  # ... x width, always tokens[..., 0, :]


class EncoderBlock(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: float, dropout: float):
        super().__init__()
        self.norm_attn = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, dropout=dropout, batch_first=True)
        self.norm_mlp = nn.LayerNorm(width)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(width, hidden),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, width),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm_attn(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm_mlp(x))


class LayoutEncoder(nn.Module):
    def __init__(self, config: LayoutEncoderConfig):
        super().__init__()
        self.config = config
        self.blocks = nn.ModuleList(
            EncoderBlock(config.width, config.heads, config.mlp_ratio, config.dropout)
            for _ in range(config.depth)
        )

    def forward(self, tokens: torch.Tensor) -> FusedLayout:
        return fuse_layout(tokens, self)


def fuse_layout(tokens: torch.Tensor, encoder: LayoutEncoder) -> FusedLayout:
    """Run the encoder stack; depth 0 returns the input unchanged."""
    width = encoder.config.width
    if tokens.shape[-1] != width:
        raise ShapeMismatch(f"token width {tokens.shape[-1]} != encoder width {width}")
    if tokens.dim() < 2:
        raise ShapeMismatch(f"expected at least 2 dims (k, width), got {tokens.dim()}")
    if not torch.isfinite(tokens).all():
        raise NonFiniteInput("layout tokens contain NaN or Inf")
    squeeze = tokens.dim() == 2
    x = tokens.unsqueeze(0) if squeeze else tokens
    for block in encoder.blocks:
        x = block(x)
    if squeeze:
        x = x.squeeze(0)
    return FusedLayout(x, x[..., 0, :])
