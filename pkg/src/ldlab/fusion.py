"""Image-layout fusion: region-tagged patches and box-aware cross attention.

Each cell of a feature map gets its own bounding box, so patches and layout
objects carry positions in one shared coordinate space: both kinds of box go
through the same 4 -> d_L projection and then a per-resolution d_L -> d_I
projection to become positional embeddings. Conditioning happens two ways at
each fusion resolution: the encoded whole-layout token is added everywhere
(global), and image patches cross-attend over the concatenation of image and
layout tokens with positional embeddings joined on the channel axis (local).

Queries are the image patches only; keys cover image plus layout rows. The
positional half of the query/key channels lets attention match "where" while
the content half matches "what". Output projections start at zero so a fresh
block is an identity map.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .errors import InvalidGrid, NonFiniteInput, ShapeMismatch
from .layout import LayoutEmbedding
from .layout_encoder import FusedLayout


def norm_groups(channels: int) -> int:
    """Group count for channel normalization: 32 when the width divides
    evenly, otherwise the largest divisor not exceeding 32 that still leaves
    at least two channels per group (so the statistic is defined even on a
    1x1 feature map)."""
    if channels % 32 == 0:
        return 32
    for g in range(min(32, channels // 2), 0, -1):
        if channels % g == 0:
            return g
    return 1


@dataclass(frozen=True)
class PatchGrid:
    h: int
    w: int
    boxes: np.ndarray  # h x w x 4, row-major (row_min, col_min, row_max, col_max)


def patch_bboxes(h: int, w: int) -> PatchGrid:
    """Assign cell (u, v) the box (u/h, v/w, (u+1)/h, (v+1)/w).

    The boxes tile the unit square exactly: interiors are disjoint and the
    union covers [0,1]^2.
    """
    if h < 1 or w < 1:
        raise InvalidGrid(f"grid dims must be positive, got {h}x{w}")
    u = np.arange(h, dtype=np.float64)
    v = np.arange(w, dtype=np.float64)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    boxes = np.stack([uu / h, vv / w, (uu + 1) / h, (vv + 1) / w], axis=-1)
    return PatchGrid(h, w, boxes)


def positional_embed(box_emb: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Project box embeddings (.. x d_L) to positional embeddings (.. x d_I)."""
    if box_emb.shape[-1] != weight.shape[0]:
        raise ShapeMismatch(
            f"box embedding width {box_emb.shape[-1]} != projection rows {weight.shape[0]}"
        )
    return box_emb @ weight


def global_condition(
    feature_map: torch.Tensor, global_token: torch.Tensor, weight: torch.Tensor
) -> torch.Tensor:
    """Add the projected whole-layout token at every spatial location.

    feature_map is channel-last (... x h x w x d_I); global_token is (... x d_L).
    """
    if global_token.shape[-1] != weight.shape[0]:
        raise ShapeMismatch(
            f"global token width {global_token.shape[-1]} != projection rows {weight.shape[0]}"
        )
    if feature_map.shape[-1] != weight.shape[1]:
        raise ShapeMismatch(
            f"feature channels {feature_map.shape[-1]} != projection cols {weight.shape[1]}"
        )
    shift = global_token @ weight
    return feature_map + shift[..., None, None, :]


def scaled_dot_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    return_weights: bool = False,
):
    """softmax(Q K^T / sqrt(d_k)) V over the last two dims.

    Every output row is a convex combination of value rows; the weights of
    each row sum to one.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeMismatch(f"q/k widths disagree: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch(f"k/v lengths disagree: {k.shape[-2]} vs {v.shape[-2]}")
    d_k = q.shape[-1]
    if d_k <= 0:
        raise ShapeMismatch("d_k must be positive")
    logits = q @ k.transpose(-1, -2) / (d_k**0.5)
    weights = torch.softmax(logits, dim=-1)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


def multihead_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    heads: int,
    return_weights: bool = False,
):
    """Split channels into heads uniformly, attend per head, re-join."""
    if q.shape[-1] % heads or v.shape[-1] % heads:
        raise ShapeMismatch(
            f"channels ({q.shape[-1]} qk, {v.shape[-1]} v) not divisible by {heads} heads"
        )

    def split(x):
        *lead, n, c = x.shape
        return x.reshape(*lead, n, heads, c // heads).transpose(-2, -3)

    out = scaled_dot_attention(split(q), split(k), split(v), return_weights)
    if return_weights:
        out, weights = out
    merged = out.transpose(-2, -3).reshape(*q.shape[:-1], v.shape[-1])
    if return_weights:
        return merged, weights
    return merged


@dataclass
class FusionBundle:
    """Layout-side inputs precomputed once per denoise call per resolution."""

    cat_emb: torch.Tensor  # B x k x d_L
    fused_tokens: torch.Tensor  # B x k x d_L
    box_emb: torch.Tensor  # B x k x d_L
    layout_pos: torch.Tensor  # B x k x d_I
    patch_pos: torch.Tensor  # hw x d_I
    global_token: torch.Tensor  # B x d_L
    layout_kv: Optional[torch.Tensor] = None  # B x k x 2 d_I when cached


class RegionFusion(nn.Module):
    """One fusion site: global conditioning followed by cross attention.

    Instantiated once per fusion resolution and applied wherever the UNet
    visits that resolution. `global_proj` and `out_proj` start at zero so the
    whole block is an identity at initialization and conditioning flows only
    through these two projections.
    """

    def __init__(
        self,
        image_channels: int,
        layout_width: int,
        heads: int = 4,
        cache_layout_kv: bool = False,
    ):
        super().__init__()
        if (2 * image_channels) % heads or image_channels % heads:
            raise ShapeMismatch(
                f"image channels {image_channels} incompatible with {heads} heads"
            )
        self.image_channels = image_channels
        self.layout_width = layout_width
        self.heads = heads
        self.cache_layout_kv = cache_layout_kv

        self.norm_image = nn.GroupNorm(norm_groups(image_channels), image_channels)
        self.to_qkv_image = nn.Conv2d(image_channels, 3 * image_channels, 1)
        self.norm_layout = nn.GroupNorm(norm_groups(layout_width), layout_width)
        self.to_kv_layout = nn.Linear(layout_width, 2 * image_channels)
        self.pos_proj = nn.Linear(layout_width, image_channels, bias=False)
        self.global_proj = nn.Linear(layout_width, image_channels, bias=False)
        self.out_proj = nn.Conv2d(image_channels, image_channels, 1)
        nn.init.zeros_(self.global_proj.weight)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def make_bundle(
        self,
        layout_emb: LayoutEmbedding,
        fused: FusedLayout,
        box_proj: nn.Linear,
        h: int,
        w: int,
    ) -> FusionBundle:
        """Precompute the timestep-invariant layout side for this resolution."""
        grid = patch_bboxes(h, w)
        boxes = torch.from_numpy(grid.boxes.reshape(h * w, 4)).to(
            dtype=layout_emb.box_emb.dtype, device=layout_emb.box_emb.device
        )
        patch_box_emb = box_proj(boxes)
        bundle = FusionBundle(
            cat_emb=layout_emb.cat_emb,
            fused_tokens=fused.tokens,
            box_emb=layout_emb.box_emb,
            layout_pos=self.pos_proj(layout_emb.box_emb),
            patch_pos=self.pos_proj(patch_box_emb),
            global_token=fused.global_token,
        )
        if self.cache_layout_kv:
            bundle.layout_kv = self.to_kv_layout(self._layout_content(bundle))
        return bundle

    def _layout_content(self, bundle: FusionBundle) -> torch.Tensor:
        # average of the normalized category path and the encoded tokens;
        # each token is normalized independently so the result is invariant
        # to how many padding tokens share the sequence
        b, k, d = bundle.cat_emb.shape
        normed = self.norm_layout(bundle.cat_emb.reshape(b * k, d, 1)).reshape(b, k, d)
        return 0.5 * (normed + bundle.fused_tokens)

    def condition_global(self, x: torch.Tensor, bundle: FusionBundle) -> torch.Tensor:
        """x is B x d_I x h x w (conv layout)."""
        shift = self.global_proj(bundle.global_token)
        return x + shift[:, :, None, None]

    def cross_attend(
        self, x: torch.Tensor, bundle: FusionBundle, return_internals: bool = False
    ):
        b, c, h, w = x.shape
        if c != self.image_channels:
            raise ShapeMismatch(f"expected {self.image_channels} channels, got {c}")
        if not torch.isfinite(x).all():
            raise NonFiniteInput("feature map contains NaN or Inf")

        qkv = self.to_qkv_image(self.norm_image(x))
        qkv = qkv.reshape(b, 3, c, h * w).permute(1, 0, 3, 2)  # 3 x B x hw x c
        q_img, k_img, v_img = qkv[0], qkv[1], qkv[2]

        if bundle.cat_emb.shape[-2] == 0:
            # degenerate bundle with no layout rows: image-only attention
            kv_layout = x.new_zeros(b, 0, 2 * c)
        elif bundle.layout_kv is not None:
            kv_layout = bundle.layout_kv
        else:
            kv_layout = self.to_kv_layout(self._layout_content(bundle))
        k_layout, v_layout = kv_layout.chunk(2, dim=-1)

        patch_pos = bundle.patch_pos.expand(b, h * w, c)
        q = torch.cat([q_img, patch_pos], dim=-1)
        k = torch.cat(
            [
                torch.cat([k_img, k_layout], dim=-2),
                torch.cat([patch_pos, bundle.layout_pos], dim=-2),
            ],
            dim=-1,
        )
        v = torch.cat([v_img, v_layout], dim=-2)

        if return_internals:
            attended, weights = multihead_attention(q, k, v, self.heads, return_weights=True)
        else:
            # fused kernel avoids materializing the (hw x hw+k) weight matrix
            def split(t):
                *lead, n, ch = t.shape
                return t.reshape(*lead, n, self.heads, ch // self.heads).transpose(-2, -3)

            fused_out = torch.nn.functional.scaled_dot_product_attention(
                split(q), split(k), split(v)
            )
            attended = fused_out.transpose(-2, -3).reshape(b, h * w, c)
        out = attended.transpose(-1, -2).reshape(b, c, h, w)
        out = x + self.out_proj(out)
        if return_internals:
            return out, {"q": q, "k": k, "v": v, "weights": weights}
        return out

    def forward(self, x: torch.Tensor, bundle: FusionBundle) -> torch.Tensor:
        return self.cross_attend(self.condition_global(x, bundle), bundle)
