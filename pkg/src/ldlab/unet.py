"""Noise-prediction UNet with layout conditioning at selected resolutions.

The layout is embedded and encoded exactly once per forward pass; the
resulting bundle is reused at every fusion site. Each fusion resolution owns
one RegionFusion block, applied on both the down and up visit of that
resolution. All other computation is unconditioned residual convolution, so
with the fusion output projections at zero the network ignores the layout
entirely.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
from torch import nn

from .errors import ConfigError, ShapeMismatch
from .fusion import RegionFusion, norm_groups
from .layout import LayoutEmbedder, PaddedLayout, layout_tensors
from .layout_encoder import LayoutEncoder, LayoutEncoderConfig


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal timestep features: first half sin, second half cos."""
    if dim % 2 != 0:
        raise ShapeMismatch(f"embedding dim must be even, got {dim}")
    scalar = not isinstance(t, torch.Tensor)
    if scalar:
        t = torch.tensor([float(t)])
    t = t.to(torch.float64)
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    )
    args = t[..., None] * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return emb[0] if scalar else emb


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 64
    in_channels: int = 3
    out_channels: int = 3
    hidden_channels: int = 64
    channel_multipliers: tuple = (1, 2, 3, 4)
    res_blocks_per_stage: int = 2
    dropout: float = 0.0
    fusion_resolutions: tuple = (32, 16, 8)
    fusion_heads: int = 4
    layout_width: int = 64
    encoder_depth: int = 3
    encoder_heads: int = 4
    encoder_mlp_ratio: float = 4.0
    sequence_length: int = 10
    num_categories: int = 12
    cache_layout_kv: bool = False
    fusion_placement: str = "both"  # apply the per-resolution block on "down", "up", or "both" visits

    def __post_init__(self):
        if self.fusion_placement not in ("down", "up", "both"):
            raise ConfigError(
                f"fusion_placement must be down/up/both, got {self.fusion_placement!r}"
            )
        object.__setattr__(
            self, "channel_multipliers", tuple(self.channel_multipliers)
        )
        object.__setattr__(
            self, "fusion_resolutions", tuple(self.fusion_resolutions)
        )
        stages = len(self.channel_multipliers)
        if self.image_size % (1 << (stages - 1)) != 0:
            raise ConfigError(
                f"image size {self.image_size} not divisible across {stages} stages"
            )
        res = self.stage_resolutions()
        for r in self.fusion_resolutions:
            if r not in res:
                raise ConfigError(
                    f"fusion resolution {r} not among stage resolutions {res}"
                )

    def stage_resolutions(self) -> tuple:
        return tuple(
            self.image_size >> i for i in range(len(self.channel_multipliers))
        )

    def stage_channels(self) -> tuple:
        return tuple(self.hidden_channels * m for m in self.channel_multipliers)

    def fusion_channels(self, resolution: int) -> int:
        return self.stage_channels()[self.stage_resolutions().index(resolution)]

    def encoder_config(self) -> LayoutEncoderConfig:
        return LayoutEncoderConfig(
            depth=self.encoder_depth,
            heads=self.encoder_heads,
            width=self.layout_width,
            mlp_ratio=self.encoder_mlp_ratio,
            dropout=0.0,
        )

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "DenoiserConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown denoiser config keys: {sorted(unknown)}")
        return cls(**data)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.GroupNorm(norm_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(norm_groups(out_ch), out_ch)
        self.dropout = nn.Dropout(dropout)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(torch.nn.functional.silu(temb))[:, :, None, None]
        h = self.conv2(self.dropout(torch.nn.functional.silu(self.norm2(h))))
        return self.skip(x) + h


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return self.conv(torch.nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


class LayoutUNet(nn.Module):
    """epsilon-prediction backbone; forward(x_t, t, layouts) -> eps."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        chans = config.stage_channels()
        resolutions = config.stage_resolutions()
        time_dim = 4 * config.hidden_channels

        self.layout = LayoutEmbedder(config.num_categories, config.layout_width)
        self.encoder = LayoutEncoder(config.encoder_config())
        self.fusion = nn.ModuleDict(
            {
                f"res{r}": RegionFusion(
                    config.fusion_channels(r),
                    config.layout_width,
                    heads=config.fusion_heads,
                    cache_layout_kv=config.cache_layout_kv,
                )
                for r in config.fusion_resolutions
            }
        )

        self.time_mlp = nn.Sequential(
            nn.Linear(config.hidden_channels, time_dim),
            nn.SiLU(),
            nn.Linear(time_dim, time_dim),
        )
        self.stem = nn.Conv2d(config.in_channels, chans[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        prev = chans[0]
        for i, ch in enumerate(chans):
            blocks = nn.ModuleList()
            for j in range(config.res_blocks_per_stage):
                blocks.append(ResBlock(prev if j == 0 else ch, ch, time_dim, config.dropout))
            self.down_blocks.append(blocks)
            prev = ch
            if i < len(chans) - 1:
                self.downsamples.append(Downsample(ch))

        self.mid = nn.ModuleList(
            [
                ResBlock(chans[-1], chans[-1], time_dim, config.dropout),
                ResBlock(chans[-1], chans[-1], time_dim, config.dropout),
            ]
        )

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(len(chans))):
            ch = chans[i]
            blocks = nn.ModuleList()
            for j in range(config.res_blocks_per_stage):
                blocks.append(ResBlock(2 * ch if j == 0 else ch, ch, time_dim, config.dropout))
            self.up_blocks.append(blocks)
            if i > 0:
                self.upsamples.append(Upsample(ch, chans[i - 1]))

        self.out_norm = nn.GroupNorm(norm_groups(chans[0]), chans[0])
        self.out_conv = nn.Conv2d(chans[0], config.out_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

        self._resolutions = resolutions

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _prepare_layouts(self, layouts, batch: int):
        if isinstance(layouts, PaddedLayout):
            layouts = [layouts] * batch
        if len(layouts) != batch:
            raise ShapeMismatch(f"{len(layouts)} layouts for batch of {batch}")
        for l in layouts:
            if l.k != self.config.sequence_length:
                raise ShapeMismatch(
                    f"layout length {l.k} != configured {self.config.sequence_length}"
                )
        param = next(self.parameters())
        boxes, cats = layout_tensors(layouts, dtype=param.dtype)
        return boxes.to(param.device), cats.to(param.device)

    def forward(self, x: torch.Tensor, t, layouts) -> torch.Tensor:
        cfg = self.config
        if x.dim() != 4 or x.shape[1] != cfg.in_channels or x.shape[2] != cfg.image_size:
            raise ShapeMismatch(
                f"expected (B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), "
                f"got {tuple(x.shape)}"
            )
        b = x.shape[0]
        boxes, cats = self._prepare_layouts(layouts, b)

        layout_emb = self.layout(boxes, cats)
        fused = self.encoder(layout_emb.tokens)  # single encoder pass per call
        bundles = {
            r: self.fusion[f"res{r}"].make_bundle(
                layout_emb, fused, self.layout.box_proj, r, r
            )
            for r in cfg.fusion_resolutions
        }

        if not isinstance(t, torch.Tensor):
            t = torch.full((b,), int(t), dtype=torch.float64)
        t = t.to(torch.float64)
        if t.dim() == 0:
            t = t.expand(b)
        param = next(self.parameters())
        temb = self.time_mlp(
            timestep_embedding(t, cfg.hidden_channels).to(param.dtype).to(param.device)
        )

        h = self.stem(x)
        skips = []
        for i, blocks in enumerate(self.down_blocks):
            for block in blocks:
                h = block(h, temb)
            r = self._resolutions[i]
            if r in bundles and cfg.fusion_placement in ("down", "both"):
                h = self.fusion[f"res{r}"](h, bundles[r])
            skips.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)

        for block in self.mid:
            h = block(h, temb)

        for idx, blocks in enumerate(self.up_blocks):
            stage = len(self._resolutions) - 1 - idx
            h = torch.cat([h, skips[stage]], dim=1)
            for block in blocks:
                h = block(h, temb)
            r = self._resolutions[stage]
            if r in bundles and cfg.fusion_placement in ("up", "both"):
                h = self.fusion[f"res{r}"](h, bundles[r])
            if idx < len(self.upsamples):
                h = self.upsamples[idx](h)

        return self.out_conv(torch.nn.functional.silu(self.out_norm(h)))


def denoise(
    x_t: torch.Tensor, t, layout: PaddedLayout | Sequence[PaddedLayout], model: LayoutUNet
) -> torch.Tensor:
    """Single entry point mirroring the model's role as a noise predictor."""
    squeeze = x_t.dim() == 3
    if squeeze:
        x_t = x_t.unsqueeze(0)
    out = model(x_t, t, layout)
    return out.squeeze(0) if squeeze else out
