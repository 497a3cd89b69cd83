"""Scale-complementary learning: decoder, Gaussian center targets, loss, fusion.

The decoder widens each pyramid level's receptive field with a chain of
progressively larger stride-2 convolutions whose outputs are restored to the
level's resolution by pixel shuffle, then lets the levels exchange information
through a deformable cross-level attention. A per-level single-channel head
predicts a "scale map" that is supervised by Gaussian blobs placed at box
centers, with blob width proportional to box scale.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .data import ImageSample
from .encoder import FeaturePyramid
from .errors import ShapeError
from .sampling import bilinear_gather

logger = logging.getLogger(__name__)


@dataclass
class ScaleTargetMap:
    """Per-level nonnegative single-channel target maps, [1, H_i, W_i] each."""

    levels: list[Tensor]

    def __post_init__(self):
        for i, lvl in enumerate(self.levels):
            if lvl.shape[-3] != 1:
                raise ShapeError(f"target level {i} must have 1 channel, got {lvl.shape}")
            if not torch.isfinite(lvl).all() or (lvl < 0).any():
                raise ShapeError(f"target level {i} has negative or nonfinite values")


@dataclass
class ComplementaryOutput:
    """C-channel complement features plus 1-channel scale-map predictions."""

    features: FeaturePyramid
    scale_maps: list[Tensor]


class MultiLevelDeformableAttention(nn.Module):
    """Cross-level attention with query-predicted sampling points.

    Each query token predicts, per head and per level, ``points`` sampling
    offsets and unnormalized weights; the weights are softmaxed over all
    levels * points of that head, values are bilinearly sampled at the query's
    reference point mapped into each level plus the offset, and the weighted
    sum (heads concatenated, linearly projected) is residual-added to the
    query.
    """

    def __init__(self, channels: int, num_levels: int, num_heads: int = 4,
                 points: int = 4):
        super().__init__()
        if channels % num_heads:
            raise ShapeError(f"channels {channels} not divisible by {num_heads} heads")
        self.channels = channels
        self.num_levels = num_levels
        self.num_heads = num_heads
        self.points = points
        n = num_heads * num_levels * points
        self.offset_proj = nn.Linear(channels, n * 2)
        self.weight_proj = nn.Linear(channels, n)
        self.output_proj = nn.Linear(channels, channels)
        nn.init.zeros_(self.offset_proj.weight)
        # Spread initial sampling points around the reference so heads start
        # looking in distinct directions.
        grid = torch.arange(n, dtype=torch.float32) * (2 * math.pi / n)
        init = torch.stack([grid.cos(), grid.sin()], dim=-1).flatten()
        with torch.no_grad():
            self.offset_proj.bias.copy_(init)
        nn.init.zeros_(self.weight_proj.weight)
        nn.init.zeros_(self.weight_proj.bias)

    def forward(self, levels: list[Tensor], return_weights: bool = False):
        if len(levels) != self.num_levels:
            raise ShapeError(
                f"attention built for {self.num_levels} levels, got {len(levels)}"
            )
        shapes = [lvl.shape[-2:] for lvl in levels]
        b = levels[0].shape[0]
        tokens = torch.cat([lvl.flatten(2).transpose(1, 2) for lvl in levels], dim=1)
        t = tokens.shape[1]

        refs = []
        for h, w in shapes:
            ys, xs = torch.meshgrid(
                torch.arange(h, dtype=tokens.dtype, device=tokens.device),
                torch.arange(w, dtype=tokens.dtype, device=tokens.device),
                indexing="ij",
            )
            refs.append(
                torch.stack([(xs + 0.5) / w, (ys + 0.5) / h], dim=-1).reshape(-1, 2)
            )
        ref = torch.cat(refs, dim=0)  # [T, 2] normalized

        nh, nl, npt = self.num_heads, self.num_levels, self.points
        offsets = self.offset_proj(tokens).view(b, t, nh, nl, npt, 2)
        weights = self.weight_proj(tokens).view(b, t, nh, nl * npt)
        weights = torch.softmax(weights, dim=-1).view(b, t, nh, nl, npt)

        head_dim = self.channels // nh
        sampled = tokens.new_zeros(b, t, nh, head_dim)
        for li, (lvl, (h, w)) in enumerate(zip(levels, shapes)):
            vals = lvl.view(b, nh, head_dim, h, w)
            px = ref[None, :, None, None, 0] * w - 0.5 + offsets[..., li, :, 0]
            py = ref[None, :, None, None, 1] * h - 0.5 + offsets[..., li, :, 1]
            # [B, T, nh, P] -> group by head for the gather
            px = px.permute(0, 2, 1, 3).reshape(b, nh, t * npt)
            py = py.permute(0, 2, 1, 3).reshape(b, nh, t * npt)
            got = bilinear_gather(vals, px, py)  # [B, nh, T*P, D]
            got = got.view(b, nh, t, npt, head_dim).permute(0, 2, 1, 3, 4)
            sampled = sampled + (got * weights[..., li, :, None]).sum(dim=3)

        out = self.output_proj(sampled.reshape(b, t, self.channels))
        mixed = tokens + out

        new_levels = []
        start = 0
        for lvl, (h, w) in zip(levels, shapes):
            chunk = mixed[:, start : start + h * w]
            new_levels.append(chunk.transpose(1, 2).reshape(b, self.channels, h, w))
            start += h * w
        if return_weights:
            return new_levels, weights
        return new_levels


class ScaleComplementDecoder(nn.Module):
    """Multi-kernel scale perception plus cross-level mixing.

    Per level: a chain of stride-2 convolutions with kernel sizes
    ``branch_kernels`` (each followed by pixel shuffle restoring the level's
    resolution), the level input concatenated with all branch outputs and
    reduced back to C channels, then deformable cross-level attention, and a
    1x1 head emitting the single-channel scale map per level.
    """

    SHUFFLE_FACTOR = 2

    def __init__(self, channels: int = 32, num_levels: int = 3,
                 branch_kernels: tuple[int, ...] = (3, 5, 7, 11),
                 attention_heads: int = 4, attention_points: int = 4):
        super().__init__()
        r2 = self.SHUFFLE_FACTOR**2
        if channels % r2:
            raise ShapeError(
                f"channels {channels} not divisible by pixel-shuffle factor^2 ({r2})"
            )
        if channels % attention_heads:
            raise ShapeError(
                f"channels {channels} not divisible by {attention_heads} heads"
            )
        self.channels = channels
        self.num_levels = num_levels
        self.branch_kernels = tuple(branch_kernels)
        self.branches = nn.ModuleList(
            [
                nn.Conv2d(channels, channels * r2, k, stride=self.SHUFFLE_FACTOR,
                          padding=k // 2)
                for k in branch_kernels
            ]
        )
        self.shuffle = nn.PixelShuffle(self.SHUFFLE_FACTOR)
        self.reduce = nn.Sequential(
            nn.Conv2d(channels * (len(branch_kernels) + 1), channels, 3, padding=1,
                      bias=False),
            nn.BatchNorm2d(channels, momentum=0.1),
            nn.ReLU(inplace=True),
        )
        self.attention = MultiLevelDeformableAttention(
            channels, num_levels, attention_heads, attention_points
        )
        self.scale_head = nn.Conv2d(channels, 1, 1)
        nn.init.zeros_(self.scale_head.bias)

    def forward(self, pyramid: FeaturePyramid, return_attention: bool = False):
        if pyramid.channels != self.channels:
            raise ShapeError(
                f"decoder built for {self.channels} channels, pyramid has "
                f"{pyramid.channels}"
            )
        if pyramid.num_levels != self.num_levels:
            raise ShapeError(
                f"decoder built for {self.num_levels} levels, pyramid has "
                f"{pyramid.num_levels}"
            )
        squeeze = pyramid.levels[0].dim() == 3
        levels = [lvl.unsqueeze(0) if squeeze else lvl for lvl in pyramid.levels]

        perceived = []
        for lvl in levels:
            h, w = lvl.shape[-2:]
            maps = [lvl]
            cur = lvl
            for conv in self.branches:
                # Pixel shuffle doubles ceil(H/2); crop keeps odd sizes valid.
                cur = self.shuffle(torch.relu(conv(cur)))[..., :h, :w]
                maps.append(cur)
            perceived.append(self.reduce(torch.cat(maps, dim=1)))

        if return_attention:
            mixed, weights = self.attention(perceived, return_weights=True)
        else:
            mixed = self.attention(perceived)
        scale_maps = [self.scale_head(lvl) for lvl in mixed]

        if squeeze:
            mixed = [lvl.squeeze(0) for lvl in mixed]
            scale_maps = [m.squeeze(0) for m in scale_maps]
        out = ComplementaryOutput(
            features=FeaturePyramid(levels=mixed, strides=list(pyramid.strides)),
            scale_maps=scale_maps,
        )
        if return_attention:
            return out, weights
        return out


def decoder_forward(pyramid: FeaturePyramid, decoder: ScaleComplementDecoder) -> ComplementaryOutput:
    return decoder(pyramid)


# ---------------------------------------------------------------------------
# Gaussian center targets
# ---------------------------------------------------------------------------

def gaussian_sigma(box_width: float, box_height: float, image_dim: int,
                   sigma_scale: float = 0.1, sigma_min: float = 0.5) -> float:
    """Blob width proportional to box scale, clamped to [sigma_min, image_dim/4]."""
    sigma = sigma_scale * math.sqrt(box_width * box_height)
    return min(max(sigma, sigma_min), image_dim / 4.0)


def center_heatmap(annotations, height: int, width: int, sigma_scale: float = 0.1,
                   sigma_min: float = 0.5) -> np.ndarray:
    """Sum of unit-sum Gaussians at rounded box centers, full resolution [H, W].

    Each annotation contributes a discrete isotropic Gaussian truncated at
    3 sigma (normalized to unit sum before truncation clipping at the image
    border, so interior centers contribute exactly unit mass).
    """
    full = np.zeros((height, width), dtype=np.float64)
    for ann in annotations:
        cx = int(math.floor(ann.box.x_center + 0.5))
        cy = int(math.floor(ann.box.y_center + 0.5))
        if not (0 <= cx < width and 0 <= cy < height):
            clamped_x = min(max(cx, 0), width - 1)
            clamped_y = min(max(cy, 0), height - 1)
            logger.warning(
                "box center (%d, %d) outside %dx%d image; clamped to (%d, %d)",
                cx, cy, width, height, clamped_x, clamped_y,
            )
            cx, cy = clamped_x, clamped_y
        sigma = gaussian_sigma(ann.box.width, ann.box.height, min(height, width),
                               sigma_scale, sigma_min)
        radius = int(math.ceil(3.0 * sigma))
        d = np.arange(-radius, radius + 1, dtype=np.float64)
        kernel = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma**2))
        kernel /= kernel.sum()
        y0, y1 = cy - radius, cy + radius + 1
        x0, x1 = cx - radius, cx + radius + 1
        ky0, kx0 = max(0, -y0), max(0, -x0)
        y0, x0 = max(y0, 0), max(x0, 0)
        y1c, x1c = min(y1, height), min(x1, width)
        full[y0:y1c, x0:x1c] += kernel[
            ky0 : ky0 + (y1c - y0), kx0 : kx0 + (x1c - x0)
        ]
    return full


def make_scale_target(sample: ImageSample, pyramid_shapes: list[tuple[int, int]],
                      sigma_scale: float = 0.1, sigma_min: float = 0.5,
                      dtype: torch.dtype = torch.float32) -> ScaleTargetMap:
    """Per-level targets: the full-resolution heatmap average-pooled to each level.

    Every level is pooled from the original full-resolution map (never from a
    previously pooled level), so targets are independent of level order.
    """
    full = center_heatmap(sample.annotations, sample.height, sample.width,
                          sigma_scale, sigma_min)
    levels = []
    for i, (h_i, w_i) in enumerate(pyramid_shapes):
        if sample.height % h_i or sample.width % w_i:
            raise ShapeError(
                f"level {i} shape {h_i}x{w_i} does not divide image "
                f"{sample.height}x{sample.width}"
            )
        fy, fx = sample.height // h_i, sample.width // w_i
        pooled = full.reshape(h_i, fy, w_i, fx).mean(axis=(1, 3))
        levels.append(torch.as_tensor(pooled, dtype=dtype).unsqueeze(0))
    return ScaleTargetMap(levels=levels)


def scale_comple_loss(predicted, target: ScaleTargetMap) -> Tensor:
    """Mean over levels of the per-level MSE between prediction and target."""
    maps = predicted.scale_maps if isinstance(predicted, ComplementaryOutput) else predicted
    if len(maps) != len(target.levels):
        raise ShapeError(
            f"{len(maps)} predicted levels vs {len(target.levels)} target levels"
        )
    total = None
    for i, (pred, tgt) in enumerate(zip(maps, target.levels)):
        tgt = tgt.to(dtype=pred.dtype, device=pred.device)
        if pred.shape != tgt.shape:
            raise ShapeError(
                f"level {i}: predicted shape {tuple(pred.shape)} vs target "
                f"{tuple(tgt.shape)}"
            )
        level_loss = ((pred - tgt) ** 2).mean()
        total = level_loss if total is None else total + level_loss
    return total / len(maps)


def fuse(pyramid: FeaturePyramid, complement) -> FeaturePyramid:
    """Element-by-element sum of the pyramid and the complement features."""
    features = complement.features if isinstance(complement, ComplementaryOutput) else complement
    if pyramid.num_levels != features.num_levels:
        raise ShapeError(
            f"{pyramid.num_levels} pyramid levels vs {features.num_levels} complement levels"
        )
    fused = []
    for i, (a, b) in enumerate(zip(pyramid.levels, features.levels)):
        if a.shape != b.shape:
            raise ShapeError(
                f"level {i}: pyramid shape {tuple(a.shape)} vs complement "
                f"{tuple(b.shape)}"
            )
        fused.append(a + b)
    return FeaturePyramid(levels=fused, strides=list(pyramid.strides))
