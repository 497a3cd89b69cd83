"""Tiny convolutional backbone plus top-down pyramid fusion.

Produces M feature maps with a shared channel count at strictly increasing
strides; every downstream module consumes this pyramid.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .errors import ShapeError


@dataclass
class FeaturePyramid:
    """Multi-scale feature maps, levels[i] of shape [..., C, H_i, W_i]."""

    levels: list[Tensor]
    strides: list[int]

    def __post_init__(self):
        if len(self.levels) != len(self.strides):
            raise ShapeError(
                f"{len(self.levels)} levels but {len(self.strides)} strides"
            )
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ShapeError(f"strides must be strictly increasing: {self.strides}")
        channels = {lvl.shape[-3] for lvl in self.levels}
        if len(channels) > 1:
            raise ShapeError(f"pyramid levels disagree on channel count: {channels}")

    @property
    def channels(self) -> int:
        return self.levels[0].shape[-3]

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def spatial_shapes(self) -> list[tuple[int, int]]:
        return [tuple(lvl.shape[-2:]) for lvl in self.levels]


def _conv_bn_relu(cin: int, cout: int, kernel: int = 3, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(cout, momentum=0.1),
        nn.ReLU(inplace=True),
    )


class PyramidEncoder(nn.Module):
    """Three stride-2 stages and a lateral/top-down fusion neck.

    Input spatial dims must be divisible by the largest stride so that every
    level has exact integer size H/stride x W/stride.
    """

    def __init__(self, channels: int = 32, strides: tuple[int, ...] = (4, 8, 16),
                 in_channels: int = 3):
        super().__init__()
        if tuple(strides) != (4, 8, 16):
            raise ShapeError(f"encoder supports strides (4, 8, 16), got {strides}")
        self.channels = channels
        self.strides = list(strides)
        widths = (channels, int(channels * 1.5), channels * 2)
        self.stem = nn.Sequential(
            _conv_bn_relu(in_channels, channels // 2, stride=2),
            _conv_bn_relu(channels // 2, widths[0], stride=2),
        )
        self.stage2 = nn.Sequential(
            _conv_bn_relu(widths[0], widths[1], stride=2),
            _conv_bn_relu(widths[1], widths[1]),
        )
        self.stage3 = nn.Sequential(
            _conv_bn_relu(widths[1], widths[2], stride=2),
            _conv_bn_relu(widths[2], widths[2]),
        )
        self.lateral = nn.ModuleList(
            [nn.Conv2d(w, channels, 1) for w in widths]
        )
        self.smooth = nn.ModuleList(
            [nn.Conv2d(channels, channels, 3, padding=1) for _ in widths]
        )

    def forward(self, pixels: Tensor) -> FeaturePyramid:
        squeeze = pixels.dim() == 3
        if squeeze:
            pixels = pixels.unsqueeze(0)
        if pixels.dim() != 4:
            raise ShapeError(f"expected [3,H,W] or [B,3,H,W] input, got {tuple(pixels.shape)}")
        h, w = pixels.shape[-2:]
        largest = self.strides[-1]
        if h % largest or w % largest:
            raise ShapeError(
                f"input {h}x{w} not divisible by the largest stride {largest}"
            )
        c1 = self.stem(pixels)
        c2 = self.stage2(c1)
        c3 = self.stage3(c2)
        p3 = self.lateral[2](c3)
        p2 = self.lateral[1](c2) + nn.functional.interpolate(p3, scale_factor=2.0, mode="nearest")
        p1 = self.lateral[0](c1) + nn.functional.interpolate(p2, scale_factor=2.0, mode="nearest")
        levels = [self.smooth[0](p1), self.smooth[1](p2), self.smooth[2](p3)]
        if squeeze:
            levels = [lvl.squeeze(0) for lvl in levels]
        return FeaturePyramid(levels=levels, strides=list(self.strides))


def encode(pixels, encoder: PyramidEncoder) -> FeaturePyramid:
    """Run the encoder on [3, H, W] pixels (numpy or tensor)."""
    if not isinstance(pixels, Tensor):
        pixels = torch.as_tensor(pixels)
    param = next(encoder.parameters())
    return encoder(pixels.to(dtype=param.dtype, device=param.device))


def check_finite_params(module: nn.Module):
    """Raise if any parameter or buffer contains a nonfinite value."""
    for name, value in list(module.named_parameters()) + list(module.named_buffers()):
        if value.is_floating_point() and not torch.isfinite(value).all():
            raise ShapeError(f"nonfinite values in parameter '{name}'")
