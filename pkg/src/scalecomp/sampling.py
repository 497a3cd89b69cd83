"""Shared bilinear sampling primitives (deformable attention, ROI pooling)."""

from __future__ import annotations

import numpy as np
import torch
from torch import Tensor

from .encoder import FeaturePyramid


def bilinear_gather(values: Tensor, x: Tensor, y: Tensor) -> Tensor:
    """Sample [B, G, D, H, W] maps at continuous index coords.

    ``x``/``y`` are [B, G, S] coordinates in index space (pixel i center sits
    at coordinate i); out-of-range samples clamp to the border. Returns
    [B, G, S, D]. Differentiable in both the values and the coordinates.
    """
    b, g, d, h, w = values.shape
    x = x.clamp(0.0, w - 1.0)
    y = y.clamp(0.0, h - 1.0)
    x0 = x.floor()
    y0 = y.floor()
    fx = x - x0
    fy = y - y0
    x0l = x0.long()
    y0l = y0.long()
    x1l = (x0l + 1).clamp(max=w - 1)
    y1l = (y0l + 1).clamp(max=h - 1)

    flat = values.flatten(-2).permute(0, 1, 3, 2)  # [B, G, H*W, D]
    idx = torch.cat(
        [y0l * w + x0l, y0l * w + x1l, y1l * w + x0l, y1l * w + x1l], dim=2
    ).unsqueeze(-1).expand(-1, -1, -1, d)
    v00, v01, v10, v11 = flat.gather(2, idx).chunk(4, dim=2)
    fx = fx.unsqueeze(-1)
    fy = fy.unsqueeze(-1)
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy


def roi_align(feature: Tensor, boxes: np.ndarray, stride: int, output_size: int) -> Tensor:
    """Align-style pooling of center-format boxes from one [C, H, W] level.

    Each of the output_size^2 bins is bilinearly sampled at its center.
    Returns [N, C, output_size, output_size].
    """
    c, h, w = feature.shape
    n = len(boxes)
    p = output_size
    if n == 0:
        return feature.new_zeros(0, c, p, p)
    arr = torch.as_tensor(np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
                          dtype=feature.dtype, device=feature.device)
    x1 = (arr[:, 0] - arr[:, 2] / 2) / stride
    y1 = (arr[:, 1] - arr[:, 3] / 2) / stride
    bw = arr[:, 2] / stride
    bh = arr[:, 3] / stride
    steps = (torch.arange(p, dtype=feature.dtype, device=feature.device) + 0.5) / p
    # Bin centers in continuous coords, shifted to index space by -0.5.
    xs = x1[:, None] + steps[None, :] * bw[:, None] - 0.5  # [N, P]
    ys = y1[:, None] + steps[None, :] * bh[:, None] - 0.5
    grid_x = xs[:, None, :].expand(n, p, p).reshape(1, 1, -1)
    grid_y = ys[:, :, None].expand(n, p, p).reshape(1, 1, -1)
    out = bilinear_gather(feature.unsqueeze(0).unsqueeze(0), grid_x, grid_y)
    return out.reshape(n, p, p, c).permute(0, 3, 1, 2)


def assign_pyramid_levels(boxes: np.ndarray, num_levels: int,
                          finest_scale: float = 16.0) -> np.ndarray:
    """Map each box to a pyramid level by its sqrt-area, coarser for larger."""
    arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scale = np.sqrt(np.clip(arr[:, 2] * arr[:, 3], 1e-12, None))
    lvl = np.floor(np.log2(scale / finest_scale + 1e-9))
    return np.clip(lvl, 0, num_levels - 1).astype(np.int64)


def roi_align_pyramid(pyramid: FeaturePyramid, boxes: np.ndarray,
                      output_size: int, finest_scale: float = 16.0) -> Tensor:
    """Pool boxes from the pyramid level matching their scale."""
    arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    levels = assign_pyramid_levels(arr, pyramid.num_levels, finest_scale)
    ref = pyramid.levels[0]
    out = ref.new_zeros(len(arr), pyramid.channels, output_size, output_size)
    for li in range(pyramid.num_levels):
        idx = np.nonzero(levels == li)[0]
        if len(idx) == 0:
            continue
        pooled = roi_align(pyramid.levels[li], arr[idx], pyramid.strides[li],
                           output_size)
        out[torch.as_tensor(idx, device=ref.device)] = pooled
    return out
