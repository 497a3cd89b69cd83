"""PNG heatmaps of raw vs fused pyramid features (and optional scale maps)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from matplotlib import cm
from PIL import Image

from .data import ImageSample
from .detector import ComplementaryDetector


def _to_png(array: np.ndarray, path: Path):
    """Normalize a 2D map to [0, 1] and save it with a fixed colormap."""
    lo, hi = float(array.min()), float(array.max())
    norm = (array - lo) / (hi - lo) if hi > lo else np.zeros_like(array)
    rgba = cm.viridis(norm.astype(np.float64))
    rgb = (rgba[..., :3] * 255.0).round().astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(path)


def feature_heatmaps(model: ComplementaryDetector, sample: ImageSample,
                     out_dir: str | Path, include_scale_maps: bool = False) -> list[Path]:
    """Write per-level channel-energy heatmaps of the raw and fused pyramids.

    Emits 2 files per level (raw_mean_l{i}.png, fused_mean_l{i}.png); with
    ``include_scale_maps`` the decoder's predicted scale map per level is
    written as well. Output bytes are a pure function of (checkpoint, image).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.eval()
    written = []
    with torch.no_grad():
        dtype = next(model.parameters()).dtype
        pixels = torch.as_tensor(sample.pixels, dtype=dtype)
        raw, complement, fused = model.feature_pyramids(pixels)
        for i in range(raw.num_levels):
            raw_map = raw.levels[i].abs().mean(dim=0).double().cpu().numpy()
            fused_map = fused.levels[i].abs().mean(dim=0).double().cpu().numpy()
            raw_path = out / f"raw_mean_l{i}.png"
            fused_path = out / f"fused_mean_l{i}.png"
            _to_png(raw_map, raw_path)
            _to_png(fused_map, fused_path)
            written += [raw_path, fused_path]
            if include_scale_maps and complement is not None:
                sm = complement.scale_maps[i][0].double().cpu().numpy()
                sm_path = out / f"scale_map_l{i}.png"
                _to_png(sm, sm_path)
                written.append(sm_path)
    return written


def fused_energy(model: ComplementaryDetector, sample: ImageSample) -> list[np.ndarray]:
    """Per-level channel-energy maps of the fused pyramid (for contrast checks)."""
    model.eval()
    with torch.no_grad():
        dtype = next(model.parameters()).dtype
        pixels = torch.as_tensor(sample.pixels, dtype=dtype)
        _raw, _complement, fused = model.feature_pyramids(pixels)
        return [lvl.abs().mean(dim=0).double().cpu().numpy() for lvl in fused.levels]
