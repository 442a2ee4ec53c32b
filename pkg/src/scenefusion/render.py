"""BEV visualization export: channel-norm maps of the fusion stages, the
centerness heatmap, and gt/prediction box overlays.

Maps are rasterized one BEV cell per pixel: grid cell (row, col) lands at
image pixel (row, col).
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np
import torch
from matplotlib import colormaps

from .detection import Box3D
from .model import FusionDetector, ModelOutput
from .synthscene import Scene

MAP_NAMES = ("bf", "bpf", "bhatf", "heatmap")
UPSCALE = 4  # pixels per BEV cell in the written file


class UnknownMapError(ValueError):
    def __init__(self, name: str):
        super().__init__(f"unknown map {name!r}; valid names: {', '.join(MAP_NAMES)}")


def channel_norm(grid: torch.Tensor) -> np.ndarray:
    """(W, H, C) feature map -> (W, H) per-cell L2 norm."""
    return torch.linalg.vector_norm(grid.double(), dim=-1).numpy()


def extract_map(output: ModelOutput, name: str) -> np.ndarray:
    if name == "bf":
        return channel_norm(output.b_conv.grid)
    if name == "bpf":
        return channel_norm(output.b_fused.grid)
    if name == "bhatf":
        return channel_norm(output.b_final.grid)
    if name == "heatmap":
        hm = output.igf_heatmap if output.igf_heatmap is not None else output.aux_heatmap
        return torch.sigmoid(hm.logits).max(dim=0).values.numpy()
    raise UnknownMapError(name)


def colorize(data: np.ndarray, cmap: str = "viridis") -> tuple[np.ndarray, float, float]:
    """Scalar (W, H) map -> (W, H, 3) uint8 RGB plus the color scale bounds.
    A constant map renders uniformly at the low end of the colormap."""
    vmin, vmax = float(data.min()), float(data.max())
    scale = vmax - vmin
    norm = (data - vmin) / scale if scale > 0 else np.zeros_like(data)
    rgb = colormaps[cmap](norm)[..., :3]
    return (rgb * 255).astype(np.uint8), vmin, vmax


def _draw_boxes(img: np.ndarray, boxes: list[Box3D], spec, color) -> None:
    for box in boxes:
        corners = box.bev_corners().numpy()
        rows = (corners[:, 0] - spec.x_range[0]) / spec.cell_size
        cols = (corners[:, 1] - spec.y_range[0]) / spec.cell_size
        poly = np.stack([cols, rows], axis=1) * UPSCALE  # cv2 uses (x=col, y=row)
        cv2.polylines(img, [np.round(poly).astype(np.int32)], True, color, 1)


def render_bev(model: FusionDetector, scene: Scene, map_names: list[str],
               out_dir: str | Path, overlay_boxes: bool = True,
               pred_score: float = 0.3) -> list[Path]:
    """Render one raster per requested map plus a sidecar text file with the
    color scale. Predictions are drawn in gray, ground truths in green."""
    for name in map_names:
        if name not in MAP_NAMES:
            raise UnknownMapError(name)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        output = model(scene)
    written = []
    for name in map_names:
        data = extract_map(output, name)
        rgb, vmin, vmax = colorize(data)
        img = np.repeat(np.repeat(rgb, UPSCALE, axis=0), UPSCALE, axis=1).copy()
        if overlay_boxes:
            _draw_boxes(img, scene.gt, model.bev_spec, (0, 255, 0))
            preds = [b for b in output.detections.boxes if (b.score or 0) >= pred_score]
            _draw_boxes(img, preds, model.bev_spec, (128, 128, 128))
        path = out_dir / f"{name}.png"
        cv2.imwrite(str(path), img[..., ::-1])  # RGB -> BGR for OpenCV
        (out_dir / f"{name}.txt").write_text(
            f"map = {name}\ncolormap = viridis\nvmin = {vmin!r}\nvmax = {vmax!r}\n"
            f"pixels_per_cell = {UPSCALE}\n"
            "orientation = BEV cell (row, col) maps to the pixel block at "
            f"(row*{UPSCALE}, col*{UPSCALE})\n")
        written.append(path)
    return written
