"""Raw head outputs to instances: max-pool NMS, top-K peaks, box assembly, mask pasting."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import Box

log = logging.getLogger(__name__)

DEFAULT_TOP_K = 100
DEFAULT_SCORE_THRESH = 0.3
DEFAULT_MASK_THRESH = 0.5


@dataclass(frozen=True)
class Detection:
    """A scored box in input-image coordinates."""

    box: Box
    score: float
    class_id: int
    center_cell: tuple[int, int]  # (row, col) in the downsized grid

    def __post_init__(self):
        if not 0.0 < self.score <= 1.0:
            raise ValueError(f"score {self.score} outside (0, 1]")


@dataclass
class InstanceResult:
    """A detection plus its full-resolution binary mask."""

    detection: Detection
    mask: np.ndarray


def nms_maxpool(heatmap: np.ndarray) -> np.ndarray:
    """Keep cells equal to their 3x3 neighborhood max, zero the rest.

    Works on (H, W) or (C, H, W) maps; ties keep all tied cells.
    """
    squeeze = heatmap.ndim == 2
    maps = heatmap[None] if squeeze else heatmap
    padded = np.pad(maps, ((0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    neighborhood = np.full_like(maps, -np.inf)
    for dr in (0, 1, 2):
        for dc in (0, 1, 2):
            np.maximum(neighborhood, padded[:, dr:dr + maps.shape[1], dc:dc + maps.shape[2]],
                       out=neighborhood)
    out = np.where(maps == neighborhood, maps, 0.0)
    return out[0] if squeeze else out


def topk_decode(heatmap: np.ndarray, offsets: np.ndarray, wh: np.ndarray, stride: int,
                top_k: int = DEFAULT_TOP_K, score_thresh: float = DEFAULT_SCORE_THRESH,
                image_shape: tuple[int, int] | None = None) -> list[Detection]:
    """Gather the K best surviving peaks and assemble offset-corrected boxes.

    heatmap (C, Hn, Wn); offsets/wh (2, Hn, Wn) with channel order (x, y) and
    (w, h). Boxes are clamped to `image_shape` (defaults to the upsampled grid).
    """
    heatmap = np.asarray(heatmap, dtype=np.float64)
    c, grid_h, grid_w = heatmap.shape
    img_h, img_w = image_shape if image_shape is not None else (grid_h * stride, grid_w * stride)

    peaks = nms_maxpool(heatmap)
    cls, rows, cols = np.nonzero((peaks >= score_thresh) & (peaks > 0.0))
    if cls.size == 0:
        return []
    scores = peaks[cls, rows, cols]
    # deterministic order: score desc, then row, col, class
    order = np.lexsort((cls, cols, rows, -scores))[:top_k]

    detections = []
    for idx in order:
        ch, row, col = int(cls[idx]), int(rows[idx]), int(cols[idx])
        cx = (col + offsets[0, row, col]) * stride
        cy = (row + offsets[1, row, col]) * stride
        w = max(0.0, float(wh[0, row, col]))
        h = max(0.0, float(wh[1, row, col]))
        box = Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2).clip(img_w, img_h)
        detections.append(Detection(box=box, score=float(scores[idx]),
                                    class_id=ch, center_cell=(row, col)))
    return detections


def _bilinear_resize(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers and edge clamping."""
    in_h, in_w = grid.shape
    ys = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.clip(y0 + 1, 0, in_h - 1)
    x1 = np.clip(x0 + 1, 0, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - wx) + grid[np.ix_(y0, x1)] * wx
    bottom = grid[np.ix_(y1, x0)] * (1 - wx) + grid[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bottom * wy


def paste_masks(detections: list[Detection], roi_grids: np.ndarray,
                image_shape: tuple[int, int],
                mask_thresh: float = DEFAULT_MASK_THRESH) -> list[InstanceResult]:
    """Resize each P x P probability grid into its box and thresholdapply.

    Masks stay independent per instance; detections whose clamped box covers
    no whole pixel are dropped with a warning.
    """
    if len(detections) != len(roi_grids):
        raise ValueError(f"{len(detections)} detections vs {len(roi_grids)} grids")
    img_h, img_w = image_shape
    results = []
    for det, grid in zip(detections, roi_grids):
        grid = np.asarray(grid, dtype=np.float64)
        if grid.ndim == 3:  # (1, P, P)
            grid = grid[0]
        box = det.box.clip(img_w, img_h)
        x0, y0 = int(round(box.x1)), int(round(box.y1))
        x1, y1 = int(round(box.x2)), int(round(box.y2))
        if x1 <= x0 or y1 <= y0:
            log.warning("dropping detection with empty pixel extent: %s", det.box)
            continue
        resized = _bilinear_resize(grid, y1 - y0, x1 - x0)
        mask = np.zeros((img_h, img_w), dtype=bool)
        mask[y0:y1, x0:x1] = resized >= mask_thresh
        if not mask.any():
            log.debug("pasted mask is empty for detection at %s", det.box)
        results.append(InstanceResult(detection=det, mask=mask))
    return results
