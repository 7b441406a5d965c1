"""Ground-truth scenes to training targets: center heatmap, offsets, width-height, RoI masks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, gaussian_radius

log = logging.getLogger(__name__)

GAUSSIAN_MIN_OVERLAP = 0.7


@dataclass
class DetectionTargets:
    """Downsized training targets for the detection heads.

    heatmap:     (C, H/n, W/n) in [0, 1]
    offsets:     (2, H/n, W/n), channel order (x, y); valid at center cells only
    wh:          (2, H/n, W/n), channel order (w, h) in input-image pixels
    center_mask: (H/n, W/n) bool, True at ground-truth center cells
    """

    heatmap: np.ndarray
    offsets: np.ndarray
    wh: np.ndarray
    center_mask: np.ndarray
    stride: int


@dataclass
class RoIMaskTarget:
    """One instance mask resampled onto the RoI grid of its box."""

    box: Box
    grid: np.ndarray  # (P, P) uint8 in {0, 1}
    empty: bool = field(default=False)


def draw_gaussian(heatmap: np.ndarray, cell: tuple[int, int], radius: float) -> np.ndarray:
    """Stamp a Gaussian peak onto a 2D heatmap by elementwise max, in place.

    `cell` is (row, col); the stamp extends int(radius) cells each way with
    sigma = (2 * int(radius) + 1) / 6, so the value at `cell` is exactly 1.
    """
    row, col = cell
    h, w = heatmap.shape
    if not (0 <= row < h and 0 <= col < w):
        raise ValueError(f"center cell {cell} outside heatmap {heatmap.shape}")
    r = max(0, int(radius))
    sigma = (2 * r + 1) / 6.0
    y, x = np.ogrid[-r:r + 1, -r:r + 1]
    stamp = np.exp(-(x * x + y * y) / (2 * sigma * sigma))

    top, bottom = min(row, r), min(h - 1 - row, r)
    left, right = min(col, r), min(w - 1 - col, r)
    view = heatmap[row - top:row + bottom + 1, col - left:col + right + 1]
    np.maximum(view, stamp[r - top:r + bottom + 1, r - left:r + right + 1], out=view)
    return heatmap


def encode_detection_targets(scene, stride: int, num_classes: int = 1) -> DetectionTargets:
    """Encode a scene's instances into downsized detection targets.

    Center = box midpoint; cell = floor(center / stride); offsets in [0, 1)^2;
    wh in input-image pixels. When two instances land in the same cell the
    larger-area one keeps the regression targets (both stamp Gaussians).
    """
    _, img_h, img_w = scene.image.shape
    out_h, out_w = img_h // stride, img_w // stride
    heatmap = np.zeros((num_classes, out_h, out_w), dtype=np.float64)
    offsets = np.zeros((2, out_h, out_w), dtype=np.float64)
    wh = np.zeros((2, out_h, out_w), dtype=np.float64)
    center_mask = np.zeros((out_h, out_w), dtype=bool)

    # ascending area so larger instances overwrite colliding regression cells
    order = sorted(range(len(scene.boxes)), key=lambda i: scene.boxes[i].area)
    for i in order:
        box = scene.boxes[i]
        if box.area <= 0:
            log.warning("scene %s: skipping zero-area instance %d", scene.id, i)
            continue
        cx, cy = box.center
        if not (0 <= cx < img_w and 0 <= cy < img_h):
            raise ValueError(f"scene {scene.id}: instance {i} center outside image")
        col = int(np.floor(cx / stride))
        row = int(np.floor(cy / stride))
        radius = gaussian_radius(box.height / stride, box.width / stride,
                                 GAUSSIAN_MIN_OVERLAP)
        draw_gaussian(heatmap[0], (row, col), radius)
        offsets[0, row, col] = cx / stride - col
        offsets[1, row, col] = cy / stride - row
        wh[0, row, col] = box.width
        wh[1, row, col] = box.height
        center_mask[row, col] = True

    return DetectionTargets(heatmap, offsets, wh, center_mask, stride)


def encode_roi_mask(instance_mask: np.ndarray, box: Box, grid_size: int) -> RoIMaskTarget:
    """Resample one instance mask to the P x P grid of its box (nearest neighbor)."""
    h, w = instance_mask.shape
    u = (np.arange(grid_size) + 0.5) / grid_size
    xs = box.x1 + u * box.width   # sample point centers, image coordinates
    ys = box.y1 + u * box.height
    cols = np.floor(xs).astype(int)
    rows = np.floor(ys).astype(int)
    valid_c = (cols >= 0) & (cols < w)
    valid_r = (rows >= 0) & (rows < h)

    grid = np.zeros((grid_size, grid_size), dtype=np.uint8)
    if valid_r.any() and valid_c.any():
        rr = rows[valid_r]
        cc = cols[valid_c]
        patch = instance_mask.astype(bool)[np.ix_(rr, cc)]
        grid[np.ix_(valid_r, valid_c)] = patch.astype(np.uint8)

    empty = not bool(grid.any())
    if empty:
        log.debug("empty RoI crop for box %s", box)
    return RoIMaskTarget(box=box, grid=grid, empty=empty)
