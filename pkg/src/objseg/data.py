"""Datasets: synthetic clustered-blob scenes, folder ingestion, augmentation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .geometry import Box, tight_box

log = logging.getLogger(__name__)

MIN_INSTANCE_AREA = 9  # px; crop fragments below this are dropped
MASK_BINARIZE_THRESHOLD = 127


class DatasetError(ValueError):
    """Base class for dataset ingestion failures."""


class MissingMasksError(DatasetError):
    pass


class UnreadableImageError(DatasetError):
    pass


class MaskShapeError(DatasetError):
    pass


@dataclass
class Scene:
    """An image with per-instance binary masks and derived tight boxes."""

    image: np.ndarray          # (3, H, W) float32 in [0, 1]
    masks: list[np.ndarray]    # per-instance (H, W) bool
    boxes: list[Box]           # tight boxes, one per mask
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"scene {self.id}: image must be (3, H, W)")
        h, w = self.image.shape[1:]
        if len(self.masks) != len(self.boxes):
            raise ValueError(f"scene {self.id}: {len(self.masks)} masks vs {len(self.boxes)} boxes")
        for k, m in enumerate(self.masks):
            if m.shape != (h, w):
                raise ValueError(f"scene {self.id}: mask {k} shape {m.shape} != image {(h, w)}")
            if not m.any():
                raise ValueError(f"scene {self.id}: mask {k} is empty")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]

    @classmethod
    def from_masks(cls, image: np.ndarray, masks: list[np.ndarray], scene_id: str) -> "Scene":
        return cls(image=image.astype(np.float32),
                   masks=[m.astype(bool) for m in masks],
                   boxes=[tight_box(m) for m in masks],
                   id=scene_id)


@dataclass
class SynthConfig:
    """Deterministic clustered-ellipse generator settings."""

    image_size: int = 128
    min_instances: int = 3
    max_instances: int = 8
    axis_range: tuple[float, float] = (5.0, 14.0)
    protrusion_count: tuple[int, int] = (0, 3)
    protrusion_length: tuple[float, float] = (3.0, 9.0)
    touching_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.touching_fraction <= 1.0:
            raise ValueError("touching_fraction must lie in [0, 1]")
        if self.min_instances < 1 or self.max_instances < self.min_instances:
            raise ValueError("bad instance count range")


def _blob_mask(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    """Rasterize one ellipse with protrusions on a local odd-sized patch."""
    a = rng.uniform(*cfg.axis_range)
    b = rng.uniform(*cfg.axis_range)
    theta = rng.uniform(0.0, np.pi)
    n_prot = int(rng.integers(cfg.protrusion_count[0], cfg.protrusion_count[1] + 1))
    reach = max(a, b) + (cfg.protrusion_length[1] if n_prot else 0.0)
    r = int(np.ceil(reach)) + 1
    y, x = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)

    ct, st = np.cos(theta), np.sin(theta)
    u = x * ct + y * st
    v = -x * st + y * ct
    mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0

    for _ in range(n_prot):
        phi = rng.uniform(0.0, 2 * np.pi)
        # boundary point of the rotated ellipse in the patch frame
        bx = a * np.cos(phi) * ct - b * np.sin(phi) * st
        by = a * np.cos(phi) * st + b * np.sin(phi) * ct
        length = rng.uniform(*cfg.protrusion_length)
        thickness = rng.uniform(1.2, 2.2)
        norm = np.hypot(bx, by)
        dx, dy = bx / norm, by / norm
        ex, ey = bx + dx * length, by + dy * length
        # capsule: distance from each pixel to the segment (bx,by)-(ex,ey)
        px, py = x - bx, y - by
        sx, sy = ex - bx, ey - by
        t = np.clip((px * sx + py * sy) / (sx * sx + sy * sy), 0.0, 1.0)
        dist = np.hypot(px - t * sx, py - t * sy)
        mask |= dist <= thickness

    return mask


def _crop_to_content(mask: np.ndarray) -> np.ndarray:
    rows, cols = np.nonzero(mask)
    return mask[rows.min():rows.max() + 1, cols.min():cols.max() + 1]


def _paste(canvas_shape: tuple[int, int], patch: np.ndarray, top: int, left: int) -> np.ndarray | None:
    """Place a patch on a zero canvas; None when it would leave the canvas."""
    h, w = canvas_shape
    ph, pw = patch.shape
    if top < 0 or left < 0 or top + ph > h or left + pw > w:
        return None
    out = np.zeros(canvas_shape, dtype=bool)
    out[top:top + ph, left:left + pw] = patch
    return out


def _boxes_separated(a: Box, b: Box, gap: float = 1.0) -> bool:
    return (b.x1 - a.x2 >= gap or a.x1 - b.x2 >= gap
            or b.y1 - a.y2 >= gap or a.y1 - b.y2 >= gap)


def _dilate(mask: np.ndarray) -> np.ndarray:
    return ndimage.binary_dilation(mask, structure=np.ones((3, 3), dtype=bool))


def _separated_from_all(mask: np.ndarray, others: list[np.ndarray], skip: int = -1) -> bool:
    box = tight_box(mask)
    for j, other in enumerate(others):
        if j == skip:
            continue
        if not _boxes_separated(box, tight_box(other)):
            return False
    return True


def generate_scene(cfg: SynthConfig, index: int) -> Scene:
    """Generate one deterministic scene of clustered ellipse blobs.

    `touching_fraction` of the instances are placed in contact pairs; every
    other pair of instances keeps a tight-box gap of at least one pixel.
    """
    rng = np.random.default_rng((cfg.seed, index))
    size = cfg.image_size
    margin = 2
    count = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    n_pairs = int(round(cfg.touching_fraction * count / 2.0))

    masks: list[np.ndarray] = []

    def place_single(patch: np.ndarray, attempts: int = 60) -> np.ndarray | None:
        ph, pw = patch.shape
        if size - margin - ph <= margin or size - margin - pw <= margin:
            return None
        for _ in range(attempts):
            top = int(rng.integers(margin, size - margin - ph))
            left = int(rng.integers(margin, size - margin - pw))
            cand = _paste((size, size), patch, top, left)
            if cand is not None and _separated_from_all(cand, masks):
                return cand
        return None

    def place_touching(anchor: np.ndarray, patch: np.ndarray, attempts: int = 12) -> np.ndarray | None:
        ab = tight_box(anchor)
        acy, acx = (ab.y1 + ab.y2) / 2, (ab.x1 + ab.x2) / 2
        dil = _dilate(anchor)
        ph, pw = patch.shape
        anchor_idx = len(masks) - 1  # anchor appended just before this call
        d_start = int(np.ceil(np.hypot(ab.width, ab.height) / 2 + np.hypot(ph, pw) / 2)) + 2
        for _ in range(attempts):
            ang = rng.uniform(0.0, 2 * np.pi)
            dy, dx = np.sin(ang), np.cos(ang)
            for d in range(d_start, 0, -1):
                top = int(round(acy + dy * d - ph / 2))
                left = int(round(acx + dx * d - pw / 2))
                cand = _paste((size, size), patch, top, left)
                if cand is None or (cand & anchor).sum() > 0.25 * min(cand.sum(), anchor.sum()):
                    break  # off-canvas or marched too deep
                if (dil & cand).any():
                    if _separated_from_all(cand, masks, skip=anchor_idx):
                        return cand
                    break
        return None

    placed_pairs = 0
    while placed_pairs < n_pairs and len(masks) + 2 <= count:
        anchor = place_single(_crop_to_content(_blob_mask(rng, cfg)))
        if anchor is None:
            break
        masks.append(anchor)
        partner = place_touching(anchor, _crop_to_content(_blob_mask(rng, cfg)))
        if partner is None:
            masks.pop()
            break
        masks.append(partner)
        placed_pairs += 1

    while len(masks) < count:
        single = place_single(_crop_to_content(_blob_mask(rng, cfg)))
        if single is None:
            log.warning("scene %d: packed only %d of %d instances", index, len(masks), count)
            break
        masks.append(single)

    image = _render(rng, masks, size)
    return Scene.from_masks(image, masks, f"synth-{cfg.seed}-{index:05d}")


def _render(rng: np.random.Generator, masks: list[np.ndarray], size: int) -> np.ndarray:
    img = rng.normal(0.12, 0.03, (size, size))
    for m in masks:
        level = rng.uniform(0.45, 0.9)
        tex = level + rng.normal(0.0, 0.04, (size, size))
        img[m] = tex[m]
    img = ndimage.gaussian_filter(img, sigma=0.6)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return np.repeat(img[None], 3, axis=0)


def generate_dataset(cfg: SynthConfig, count: int, start_index: int = 0) -> list[Scene]:
    return [generate_scene(cfg, start_index + i) for i in range(count)]


def has_touching_pair(scene: Scene) -> bool:
    """True when any two instance masks are 8-adjacent or overlap."""
    for i in range(len(scene.masks)):
        dil = _dilate(scene.masks[i])
        for j in range(i + 1, len(scene.masks)):
            if (dil & scene.masks[j]).any():
                return True
    return False


class FolderDataset:
    """Lazily loaded scenes from `root/<id>/images/<id>.png` + `root/<id>/masks/*.png`."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DatasetError(f"dataset root {self.root} is not a directory")
        self.ids = sorted(p.name for p in self.root.iterdir() if p.is_dir())
        if not self.ids:
            raise DatasetError(f"dataset root {self.root} contains no scene directories")

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> Scene:
        return load_scene(self.root, self.ids[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, UnidentifiedImageError) as e:
        raise UnreadableImageError(f"cannot read image {path}: {e}") from e


def load_scene(root: str | Path, scene_id: str) -> Scene:
    scene_dir = Path(root) / scene_id
    image_files = sorted((scene_dir / "images").glob("*")) if (scene_dir / "images").is_dir() else []
    if not image_files:
        raise UnreadableImageError(f"scene {scene_id}: no image file under {scene_dir / 'images'}")
    rgb = _read_image(image_files[0])
    h, w = rgb.shape[:2]

    masks_dir = scene_dir / "masks"
    if not masks_dir.is_dir():
        raise MissingMasksError(f"scene {scene_id}: missing masks directory {masks_dir}")
    masks = []
    for mask_path in sorted(masks_dir.glob("*")):
        try:
            with Image.open(mask_path) as im:
                raw = np.asarray(im.convert("L"))
        except (OSError, UnidentifiedImageError) as e:
            raise UnreadableImageError(f"scene {scene_id}: cannot read mask {mask_path}: {e}") from e
        if raw.shape != (h, w):
            raise MaskShapeError(
                f"scene {scene_id}: mask {mask_path.name} shape {raw.shape} != image {(h, w)}")
        mask = raw > MASK_BINARIZE_THRESHOLD
        if not mask.any():
            log.warning("scene %s: dropping empty mask %s", scene_id, mask_path.name)
            continue
        masks.append(mask)

    image = rgb.astype(np.float32).transpose(2, 0, 1) / 255.0
    return Scene.from_masks(image, masks, scene_id)


def save_folder_dataset(scenes: list[Scene], root: str | Path) -> None:
    """Write scenes in the ingestion folder layout (8-bit PNGs)."""
    root = Path(root)
    for scene in scenes:
        img_dir = root / scene.id / "images"
        mask_dir = root / scene.id / "masks"
        img_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)
        rgb = (scene.image.transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
        Image.fromarray(rgb).save(img_dir / f"{scene.id}.png")
        for k, m in enumerate(scene.masks):
            Image.fromarray((m.astype(np.uint8)) * 255).save(mask_dir / f"{k:03d}.png")


def crop_scene(scene: Scene, top: int, left: int, height: int, width: int,
               out_height: int, out_width: int) -> Scene:
    """Crop a window and paste it at the top-left of a zero canvas.

    Instances clipped by the window are dropped below MIN_INSTANCE_AREA.
    """
    image = np.zeros((3, out_height, out_width), dtype=np.float32)
    image[:, :height, :width] = scene.image[:, top:top + height, left:left + width]
    masks = []
    for m in scene.masks:
        cut = np.zeros((out_height, out_width), dtype=bool)
        cut[:height, :width] = m[top:top + height, left:left + width]
        if cut.sum() >= MIN_INSTANCE_AREA:
            masks.append(cut)
    return Scene.from_masks(image, masks, scene.id)


def flip_scene(scene: Scene, axis: str) -> Scene:
    """Flip a scene horizontally ('h', left-right) or vertically ('v', up-down)."""
    ax = {"h": 2, "v": 1}[axis]
    image = np.flip(scene.image, axis=ax).copy()
    masks = [np.flip(m, axis=ax - 1).copy() for m in scene.masks]
    return Scene.from_masks(image, masks, scene.id)


def letterbox(scene: Scene, out_height: int, out_width: int) -> Scene:
    """Zero-pad to the target resolution; larger scenes are top-left cropped."""
    h, w = scene.shape
    if h > out_height or w > out_width:
        log.warning("scene %s: %dx%d exceeds %dx%d, cropping", scene.id, h, w, out_height, out_width)
    ch, cw = min(h, out_height), min(w, out_width)
    return crop_scene(scene, 0, 0, ch, cw, out_height, out_width)


def augment(scene: Scene, rng: np.random.Generator, out_height: int, out_width: int,
            crop_scale: tuple[float, float] = (0.6, 1.0)) -> Scene:
    """Random crop to the training resolution, then independent h/v flips."""
    h, w = scene.shape
    s = rng.uniform(*crop_scale)
    win_h = min(h, max(MIN_INSTANCE_AREA, int(round(s * out_height))))
    win_w = min(w, max(MIN_INSTANCE_AREA, int(round(s * out_width))))
    top = int(rng.integers(0, h - win_h + 1))
    left = int(rng.integers(0, w - win_w + 1))
    out = crop_scene(scene, top, left, win_h, win_w, out_height, out_width)
    if rng.random() < 0.5:
        out = flip_scene(out, "h")
    if rng.random() < 0.5:
        out = flip_scene(out, "v")
    return out
