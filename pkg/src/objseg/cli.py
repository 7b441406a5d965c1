"""Command-line entry points: train, eval, infer, synth."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image, UnidentifiedImageError

from .data import (
    DatasetError,
    FolderDataset,
    Scene,
    SynthConfig,
    augment,
    generate_dataset,
    letterbox,
    save_folder_dataset,
)
from .decode import InstanceResult, paste_masks, topk_decode
from .encoding import encode_detection_targets, encode_roi_mask
from .geometry import Box
from .losses import focal_loss, keypoint_l1_loss, mask_bce_loss, total_loss
from .metrics import evaluate, match_dump
from .model import ModelConfig, ObjSegModel, load_checkpoint, save_checkpoint
from .rle import encode_rle

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_INTERNAL_ERROR = 2

SEED_ENV_VAR = "OBJSEG_SEED"


@dataclass
class RunConfig:
    """One run's full configuration; defaults follow the training recipe."""

    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: str = "adam"
    learning_rate: float = 1.25e-4
    epochs: int = 100
    patience: int = 10
    min_improvement: float = 1e-4
    batch_size: int = 8
    input_size: int = 512
    dataset: str | None = None          # folder root; None -> synthetic scenes
    synth: SynthConfig = field(default_factory=SynthConfig)
    train_count: int = 200              # synthetic split sizes
    val_count: int = 50
    val_fraction: float = 0.2           # folder datasets: tail share for validation
    out_dir: str = "runs/default"
    seed: int | None = None             # None -> $OBJSEG_SEED -> 0
    top_k: int = 100
    score_thresh: float = 0.3
    mask_thresh: float = 0.5
    box_jitter: float = 0.05
    offset_weight: float = 1.0
    wh_weight: float = 0.1
    mask_weight: float = 1.0
    overwrite: bool = False

    def __post_init__(self):
        if self.input_size % 32:
            raise ValueError(f"input_size {self.input_size} must be divisible by 32")
        if self.optimizer not in ("adam", "adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.seed is None:
            self.seed = int(os.environ.get(SEED_ENV_VAR, 0))


def _set_nested(tree: dict, dotted: str, value):
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        if k not in node or not isinstance(node[k], dict):
            raise ValueError(f"unknown config section {dotted!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ValueError(f"unknown config key {dotted!r}")
    node[keys[-1]] = value


def _merge(base: dict, extra: dict, prefix=""):
    for k, v in extra.items():
        if k not in base:
            raise ValueError(f"unknown config key {prefix}{k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, prefix=f"{prefix}{k}.")
        else:
            base[k] = v


def load_run_config(config_path: str | None, overrides: list[str]) -> RunConfig:
    """Defaults, then the YAML config file, then dotted key=value overrides."""
    tree = asdict(RunConfig(seed=0))
    tree["seed"] = None
    if config_path:
        text = Path(config_path).read_text()
        loaded = yaml.safe_load(text) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"config file {config_path} must hold a mapping")
        _merge(tree, loaded)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        _set_nested(tree, key.strip(), yaml.safe_load(raw))
    try:
        model = ModelConfig(**tree.pop("model"))
        synth = SynthConfig(**tree.pop("synth"))
        return RunConfig(model=model, synth=synth, **tree)
    except TypeError as e:
        raise ValueError(f"bad configuration: {e}") from e


def dump_run_config(cfg: RunConfig, path: Path) -> None:
    path.write_text(yaml.safe_dump(asdict(cfg), sort_keys=False))


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def _load_split(cfg: RunConfig) -> tuple[list[Scene], list[Scene]]:
    if cfg.dataset:
        ds = FolderDataset(cfg.dataset)
        scenes = list(ds)
        n_val = max(1, int(round(cfg.val_fraction * len(scenes))))
        if len(scenes) <= n_val:
            raise DatasetError(f"dataset {cfg.dataset} too small for a validation split")
        return scenes[:-n_val], scenes[-n_val:]
    train = generate_dataset(cfg.synth, cfg.train_count)
    val = generate_dataset(cfg.synth, cfg.val_count, start_index=cfg.train_count)
    return train, val


def evaluation_scenes_for(cfg: RunConfig) -> list[Scene]:
    """The evaluation split: the synthetic hold-out range, or the whole folder."""
    if cfg.dataset:
        return list(FolderDataset(cfg.dataset))
    return generate_dataset(cfg.synth, cfg.val_count, start_index=cfg.train_count)


def jitter_box(box: Box, rng: np.random.Generator, frac: float,
               image_shape: tuple[int, int]) -> Box:
    """Randomly scale and shift a box by up to +-frac, clamped to the image."""
    h, w = image_shape
    bw, bh = box.width, box.height
    cx, cy = box.center
    cx += rng.uniform(-frac, frac) * bw
    cy += rng.uniform(-frac, frac) * bh
    bw *= 1.0 + rng.uniform(-frac, frac)
    bh *= 1.0 + rng.uniform(-frac, frac)
    out = Box(cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2).clip(w, h)
    if out.width < 2 or out.height < 2:
        return box.clip(w, h)
    return out


def _batch_loss(model: ObjSegModel, scenes: list[Scene], cfg: RunConfig,
                rng: np.random.Generator | None):
    """Joint detection + segmentation loss for one batch of same-size scenes.

    rng enables the training-time box jitter; None means ground-truth boxes
    (validation).
    """
    mc = cfg.model
    images = torch.from_numpy(np.stack([s.image for s in scenes]))
    targets = [encode_detection_targets(s, mc.stride, mc.num_classes) for s in scenes]
    heat_t = torch.from_numpy(np.stack([t.heatmap for t in targets]).astype(np.float32))
    off_t = torch.from_numpy(np.stack([t.offsets for t in targets]).astype(np.float32))
    wh_t = torch.from_numpy(np.stack([t.wh for t in targets]).astype(np.float32))
    center_t = torch.from_numpy(np.stack([t.center_mask for t in targets]))

    out = model.forward_detection(images)
    hm_loss = focal_loss(out["heatmap"], heat_t)
    off_loss = keypoint_l1_loss(out["offsets"], off_t, center_t)
    wh_loss = keypoint_l1_loss(out["wh"], wh_t, center_t)

    boxes, batch_idx, grids = [], [], []
    for bi, scene in enumerate(scenes):
        for mask, box in zip(scene.masks, scene.boxes):
            roi_box = jitter_box(box, rng, cfg.box_jitter, scene.shape) if rng is not None else box
            boxes.append(roi_box.as_array())
            batch_idx.append(bi)
            grids.append(encode_roi_mask(mask, roi_box, mc.roi_grid).grid)
    if boxes:
        pred_grids = model.forward_segmentation(
            np.stack(boxes), out["encoder_feats"], out["object_feats"],
            batch_index=torch.tensor(batch_idx))
        target_grids = torch.from_numpy(np.stack(grids).astype(np.float32)).unsqueeze(1)
        m_loss = mask_bce_loss(pred_grids, target_grids)
    else:
        m_loss = images.sum() * 0.0
    return total_loss(hm_loss, off_loss, wh_loss, m_loss,
                      offset_weight=cfg.offset_weight, wh_weight=cfg.wh_weight,
                      mask_weight=cfg.mask_weight)


def _validation_loss(model: ObjSegModel, scenes: list[Scene], cfg: RunConfig) -> float:
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(scenes), cfg.batch_size):
            batch = [letterbox(s, cfg.input_size, cfg.input_size)
                     for s in scenes[start:start + cfg.batch_size]]
            loss = _batch_loss(model, batch, cfg, rng=None)
            total += float(loss.total) * len(batch)
            count += len(batch)
    return total / max(count, 1)


def _make_optimizer(cfg: RunConfig, model: ObjSegModel):
    opts = {"adam": torch.optim.Adam, "adamw": torch.optim.AdamW, "sgd": torch.optim.SGD}
    return opts[cfg.optimizer](model.parameters(), lr=cfg.learning_rate)


def run_train(cfg: RunConfig) -> Path:
    """Train jointly on the combined objective; returns the checkpoint path."""
    out = Path(cfg.out_dir)
    checkpoint = out / "checkpoint.pt"
    if checkpoint.exists() and not cfg.overwrite:
        raise ValueError(f"{checkpoint} exists; pass overwrite=true to replace it")
    out.mkdir(parents=True, exist_ok=True)

    _seed_everything(cfg.seed)
    train_scenes, val_scenes = _load_split(cfg)
    if not train_scenes:
        raise DatasetError("training split is empty")
    log.info("training on %d scenes, validating on %d", len(train_scenes), len(val_scenes))

    model = ObjSegModel(cfg.model)
    optimizer = _make_optimizer(cfg, model)

    rows = []
    best_val = math.inf
    stale_epochs = 0
    for epoch in range(cfg.epochs):
        model.train()
        rng = np.random.default_rng((cfg.seed, 1000 + epoch))
        order = rng.permutation(len(train_scenes))
        sums = np.zeros(5)
        seen = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [augment(train_scenes[i], rng, cfg.input_size, cfg.input_size)
                     for i in idx]
            loss = _batch_loss(model, batch, cfg, rng)
            optimizer.zero_grad()
            loss.total.backward()
            optimizer.step()
            parts = (loss.total, loss.heatmap_loss, loss.offset_loss,
                     loss.wh_loss, loss.mask_loss)
            sums += np.array([float(p.detach()) for p in parts]) * len(idx)
            seen += len(idx)
        train_avg = sums / seen
        val_loss = _validation_loss(model, val_scenes, cfg) if val_scenes else train_avg[0]
        rows.append([epoch, *train_avg, val_loss])
        log.info("epoch %d: train %.4f (hm %.4f off %.4f wh %.4f mask %.4f) val %.4f",
                 epoch, *train_avg, val_loss)

        if val_loss < best_val - cfg.min_improvement:
            best_val = val_loss
            stale_epochs = 0
            save_checkpoint(model, checkpoint)
        else:
            stale_epochs += 1
            if stale_epochs >= cfg.patience:
                log.info("early stop at epoch %d (no improvement for %d epochs)",
                         epoch, stale_epochs)
                break

    if not checkpoint.exists():
        save_checkpoint(model, checkpoint)
    with open(out / "losses.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_total", "train_heatmap", "train_offset",
                         "train_wh", "train_mask", "val_total"])
        writer.writerows(rows)
    dump_run_config(cfg, out / "config.resolved")
    return checkpoint


def detect_instances(model: ObjSegModel, scene: Scene, cfg: RunConfig) -> list[InstanceResult]:
    """Full inference for one letterboxed scene: heads, decode, masks, paste."""
    mc = model.config
    image = torch.from_numpy(scene.image).unsqueeze(0)
    out = model.forward_detection(image)
    detections = topk_decode(
        out["heatmap"][0].numpy(), out["offsets"][0].numpy(), out["wh"][0].numpy(),
        stride=mc.stride, top_k=cfg.top_k, score_thresh=cfg.score_thresh,
        image_shape=scene.shape)
    if not detections:
        return []
    boxes = np.stack([d.box.as_array() for d in detections])
    grids = model.forward_segmentation(boxes, out["encoder_feats"], out["object_feats"])
    return paste_masks(detections, grids.squeeze(1).numpy(), scene.shape,
                       mask_thresh=cfg.mask_thresh)


def ground_truth_as_predictions(scene: Scene) -> list[InstanceResult]:
    from .decode import Detection

    results = []
    for mask, box in zip(scene.masks, scene.boxes):
        h, w = scene.shape
        row = min(int(box.center[1]), h - 1)
        col = min(int(box.center[0]), w - 1)
        det = Detection(box=box, score=1.0, class_id=0, center_cell=(row, col))
        results.append(InstanceResult(detection=det, mask=mask))
    return results


def run_eval(cfg: RunConfig, checkpoint: str | Path, oracle: bool = False) -> Path:
    """Inference + decode + metrics over the evaluation split; writes metrics.json."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes = [letterbox(s, cfg.input_size, cfg.input_size) for s in evaluation_scenes_for(cfg)]
    if not scenes:
        raise DatasetError("evaluation dataset is empty")

    if oracle:
        predictions = [ground_truth_as_predictions(s) for s in scenes]
        timings = None
    else:
        model = load_checkpoint(checkpoint)
        if model.config != cfg.model:
            raise ValueError(
                f"checkpoint model config {model.config} differs from run config {cfg.model}")
        model.eval()
        predictions = []
        timings = []
        with torch.no_grad():
            detect_instances(model, scenes[0], cfg)  # warm-up, untimed
            for scene in scenes:
                t0 = time.perf_counter()
                predictions.append(detect_instances(model, scene, cfg))
                timings.append(time.perf_counter() - t0)

    report = evaluate(predictions, scenes, timings)
    (out / "metrics.json").write_text(report.to_json())
    (out / "matches.json").write_text(json.dumps(match_dump(predictions, scenes), indent=2))
    dump_run_config(cfg, out / "config.resolved")
    log.info("metrics: %s", report.to_json())
    return out / "metrics.json"


OVERLAY_PALETTE = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
]


def render_overlay(image: np.ndarray, results: list[InstanceResult]) -> np.ndarray:
    """Blend per-instance colors over an image; returns (H, W, 3) uint8."""
    canvas = (image.transpose(1, 2, 0) * 255.0).astype(np.float32)
    for k, res in enumerate(results):
        color = np.array(OVERLAY_PALETTE[k % len(OVERLAY_PALETTE)], dtype=np.float32)
        canvas[res.mask] = 0.5 * canvas[res.mask] + 0.5 * color
    return canvas.round().clip(0, 255).astype(np.uint8)


def _pad_to_multiple(rgb: np.ndarray, multiple: int = 32) -> np.ndarray:
    h, w = rgb.shape[:2]
    ph = (multiple - h % multiple) % multiple
    pw = (multiple - w % multiple) % multiple
    if ph or pw:
        rgb = np.pad(rgb, ((0, ph), (0, pw), (0, 0)))
    return rgb


def run_infer(cfg: RunConfig, checkpoint: str | Path, image_paths: list[str | Path],
              overlay: bool = False) -> int:
    """Per-image instance archives (RLE masks) plus optional overlays.

    Returns the number of images successfully processed.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(checkpoint)
    model.eval()

    processed = 0
    for path in image_paths:
        path = Path(path)
        try:
            with Image.open(path) as im:
                rgb = np.asarray(im.convert("RGB"))
        except (OSError, UnidentifiedImageError) as e:
            log.warning("skipping unreadable image %s: %s", path, e)
            continue
        h, w = rgb.shape[:2]
        padded = _pad_to_multiple(rgb)
        scene = Scene(image=padded.astype(np.float32).transpose(2, 0, 1) / 255.0,
                      masks=[], boxes=[], id=path.stem)
        with torch.no_grad():
            results = detect_instances(model, scene, cfg)
        instances = []
        for res in results:
            cropped = res.mask[:h, :w]
            instances.append({
                "box": [round(v, 3) for v in res.detection.box.clip(w, h).as_array().tolist()],
                "score": round(res.detection.score, 6),
                "class_id": res.detection.class_id,
                "mask": encode_rle(cropped),
            })
        archive = {"image": path.name, "height": h, "width": w, "instances": instances}
        (out / f"{path.stem}.json").write_text(json.dumps(archive))
        if overlay:
            img = render_overlay(scene.image[:, :h, :w], results)
            Image.fromarray(img).save(out / f"{path.stem}_overlay.png")
        processed += 1

    if processed == 0:
        raise ValueError("no input image could be read")
    dump_run_config(cfg, out / "config.resolved")
    return processed


def run_synth(cfg: RunConfig, count: int) -> Path:
    """Emit a synthetic dataset to disk in the ingestion folder layout."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes = generate_dataset(cfg.synth, count)
    save_folder_dataset(scenes, out)
    dump_run_config(cfg, out / "config.resolved")
    log.info("wrote %d synthetic scenes to %s", count, out)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="objseg",
                                     description="Center-point instance segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-c", "--config", help="YAML run configuration")
        p.add_argument("overrides", nargs="*", metavar="key=value",
                       help="dotted config overrides, e.g. model.variant=objBranch")

    p_train = sub.add_parser("train", help="train a model")
    common(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", help="checkpoint file (omit with --oracle)")
    p_eval.add_argument("--oracle", action="store_true",
                        help="feed ground truth back as predictions")
    common(p_eval)

    p_infer = sub.add_parser("infer", help="run inference on images")
    p_infer.add_argument("--checkpoint", required=True)
    p_infer.add_argument("--images", nargs="+", required=True)
    p_infer.add_argument("--overlay", action="store_true")
    common(p_infer)

    p_synth = sub.add_parser("synth", help="write a synthetic dataset")
    p_synth.add_argument("--count", type=int, default=32)
    common(p_synth)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if not e.code else EXIT_USER_ERROR

    try:
        cfg = load_run_config(args.config, args.overrides)
        if args.command == "train":
            run_train(cfg)
        elif args.command == "eval":
            if not args.oracle and not args.checkpoint:
                raise ValueError("eval requires --checkpoint unless --oracle is set")
            run_eval(cfg, args.checkpoint, oracle=args.oracle)
        elif args.command == "infer":
            run_infer(cfg, args.checkpoint, args.images, overlay=args.overlay)
        elif args.command == "synth":
            run_synth(cfg, args.count)
        return EXIT_OK
    except (ValueError, OSError) as e:
        log.error("%s", e)
        return EXIT_USER_ERROR
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
