"""Evaluation: greedy matching, VOC2010 all-points AP, averaged mask IoU, FPS."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from statistics import median

import numpy as np

from .geometry import box_iou, mask_iou

log = logging.getLogger(__name__)

AP_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))  # 0.5 .. 0.95


@dataclass
class MatchResult:
    """Greedy prediction-to-ground-truth assignment at one IoU threshold."""

    pairs: list[tuple[int, int, float]]  # (prediction index, gt index, IoU)
    unmatched_predictions: list[int]
    unmatched_ground_truths: list[int]
    threshold: float


@dataclass
class MetricReport:
    """The evaluation table row; every field except fps is a ratio in [0, 1]."""

    ap_box: float
    ap_mask: float
    ap_mask_50: float
    ap_mask_75: float
    aiou_50: float
    aiou_75: float
    fps: float
    aiou_empty: bool = field(default=False, compare=False)

    SCHEMA = ("ap_box", "ap_mask", "ap_mask_50", "ap_mask_75", "aiou_50", "aiou_75", "fps")

    def __post_init__(self):
        for name in self.SCHEMA[:-1]:
            v = getattr(self, name)
            if not math.isnan(v) and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in self.SCHEMA}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))


def _greedy_match(iou: np.ndarray, scores: np.ndarray, alpha: float) -> MatchResult:
    """Each prediction, in descending score order, claims the highest-IoU
    unclaimed ground truth with IoU >= alpha."""
    n_pred, n_gt = iou.shape
    order = np.argsort(-scores, kind="stable")
    claimed = np.zeros(n_gt, dtype=bool)
    pairs = []
    unmatched_preds = []
    for p in order:
        best_gt, best_iou = -1, 0.0
        for g in range(n_gt):
            if claimed[g] or iou[p, g] < alpha:
                continue
            if best_gt < 0 or iou[p, g] > best_iou:
                best_gt, best_iou = g, float(iou[p, g])
        if best_gt >= 0:
            claimed[best_gt] = True
            pairs.append((int(p), best_gt, float(best_iou)))
        else:
            unmatched_preds.append(int(p))
    unmatched_gts = [g for g in range(n_gt) if not claimed[g]]
    return MatchResult(pairs=pairs, unmatched_predictions=sorted(unmatched_preds),
                       unmatched_ground_truths=unmatched_gts, threshold=alpha)


def iou_matrix(predictions, ground_truths, iou_kind: str) -> np.ndarray:
    """Pairwise IoU between predicted instances and ground truths."""
    mat = np.zeros((len(predictions), len(ground_truths)))
    for i, pred in enumerate(predictions):
        for j, gt in enumerate(ground_truths):
            if iou_kind == "box":
                mat[i, j] = box_iou(pred.detection.box, gt)
            elif iou_kind == "mask":
                mat[i, j] = mask_iou(pred.mask, gt)
            else:
                raise ValueError(f"unknown iou_kind {iou_kind!r}")
    return mat


def match_instances(predictions, ground_truths, alpha: float,
                    iou_kind: str = "box") -> MatchResult:
    """Match scored instances against ground-truth boxes or masks."""
    scores = np.array([p.detection.score for p in predictions], dtype=np.float64)
    return _greedy_match(iou_matrix(predictions, ground_truths, iou_kind), scores, alpha)


def average_precision(matches: list[MatchResult], scores: list[np.ndarray]) -> float:
    """VOC2010 all-points AP over per-image match results.

    `scores[i]` holds the prediction scores of image i, indexed like the
    prediction indices inside `matches[i]`. NaN when there is no ground truth.
    """
    num_gt = sum(len(m.pairs) + len(m.unmatched_ground_truths) for m in matches)
    if num_gt == 0:
        log.warning("average_precision undefined: no ground-truth instances")
        return float("nan")
    flat_scores = []
    flat_tp = []
    for m, s in zip(matches, scores):
        tp_idx = {p for p, _, _ in m.pairs}
        for i, score in enumerate(np.asarray(s, dtype=np.float64)):
            flat_scores.append(score)
            flat_tp.append(i in tp_idx)
    if not flat_scores:
        return 0.0
    order = np.argsort(-np.asarray(flat_scores), kind="stable")
    tp = np.asarray(flat_tp)[order]
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / num_gt
    precision = tp_cum / (tp_cum + fp_cum)

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate(predictions_per_image, scenes, timings=None) -> MetricReport:
    """Compute the full metric suite over decoded instances.

    predictions_per_image: list (one entry per scene) of InstanceResult lists.
    timings: optional per-image inference+decode seconds (warm-up excluded).
    """
    if len(predictions_per_image) != len(scenes):
        raise ValueError("predictions and scenes differ in length")
    if not scenes:
        raise ValueError("cannot evaluate an empty dataset")

    score_lists = [np.array([p.detection.score for p in preds], dtype=np.float64)
                   for preds in predictions_per_image]
    box_mats = [iou_matrix(preds, scene.boxes, "box")
                for preds, scene in zip(predictions_per_image, scenes)]
    mask_mats = [iou_matrix(preds, scene.masks, "mask")
                 for preds, scene in zip(predictions_per_image, scenes)]

    def sweep(mats):
        per_alpha = {}
        for alpha in AP_THRESHOLDS:
            matches = [_greedy_match(mat, s, alpha) for mat, s in zip(mats, score_lists)]
            per_alpha[alpha] = (average_precision(matches, score_lists), matches)
        return per_alpha

    box_sweep = sweep(box_mats)
    mask_sweep = sweep(mask_mats)

    def aiou(alpha):
        _, matches = mask_sweep[alpha]
        ious = [iou for m in matches for _, _, iou in m.pairs]
        if not ious:
            log.warning("AIoU_%.2f has no matched instances", alpha)
            return 0.0, True
        return float(np.mean(ious)), False

    aiou_50, empty_50 = aiou(0.5)
    aiou_75, empty_75 = aiou(0.75)
    fps = 0.0
    if timings:
        fps = 1.0 / median(timings)

    return MetricReport(
        ap_box=float(np.mean([box_sweep[a][0] for a in AP_THRESHOLDS])),
        ap_mask=float(np.mean([mask_sweep[a][0] for a in AP_THRESHOLDS])),
        ap_mask_50=mask_sweep[0.5][0],
        ap_mask_75=mask_sweep[0.75][0],
        aiou_50=aiou_50,
        aiou_75=aiou_75,
        fps=fps,
        aiou_empty=empty_50 or empty_75,
    )


def match_dump(predictions_per_image, scenes, alpha: float = 0.5) -> list[dict]:
    """Per-image matching summary at one threshold, for report debugging."""
    out = []
    for preds, scene in zip(predictions_per_image, scenes):
        m = match_instances(preds, scene.masks, alpha, iou_kind="mask")
        out.append({
            "id": scene.id,
            "pairs": [[p, g, round(v, 6)] for p, g, v in m.pairs],
            "false_positives": m.unmatched_predictions,
            "missed": m.unmatched_ground_truths,
        })
    return out
