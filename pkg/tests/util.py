"""Shared helpers for the test suite: finite differences and naive loss references."""

import math

import numpy as np
import torch


def central_difference(fn, x: torch.Tensor, index, h: float = 3e-6) -> float:
    """Central finite difference of scalar fn at one coordinate of x."""
    xp = x.detach().clone()
    xm = x.detach().clone()
    xp[index] += h
    xm[index] -= h
    return (fn(xp).item() - fn(xm).item()) / (2 * h)


def check_gradients(fn, x: torch.Tensor, rng: np.random.Generator,
                    n_coords: int = 20, rel_tol: float = 1e-4,
                    min_grad: float = 1e-5) -> None:
    """Compare autograd against central differences at random coordinates.

    Coordinates whose analytic gradient sits at the finite-difference noise
    floor are skipped: a relative comparison is meaningless there.
    """
    x = x.detach().clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(fn(x), x)
    checked = 0
    attempts = 0
    while checked < n_coords:
        attempts += 1
        assert attempts < 50 * n_coords, "could not find coordinates with usable gradients"
        index = tuple(int(rng.integers(0, s)) for s in x.shape)
        analytic = grad[index].item()
        if abs(analytic) < min_grad:
            continue
        numeric = central_difference(fn, x, index)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric))
        assert rel <= rel_tol, f"coord {index}: analytic {analytic} vs numeric {numeric} (rel {rel})"
        checked += 1


def naive_focal_loss(pred: np.ndarray, target: np.ndarray,
                     alpha: float = 2.0, beta: float = 4.0, eps: float = 1e-6) -> float:
    """Per-pixel double-loop reference for the center heatmap loss."""
    total = 0.0
    n_pos = 0
    for c in range(pred.shape[0]):
        for i in range(pred.shape[1]):
            for j in range(pred.shape[2]):
                p = min(max(pred[c, i, j], eps), 1.0 - eps)
                y = target[c, i, j]
                if y == 1.0:
                    total += (1.0 - p) ** alpha * math.log(p)
                    n_pos += 1
                else:
                    total += (1.0 - y) ** beta * p ** alpha * math.log(1.0 - p)
    return -total / max(1, n_pos)


def naive_keypoint_l1(pred: np.ndarray, target: np.ndarray, center_mask: np.ndarray) -> float:
    total = 0.0
    count = 0
    for c in range(pred.shape[0]):
        for i in range(pred.shape[1]):
            for j in range(pred.shape[2]):
                if center_mask[i, j]:
                    total += abs(pred[c, i, j] - target[c, i, j])
                    count += 1
    return total / count if count else 0.0


def naive_mask_bce(pred: np.ndarray, target: np.ndarray, eps: float = 1e-6) -> float:
    flat_p = pred.ravel()
    flat_t = target.ravel()
    total = 0.0
    for k in range(flat_p.size):
        p = min(max(flat_p[k], eps), 1.0 - eps)
        t = flat_t[k]
        total += t * math.log(p) + (1.0 - t) * math.log(1.0 - p)
    return -total / flat_p.size


# --------------------------------------------------------------------------
# Independent average-precision reference, written from the definition:
# every prefix of the score-sorted prediction list is an operating point,
# matching is recomputed from scratch per prefix, and the max-interpolated
# precision is integrated over recall.

def oracle_box_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def oracle_greedy_tp_flags(preds, gts, alpha):
    """preds: list of (score, box4) in descending score order."""
    claimed = set()
    flags = []
    for _, box in preds:
        best = None
        for g, gt in enumerate(gts):
            if g in claimed:
                continue
            v = oracle_box_iou(box, gt)
            if v >= alpha and (best is None or v > best[0]):
                best = (v, g)
        if best is None:
            flags.append(False)
        else:
            claimed.add(best[1])
            flags.append(True)
    return flags


def oracle_ap(scenes, alpha):
    """Brute-force VOC2010 all-points AP. scenes: [(preds, gts)] with
    preds = [(score, box4)] and gts = [box4]."""
    total_gt = sum(len(gts) for _, gts in scenes)
    if total_gt == 0:
        return float("nan")
    tagged = [(i, p, s, box) for i, (preds, _) in enumerate(scenes)
              for p, (s, box) in enumerate(preds)]
    tagged.sort(key=lambda t: -t[2])
    points = []
    for k in range(1, len(tagged) + 1):
        prefix = tagged[:k]
        tp = 0
        for i, (_, gts) in enumerate(scenes):
            subset = [(s, box) for (i2, _, s, box) in prefix if i2 == i]
            tp += sum(oracle_greedy_tp_flags(subset, gts, alpha))
        points.append((tp / total_gt, tp / k))
    ap = 0.0
    prev_r = 0.0
    for r in sorted({r for r, _ in points}):
        if r == 0.0:
            continue
        p_interp = max(p for rr, p in points if rr >= r)
        ap += (r - prev_r) * p_interp
        prev_r = r
    return ap


def random_matching_scene(rng, max_gt=10):
    """Random boxes with jittered true positives and distractor predictions."""
    n_gt = int(rng.integers(0, max_gt + 1))
    gts = []
    for _ in range(n_gt):
        x, y = rng.uniform(0, 40, 2)
        gts.append((x, y, x + rng.uniform(3, 12), y + rng.uniform(3, 12)))
    preds = []
    for gt in gts:
        if rng.random() < 0.8:
            dx, dy = rng.uniform(-2, 2, 2)
            preds.append((float(rng.random()), (gt[0] + dx, gt[1] + dy, gt[2] + dx, gt[3] + dy)))
    for _ in range(int(rng.integers(0, 4))):
        x, y = rng.uniform(0, 40, 2)
        preds.append((float(rng.random()), (x, y, x + rng.uniform(2, 8), y + rng.uniform(2, 8))))
    rng.shuffle(preds)
    return preds, gts


def implementation_ap(per_image, alpha):
    """AP of the package implementation over (scores, iou_matrix) pairs."""
    from objseg.metrics import _greedy_match, average_precision

    matches = [_greedy_match(np.asarray(iou, dtype=np.float64),
                             np.asarray(scores, dtype=np.float64), alpha)
               for scores, iou in per_image]
    return average_precision(matches, [np.asarray(s, dtype=np.float64) for s, _ in per_image])
