"""Run-length encoding of binary masks for instance archives."""

from __future__ import annotations

import numpy as np


def encode_rle(mask: np.ndarray) -> dict:
    """Encode a 2D binary mask as row-major foreground runs [start, length, ...]."""
    flat = np.asarray(mask, dtype=bool).ravel()
    diffs = np.nonzero(flat[1:] != flat[:-1])[0] + 1
    bounds = np.concatenate(([0], diffs, [flat.size]))
    runs = []
    for start, end in zip(bounds[:-1], bounds[1:]):
        if flat[start]:
            runs.extend((int(start), int(end - start)))
    return {"shape": [int(s) for s in mask.shape], "runs": runs}


def decode_rle(encoded: dict) -> np.ndarray:
    """Invert encode_rle back to a 2D boolean mask."""
    h, w = encoded["shape"]
    flat = np.zeros(h * w, dtype=bool)
    runs = encoded["runs"]
    for start, length in zip(runs[0::2], runs[1::2]):
        flat[start:start + length] = True
    return flat.reshape(h, w)
