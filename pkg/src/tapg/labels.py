"""Training targets: boundary sequences and per-proposal overlap labels."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


def iou(a, b) -> float:
    """Temporal intersection over union of two (start, end) intervals."""
    la, lb = a[1] - a[0], b[1] - b[0]
    if la <= 0 or lb <= 0:
        log.warning("iou: degenerate interval %s / %s", a, b)
        return 0.0
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    return inter / (la + lb - inter)


def ior(region, anchor) -> float:
    """Fraction of ``region`` covered by ``anchor``."""
    length = region[1] - region[0]
    if length <= 0:
        log.warning("ior: degenerate region %s", region)
        return 0.0
    inter = max(0.0, min(region[1], anchor[1]) - max(region[0], anchor[0]))
    return inter / length


def iou_matrix(windows: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Pairwise tIoU, shape (len(windows), len(gts))."""
    w = np.asarray(windows, dtype=float).reshape(-1, 2)
    g = np.asarray(gts, dtype=float).reshape(-1, 2)
    inter = np.clip(np.minimum(w[:, None, 1], g[None, :, 1])
                    - np.maximum(w[:, None, 0], g[None, :, 0]), 0.0, None)
    union = (w[:, 1] - w[:, 0])[:, None] + (g[:, 1] - g[:, 0])[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def boundary_regions(annotation, ratio: float = 0.1):
    """Start and end regions of half-width ``ratio * duration`` around each boundary."""
    ts, te = annotation
    half = (te - ts) * ratio
    return (ts - half, ts + half), (te - half, te + half)


@dataclass
class BoundaryTargets:
    G_s: np.ndarray
    G_e: np.ndarray


def boundary_targets(annotations, T: int, d_f: float = 1.0) -> BoundaryTargets:
    """Max IoR between each location's unit region and every start/end region."""
    G_s = np.zeros(T)
    G_e = np.zeros(T)
    if len(annotations) == 0:
        return BoundaryTargets(G_s, G_e)
    t = np.arange(T, dtype=float)
    lo, hi = t - d_f / 2, t + d_f / 2
    for ann in annotations:
        for G, (a, b) in zip((G_s, G_e), boundary_regions(ann)):
            inter = np.clip(np.minimum(hi, b) - np.maximum(lo, a), 0.0, None)
            np.maximum(G, inter / d_f, out=G)
    return BoundaryTargets(G_s, G_e)


def proposal_targets(windows, annotations) -> np.ndarray:
    """Max tIoU of each window against the annotation set (zeros when empty)."""
    if len(windows) == 0:
        raise ValueError("proposal_targets needs at least one window")
    if len(annotations) == 0:
        return np.zeros(len(windows))
    return iou_matrix(windows, annotations).max(axis=1)
