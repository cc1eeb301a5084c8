"""Average recall at AN, AUC of the AR-AN curve, and detection mAP."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .labels import iou_matrix

TIOU_EPS = 1e-9


def proposal_thresholds(stop: float = 0.95) -> list[float]:
    """[0.5:0.05:stop] without floating-point drift."""
    n = int(round((stop - 0.5) / 0.05)) + 1
    return [round(0.5 + 0.05 * i, 10) for i in range(n)]


@dataclass
class EvalConfig:
    tiou_thresholds: list[float] = field(default_factory=proposal_thresholds)
    an_values: list[int] = field(default_factory=lambda: [1, 5, 10, 50, 100])
    an_max: int = 100
    detection_thresholds: list[float] = field(default_factory=lambda: [0.5, 0.75, 0.95])

    def __post_init__(self):
        for name in ("tiou_thresholds", "detection_thresholds"):
            th = getattr(self, name)
            if any(b <= a for a, b in zip(th, th[1:])) or not all(0 < t <= 1 for t in th):
                raise ValueError(f"{name} must be strictly increasing in (0, 1]")


def _segments(entries) -> np.ndarray:
    """(n, 2) array from result rows ({"segment": ...}) or raw pairs."""
    rows = [e["segment"] if isinstance(e, Mapping) else e for e in entries]
    return np.asarray(rows, dtype=float).reshape(-1, 2)


def _scores(entries) -> np.ndarray:
    return np.asarray([e["score"] for e in entries], dtype=float)


def _best_overlaps(proposals, gts, an: int) -> np.ndarray:
    """Per GT, the best tIoU among the first ``an`` proposals."""
    g = _segments(gts)
    p = _segments(proposals)[:an]
    if len(p) == 0:
        return np.zeros(len(g))
    return iou_matrix(p, g).max(axis=0)


def recall_at(proposals: Mapping[str, Sequence], gts: Mapping[str, Sequence],
              tiou: float, an: int) -> float:
    """Fraction of all GT instances hit by one of their video's top-``an`` proposals.

    Proposal lists must already be sorted by score, best first. Videos with no
    GT are ignored; videos missing from ``proposals`` contribute misses.
    """
    hit = total = 0
    for vid, g in gts.items():
        if len(g) == 0:
            continue
        best = _best_overlaps(proposals.get(vid, []), g, an)
        hit += int((best >= tiou - TIOU_EPS).sum())
        total += len(g)
    return hit / total if total else 0.0


def ar_at_an(proposals, gts, an_values: Sequence[int], tiou_thresholds: Sequence[float]) -> dict[int, float]:
    """AR for each AN: recall averaged over the tIoU thresholds."""
    th = np.asarray(tiou_thresholds, dtype=float)
    out = {}
    for an in an_values:
        hits = np.zeros(len(th))
        total = 0
        for vid, g in gts.items():
            if len(g) == 0:
                continue
            b = _best_overlaps(proposals.get(vid, []), g, an)
            hits += (b[None, :] >= th[:, None] - TIOU_EPS).sum(axis=1)
            total += len(g)
        out[an] = float((hits / total).mean()) if total else 0.0
    return out


def ar_curve(proposals, gts, tiou_thresholds, an_max: int = 100) -> np.ndarray:
    """AR at AN = 1..an_max."""
    ar = ar_at_an(proposals, gts, range(1, an_max + 1), tiou_thresholds)
    return np.array([ar[a] for a in range(1, an_max + 1)])


def auc(curve: Sequence[float]) -> float:
    """Trapezoidal area under AR(AN), AN = 1..len(curve), normalized to [0, 1]."""
    y = np.asarray(curve, dtype=float)
    if y.size < 2:
        return float(y[0]) if y.size else 0.0
    return float(((y[1:] + y[:-1]) / 2.0).sum() / (y.size - 1))


def interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    """Area under the PR curve after taking the monotone precision envelope."""
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mprec = np.maximum.accumulate(mprec[::-1])[::-1]
    step = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[step] - mrec[step - 1]) * mprec[step]))


def pr_curve(detections: Mapping[str, Sequence], gts: Mapping[str, Sequence],
             tiou: float) -> tuple[np.ndarray, np.ndarray]:
    """Precision and recall after each detection, greedy one-to-one matching in score order."""
    n_gt = sum(len(g) for g in gts.values())
    dets = [(vid, float(e["score"]), i) for vid, rows in detections.items()
            for i, e in enumerate(rows)]
    if n_gt == 0 or not dets:
        return np.zeros(0), np.zeros(0)
    order = np.argsort(-np.array([d[1] for d in dets]), kind="stable")
    used = {vid: np.zeros(len(g), bool) for vid, g in gts.items()}
    overlaps = {vid: iou_matrix(_segments(rows), _segments(gts.get(vid, [])))
                for vid, rows in detections.items()}
    tp = np.zeros(len(dets))
    for rank, k in enumerate(order):
        vid, _, i = dets[k]
        if vid not in used or len(used[vid]) == 0:
            continue
        ov = overlaps[vid][i]
        for j in np.argsort(-ov, kind="stable"):
            if ov[j] < tiou - TIOU_EPS:
                break
            if not used[vid][j]:
                used[vid][j] = True
                tp[rank] = 1
                break
    ctp = np.cumsum(tp)
    return ctp / np.arange(1, len(dets) + 1), ctp / n_gt


def average_precision(detections: Mapping[str, Sequence], gts: Mapping[str, Sequence],
                      tiou: float) -> float:
    """Class-agnostic AP: area under the enveloped precision-recall curve."""
    precision, recall = pr_curve(detections, gts, tiou)
    if precision.size == 0:
        return 0.0
    return interpolated_ap(precision, recall)


def map_at(detections, gts, tiou_thresholds: Sequence[float]) -> tuple[dict[float, float], float]:
    """AP per threshold and their mean."""
    aps = {float(t): average_precision(detections, gts, t) for t in tiou_thresholds}
    return aps, float(np.mean(list(aps.values()))) if aps else 0.0


def evaluate(results: Mapping[str, Sequence], gts: Mapping[str, Sequence],
             cfg: EvalConfig | None = None) -> dict:
    """Metrics report: AR@AN, AUC, mAP@t and average mAP, plus bookkeeping."""
    cfg = cfg or EvalConfig()
    ranked = {vid: sorted(rows, key=lambda r: -r["score"]) for vid, rows in results.items()}
    report: dict = {}
    for an, v in ar_at_an(ranked, gts, cfg.an_values, cfg.tiou_thresholds).items():
        report[f"AR@{an}"] = v
    curve = ar_curve(ranked, gts, cfg.tiou_thresholds, cfg.an_max)
    report["AUC"] = auc(curve)
    aps, mean_ap = map_at(ranked, gts, cfg.detection_thresholds)
    for t, v in aps.items():
        report[f"mAP@{t:g}"] = v
    report["average_mAP"] = mean_ap
    report["recall_pooling"] = "corpus"
    report["missing_videos"] = sorted(v for v in gts if v not in results)
    report["unknown_videos"] = sorted(v for v in results if v not in gts)
    return report
