"""Test-time proposal construction: candidates, fuzzy matching, score fusion, Soft-NMS."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as tt
from .data import crop_windows, rescale_linear
from .labels import iou_matrix


@dataclass
class ScoredProposal:
    t_s: float
    t_e: float
    p_s: float
    p_e: float
    p_cc: float = 1.0
    p_cr: float = 1.0
    p_f: float = 0.0


@dataclass
class MatchConfig:
    alpha1: float = 0.9
    alpha2: float = 0.8
    tau: float = 0.5
    sigma: float = 0.4
    score_floor: float = 1e-3
    max_proposals: int = 100
    max_duration: int | None = None

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "tau"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")


def _peaks(p: np.ndarray, tau: float) -> np.ndarray:
    """Locations that are local maxima or exceed tau * max."""
    p = np.asarray(p, dtype=float)
    keep = p > tau * p.max()
    if p.size > 2:
        inner = (p[1:-1] > p[:-2]) & (p[1:-1] > p[2:])
        keep[1:-1] |= inner
    if p.size > 1:
        keep[0] |= p[0] > p[1]
        keep[-1] |= p[-1] > p[-2]
    return np.flatnonzero(keep)


def coarse_candidates(P_s, P_e, max_duration: int | None, cfg: MatchConfig | None = None):
    """All (start, end) pairs of boundary peaks with start < end <= start + max_duration.

    Returns a list of (t_s, t_e, p_s, p_e).
    """
    cfg = cfg or MatchConfig()
    P_s = np.asarray(P_s, dtype=float)
    P_e = np.asarray(P_e, dtype=float)
    if P_s.size == 0:
        return []
    limit = max_duration if max_duration is not None else P_s.size
    starts, ends = _peaks(P_s, cfg.tau), _peaks(P_e, cfg.tau)
    out = []
    for s in starts:
        for e in ends:
            if s < e <= s + limit:
                out.append((float(s), float(e), float(P_s[s]), float(P_e[e])))
    return out


def fuzzy_match(candidate, windows, c_c, c_r, cfg: MatchConfig | None = None,
                overlaps: np.ndarray | None = None) -> ScoredProposal:
    """Pair a candidate with its highest-tIoU sparse window and maybe pull it halfway there."""
    cfg = cfg or MatchConfig()
    if len(windows) == 0:
        raise ValueError("fuzzy_match needs a non-empty sparse proposal set")
    t_s, t_e, p_s, p_e = candidate
    if overlaps is None:
        overlaps = iou_matrix([(t_s, t_e)], windows)[0]
    m = int(np.argmax(overlaps))
    cc, cr = float(c_c[m]), float(c_r[m])
    if cc > cfg.alpha1 and cr > cfg.alpha2:
        ws, we = windows[m]
        t_s, t_e = (t_s + ws) / 2.0, (t_e + we) / 2.0
    return ScoredProposal(t_s, t_e, p_s, p_e, cc, cr)


def fuse_score(p: ScoredProposal) -> float:
    return p.p_s * p.p_e * p.p_cc * p.p_cr


def soft_nms(proposals: list[ScoredProposal], cfg: MatchConfig | None = None) -> list[ScoredProposal]:
    """Gaussian Soft-NMS on ``p_f``; returns new proposals with decayed scores."""
    cfg = cfg or MatchConfig()
    if not proposals:
        return []
    seg = np.array([[p.t_s, p.t_e] for p in proposals], dtype=float)
    score = np.array([p.p_f for p in proposals], dtype=float)
    alive = np.ones(len(proposals), bool)
    keep: list[tuple[int, float]] = []
    while alive.any() and len(keep) < cfg.max_proposals:
        idx = np.flatnonzero(alive)
        best = idx[np.argmax(score[idx])]
        if score[best] < cfg.score_floor:
            break
        keep.append((best, score[best]))
        alive[best] = False
        rest = np.flatnonzero(alive)
        if rest.size:
            o = iou_matrix(seg[best:best + 1], seg[rest])[0]
            score[rest] = score[rest] * np.exp(-(o * o) / cfg.sigma)
    return [replace(proposals[i], p_f=float(s)) for i, s in keep]


def proposals_for_sequence(model, F: np.ndarray, cfg: MatchConfig) -> list[ScoredProposal]:
    """Scored, matched (not yet suppressed) proposals for one model-length sequence."""
    with tt.no_grad():
        p_s, p_e, c_c, c_r = model(F)
    p_s, p_e, c_c, c_r = (x.data for x in (p_s, p_e, c_c, c_r))
    windows = model.windows
    limit = cfg.max_duration or max(w[1] - w[0] for w in windows)
    cands = coarse_candidates(p_s, p_e, limit, cfg)
    if not cands:
        return []
    overlaps = iou_matrix([c[:2] for c in cands], windows)
    out = []
    for cand, ov in zip(cands, overlaps):
        p = fuzzy_match(cand, windows, c_c, c_r, cfg, ov)
        p.p_f = fuse_score(p)
        out.append(p)
    return out


@dataclass
class InferenceMode:
    """``rescale``: resample every video to T. ``window``: crop native-length windows."""

    mode: str = "rescale"
    T: int = 100
    window_stride: int = 128


def generate(model, features: np.ndarray, mode: InferenceMode, cfg: MatchConfig
             ) -> tuple[list[ScoredProposal], float]:
    """Final proposals for one video, in model snippet units.

    Returns the proposals and the factor converting their coordinates back to
    native snippet units.
    """
    length = features.shape[0]
    if mode.mode == "rescale":
        F = rescale_linear(features, mode.T)
        props = proposals_for_sequence(model, F, cfg)
        factor = length / mode.T
    elif mode.mode == "window":
        props = []
        for off, Fw, _ in crop_windows(features, mode.T, mode.window_stride):
            for p in proposals_for_sequence(model, Fw, cfg):
                # padded tails can produce proposals past the real sequence end
                p.t_s, p.t_e = p.t_s + off, min(p.t_e + off, float(length))
                if p.t_e > p.t_s:
                    props.append(p)
        factor = 1.0
    else:
        raise ValueError(f"unknown inference mode {mode.mode!r}")
    return soft_nms(props, cfg), factor


def to_result_entries(props: list[ScoredProposal], seconds_per_unit: float) -> list[dict]:
    rows = [{"segment": [p.t_s * seconds_per_unit, p.t_e * seconds_per_unit], "score": p.p_f}
            for p in props]
    rows.sort(key=lambda r: (-r["score"], r["segment"][0]))
    return rows


def write_results(path, results: dict[str, list[dict]]) -> None:
    Path(path).write_text(json.dumps(results, indent=1, sort_keys=True))


def read_results(path) -> dict[str, list[dict]]:
    return json.loads(Path(path).read_text())
