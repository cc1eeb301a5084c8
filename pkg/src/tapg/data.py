"""Feature and annotation files, temporal rescaling, windowing, synthetic videos.

Feature file layout (little-endian)::

    b"TFEA"  u32 version=1  u32 T  u32 C  then T*C float32, row-major

Annotation file::

    {"videos": [{"id": str, "duration_seconds": float,
                 "annotations": [{"segment": [start_s, end_s]}, ...]}, ...]}
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"TFEA"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class FeatureFormatError(ValueError):
    pass


class BadMagicError(FeatureFormatError):
    pass


class TruncatedFeatureError(FeatureFormatError):
    pass


class NonFiniteFeatureError(FeatureFormatError):
    pass


class Instance(NamedTuple):
    """Ground-truth interval in snippet coordinates."""

    t_s: float
    t_e: float

    @property
    def duration(self) -> float:
        return self.t_e - self.t_s


@dataclass
class VideoRecord:
    video_id: str
    features: np.ndarray
    annotations: list[Instance] = field(default_factory=list)
    duration_seconds: float | None = None

    @property
    def duration_snippets(self) -> int:
        return self.features.shape[0]


# -- features -------------------------------------------------------------------

def save_features(path, F: np.ndarray) -> None:
    F = np.asarray(F)
    if F.ndim != 2:
        raise ValueError(f"features must be 2-d, got shape {F.shape}")
    T, C = F.shape
    payload = np.ascontiguousarray(F, dtype="<f4").tobytes()
    Path(path).write_bytes(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, T, C) + payload)


def load_features(path) -> np.ndarray:
    """Read a TFEA file into a (T, C) float64 array."""
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedFeatureError(f"{path}: header truncated")
    _, version, T, C = _HEADER.unpack_from(buf)
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    need = T * C * 4
    if len(buf) - _HEADER.size < need:
        raise TruncatedFeatureError(
            f"{path}: payload has {len(buf) - _HEADER.size} bytes, expected {need}")
    F = np.frombuffer(buf, dtype="<f4", count=T * C, offset=_HEADER.size).reshape(T, C)
    if not np.isfinite(F).all():
        raise NonFiniteFeatureError(f"{path}: non-finite feature values")
    return F.astype(np.float64)


# -- annotations ----------------------------------------------------------------

_VIDEO_KEYS = {"id", "duration_seconds", "annotations"}
_ANN_KEYS = {"segment"}


def read_annotation_file(path) -> dict[str, tuple[float, list[tuple[float, float]]]]:
    """Parse the annotation JSON into ``id -> (duration_seconds, [(s, e), ...])``.

    Invalid segments are dropped with a warning; unknown keys are logged.
    """
    doc = json.loads(Path(path).read_text())
    out = {}
    for video in doc.get("videos", []):
        extra = set(video) - _VIDEO_KEYS
        if extra:
            log.info("video %s: ignoring unknown fields %s", video.get("id"), sorted(extra))
        vid = str(video["id"])
        duration = float(video["duration_seconds"])
        segments = []
        for ann in video.get("annotations", []):
            extra = set(ann) - _ANN_KEYS
            if extra:
                log.info("video %s: ignoring unknown annotation fields %s", vid, sorted(extra))
            s, e = (float(v) for v in ann["segment"])
            if s < 0 or e < 0:
                log.warning("video %s: negative time in segment [%s, %s], dropped", vid, s, e)
                continue
            if s >= e:
                log.warning("video %s: empty segment [%s, %s], dropped", vid, s, e)
                continue
            segments.append((s, e))
        out[vid] = (duration, segments)
    return out


def seconds_to_snippets(segments, duration_seconds: float, n_snippets: int) -> list[Instance]:
    scale = n_snippets / duration_seconds
    return [Instance(s * scale, min(e * scale, float(n_snippets))) for s, e in segments]


def load_annotations(path, snippets: int | Mapping[str, int]) -> dict[str, list[Instance]]:
    """Annotations in snippet coordinates.

    ``snippets`` is either one sequence length for every video or a per-video mapping.
    """
    parsed = read_annotation_file(path)
    out = {}
    for vid, (duration, segments) in parsed.items():
        n = snippets if isinstance(snippets, int) else snippets[vid]
        out[vid] = seconds_to_snippets(segments, duration, n)
    return out


def write_annotation_file(path, videos: list[VideoRecord], seconds_per_snippet: float) -> None:
    doc = {"videos": [{
        "id": v.video_id,
        "duration_seconds": v.duration_snippets * seconds_per_snippet,
        "annotations": [{"segment": [a.t_s * seconds_per_snippet, a.t_e * seconds_per_snippet]}
                        for a in v.annotations],
    } for v in videos]}
    Path(path).write_text(json.dumps(doc, indent=1))


def read_manifest(path) -> dict[str, Path]:
    path = Path(path)
    entries = json.loads(path.read_text())
    return {vid: (path.parent / p) for vid, p in entries.items()}


def load_dataset(manifest_path, annotation_path) -> list[VideoRecord]:
    """Load every video in the manifest with annotations in native snippet units."""
    ann = read_annotation_file(annotation_path)
    videos = []
    for vid, fpath in read_manifest(manifest_path).items():
        F = load_features(fpath)
        duration, segments = ann.get(vid, (float(F.shape[0]), []))
        videos.append(VideoRecord(vid, F, seconds_to_snippets(segments, duration, F.shape[0]),
                                  duration))
    return videos


# -- temporal resampling ----------------------------------------------------------

def rescale_linear(F: np.ndarray, T: int) -> np.ndarray:
    """Resample each channel at T evenly spaced points spanning [0, T'-1]."""
    F = np.asarray(F, dtype=float)
    src = F.shape[0]
    if src < 2:
        raise ValueError(f"need at least 2 snippets to interpolate, got {src}")
    if src == T:
        return F.copy()
    x = np.linspace(0.0, src - 1, T)
    lo = np.clip(np.floor(x).astype(int), 0, src - 2)
    frac = (x - lo)[:, None]
    return F[lo] * (1.0 - frac) + F[lo + 1] * frac


def rescale_annotations(annotations, src_len: int, T: int) -> list[Instance]:
    r = T / src_len
    return [Instance(a[0] * r, a[1] * r) for a in annotations]


class Window(NamedTuple):
    offset: int
    features: np.ndarray
    annotations: list[Instance]


def window_offsets(length: int, window: int, stride: int) -> list[int]:
    if length <= window:
        return [0]
    offsets = list(range(0, length - window + 1, stride))
    if offsets[-1] + window < length:
        offsets.append(length - window)
    return offsets


def crop_windows(F: np.ndarray, window: int, stride: int, annotations=(),
                 min_keep: float = 0.5) -> list[Window]:
    """Overlapping fixed-size windows; the last one is right-aligned to the tail.

    Sequences shorter than ``window`` are zero-padded. Each window keeps the
    instances with at least ``min_keep`` of their duration inside it, clipped
    and shifted to window coordinates.
    """
    F = np.asarray(F)
    length = F.shape[0]
    if length < window:
        F = np.concatenate([F, np.zeros((window - length,) + F.shape[1:], F.dtype)], axis=0)
    out = []
    for off in window_offsets(length, window, stride):
        kept = []
        for a in annotations:
            s, e = max(a[0], off), min(a[1], off + window)
            if e > s and (e - s) >= min_keep * (a[1] - a[0]):
                kept.append(Instance(s - off, e - off))
        out.append(Window(off, F[off:off + window], kept))
    return out


# -- synthetic data -----------------------------------------------------------------

def _place_intervals(rng: np.random.Generator, T: int, count: int, gap: float,
                     tries: int = 100) -> list[Instance]:
    while count > 0:
        placed: list[Instance] = []
        for _ in range(tries):
            d = rng.uniform(0.05 * T, 0.4 * T)
            s = rng.uniform(0.0, T - d)
            cand = Instance(s, s + d)
            if all(cand.t_e + gap <= p.t_s or p.t_e + gap <= cand.t_s for p in placed):
                placed.append(cand)
                if len(placed) == count:
                    return sorted(placed)
        count -= 1
    return []


def envelope(T: int, inst: Instance, ramp: float) -> np.ndarray:
    """Activation profile: 1 inside, 0 outside, linear ramps of width ``ramp`` centred on the boundaries."""
    n = np.arange(T, dtype=float)
    return np.clip(np.minimum(n - inst.t_s, inst.t_e - n) / ramp + 0.5, 0.0, 1.0)


@dataclass
class SynthConfig:
    amplitude: float = 2.0
    noise: float = 1.0
    ramp: float = 2.0
    max_actions: int = 3


def synth_generate(n_videos: int, T: int, C: int, seed: int,
                   cfg: SynthConfig | None = None) -> list[VideoRecord]:
    """Noise videos with 1..max_actions planted actions, each with its own ±1 channel signature."""
    if T < 20 or C < 4:
        raise ValueError("synthetic videos need T >= 20 and C >= 4")
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(seed)
    videos = []
    for i in range(n_videos):
        count = int(rng.integers(1, cfg.max_actions + 1))
        actions = _place_intervals(rng, T, count, gap=cfg.ramp)
        F = cfg.noise * rng.standard_normal((T, C))
        for inst in actions:
            signature = rng.choice([-1.0, 1.0], size=C)
            F += cfg.amplitude * envelope(T, inst, cfg.ramp)[:, None] * signature[None, :]
        videos.append(VideoRecord(f"synth_{i:04d}", F, actions, float(T)))
    return videos


def write_dataset(out_dir, videos: list[VideoRecord], seconds_per_snippet: float = 1.0) -> Path:
    """Write feature files, ``annotations.json`` and ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    manifest = {}
    for v in videos:
        rel = f"features/{v.video_id}.tfea"
        save_features(out / rel, v.features)
        manifest[v.video_id] = rel
    write_annotation_file(out / "annotations.json", videos, seconds_per_snippet)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path
