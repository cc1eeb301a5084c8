"""Sparse multi-scale window proposals and their interpolated features."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import Tensor


@dataclass(frozen=True)
class WindowGroup:
    sizes: tuple[int, ...]
    max_size: int
    gamma: int = 21

    def __post_init__(self):
        if not self.sizes or any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ValueError(f"window sizes must be strictly increasing, got {self.sizes}")
        if self.sizes[0] < 1 or self.sizes[-1] > self.max_size:
            raise ValueError(f"window sizes must lie in [1, {self.max_size}]")


def fibonacci_group(max_size: int, gamma: int = 21) -> WindowGroup:
    """Fibonacci window sizes 1, 2, 3, 5, 8, ... not exceeding ``max_size``."""
    if max_size < 2:
        raise ValueError(f"max_size must be >= 2, got {max_size}")
    sizes = []
    a, b = 1, 2
    while a <= max_size:
        sizes.append(a)
        a, b = b, a + b
    return WindowGroup(tuple(sizes), max_size, gamma)


def arithmetic_group(start: int, step: int, end: int, gamma: int = 21) -> WindowGroup:
    """Window sizes start, start+step, ... up to and including ``end``."""
    sizes = tuple(range(start, end + 1, step))
    return WindowGroup(sizes, sizes[-1], gamma)


def parse_group(spec: str) -> WindowGroup:
    """Parse ``"fib:D:gamma"`` or ``"[start:step:end]:gamma"``."""
    spec = spec.strip()
    m = re.fullmatch(r"fib:(\d+):(\d+)", spec)
    if m:
        return fibonacci_group(int(m[1]), int(m[2]))
    m = re.fullmatch(r"\[(\d+):(\d+):(\d+)\]:(\d+)", spec)
    if m:
        return arithmetic_group(int(m[1]), int(m[2]), int(m[3]), int(m[4]))
    raise ValueError(f"bad window-group string {spec!r}; expected 'fib:D:g' or '[a:s:b]:g'")


def stride(w: int, gamma: int) -> int:
    """Sliding step for window size ``w``: floor(sqrt(w)) + floor(w / gamma), at least 1."""
    if w < 1 or gamma < 1:
        raise ValueError("w and gamma must be >= 1")
    return max(1, math.isqrt(w) + w // gamma)


def enumerate_windows(T: int, group: WindowGroup) -> list[tuple[int, int]]:
    """All (start, end) windows ordered by size then start; sizes above T are skipped."""
    windows = []
    for w in group.sizes:
        if w > T:
            continue
        s = stride(w, group.gamma)
        windows.extend((start, start + w) for start in range(0, T - w + 1, s))
    return windows


def sample_positions(start: float, end: float, N: int) -> np.ndarray:
    return np.linspace(start, end, N)


def sampling_matrix(window: tuple[float, float], N: int, T: int) -> np.ndarray:
    """(N, T) interpolation weights for N evenly spaced points over the window.

    Sample points include both endpoints and are clamped to the grid [0, T-1].
    """
    start, end = window
    if not (0 <= start < end <= T):
        raise ValueError(f"window {window} is degenerate or outside [0, {T}]")
    W = np.zeros((N, T))
    pos = np.clip(sample_positions(start, end, N), 0.0, T - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, T - 1)
    frac = pos - lo
    rows = np.arange(N)
    np.add.at(W, (rows, lo), 1.0 - frac)
    np.add.at(W, (rows, hi), frac)
    return W


def sampling_tensor(windows, N: int, T: int) -> np.ndarray:
    """Stacked sampling matrices, shape (L*N, T)."""
    if not windows:
        return np.zeros((0, T))
    return np.concatenate([sampling_matrix(w, N, T) for w in windows], axis=0)


def extract_features(F: Tensor, windows, N: int, weights: np.ndarray | None = None) -> Tensor:
    """Proposal features of shape (L, N*C); row i is the flattened (N, C) sample grid.

    ``weights`` may carry a precomputed :func:`sampling_tensor` for these windows.
    """
    F = tt.as_tensor(F)
    T, C = F.shape
    if weights is None:
        weights = sampling_tensor(windows, N, T)
    sampled = tt.matmul(Tensor(weights), F)
    return tt.reshape(sampled, (len(windows), N * C))


@dataclass
class SparseProposalSet:
    windows: list[tuple[int, int]]
    features: Tensor
    sample_points: int

    def __len__(self) -> int:
        return len(self.windows)


def build_proposals(F: Tensor, group: WindowGroup, N: int = 32) -> SparseProposalSet:
    T = F.shape[0]
    windows = enumerate_windows(T, group)
    return SparseProposalSet(windows, extract_features(F, windows, N), N)
