"""
Sliding-window split of a chirp's samples into overlapping subsegments and
the overlap-averaged merge back into one signal.

Segment ``k`` is ``x[k·L : (k+1)·L + M]``. Windowing acts on axis -2 (samples);
the channel axis and any leading batch axes pass through untouched.
"""
import logging
from dataclasses import dataclass

import numpy as np

from utils.autodiff import Tensor, ArrayLike, as_tensor, take, scatter_add

logging.basicConfig()
logger = logging.getLogger(__name__)
logger.setLevel(logging.DEBUG)


@dataclass(frozen=True)
class WindowConfig:
    slide: int = 16  # L
    overlap: int = 16  # M

    def __post_init__(self):
        if self.slide < 1 or self.overlap < 0:
            raise ValueError(f"window slide must be >= 1 and overlap >= 0, got L={self.slide}, M={self.overlap}")

    @property
    def segment_len(self) -> int:
        return self.slide + self.overlap

    def n_frames(self, signal_len: int) -> int:
        self.check(signal_len)
        return (signal_len - self.overlap) // self.slide

    def check(self, signal_len: int) -> None:
        if signal_len < self.segment_len:
            raise ValueError(f"signal length {signal_len} shorter than segment length {self.segment_len}")
        if (signal_len - self.overlap) % self.slide:
            raise ValueError(f"(signal_len - M) = {signal_len - self.overlap} not divisible by L = {self.slide}")


@dataclass
class SegmentStack:
    segments: Tensor  # [..., n_frames, segment_len, channels]
    config: WindowConfig

    @property
    def n_frames(self) -> int:
        return self.segments.shape[-3]

    @property
    def signal_len(self) -> int:
        return (self.n_frames - 1) * self.config.slide + self.config.segment_len


def window_indices(signal_len: int, cfg: WindowConfig) -> np.ndarray:
    """Sample index of every (frame, position) pair, shape [n_frames, segment_len]."""
    n_frames = cfg.n_frames(signal_len)
    return np.arange(n_frames)[:, None] * cfg.slide + np.arange(cfg.segment_len)[None, :]


def cover_counts(signal_len: int, cfg: WindowConfig) -> np.ndarray:
    """How many segments contain each sample (1 or 2 when M <= L, up to ceil((L + M) / L) otherwise)."""
    counts = np.zeros(signal_len, dtype=np.int64)
    np.add.at(counts, window_indices(signal_len, cfg), 1)
    return counts


def split_windows(x: ArrayLike, cfg: WindowConfig) -> SegmentStack:
    x = as_tensor(x)
    if x.ndim < 2:
        raise ValueError(f"split_windows expects [..., signal_len, C], got {x.shape}")
    idx = window_indices(x.shape[-2], cfg)
    return SegmentStack(segments=take(x, idx, axis=x.ndim - 2), config=cfg)


def merge_windows(stack: SegmentStack) -> Tensor:
    """Every sample is the mean of the segments covering it, so the first L and
    last min(L, M) samples come from the first and last segment alone. With
    M > L some samples are covered by more than two segments."""
    segments = stack.segments
    cfg = stack.config
    if segments.ndim < 3 or segments.shape[-2] != cfg.segment_len:
        raise ValueError(f"segments {segments.shape} inconsistent with segment length {cfg.segment_len}")
    signal_len = stack.signal_len
    idx = window_indices(signal_len, cfg)
    summed = scatter_add(segments, idx, axis=segments.ndim - 3, length=signal_len)
    weights = (1.0 / cover_counts(signal_len, cfg))[:, None]
    return summed * weights
