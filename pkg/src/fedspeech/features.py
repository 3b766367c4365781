"""Log-spectrogram images from audio windows, plus the on-disk feature cache."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio import AudioWindow

FRAME_SIZE = 224
LOG_EPSILON = 1e-10
TRAIN = "train"
VAL = "val"


class FeatureConfigError(ValueError):
    pass


class AugmentationError(RuntimeError):
    """Raised when augmentation is requested for a non-training frame."""


@dataclass(frozen=True)
class StftConfig:
    segment_len: int = 1024
    overlap: int = 512
    window_fn: str = "hann"
    epsilon: float = LOG_EPSILON

    def __post_init__(self):
        n = self.segment_len
        if n < 2 or n & (n - 1):
            raise FeatureConfigError(f"segment_len must be a power of two, got {n}")
        if not 0 <= self.overlap < n:
            raise FeatureConfigError(f"overlap must be in [0, {n}), got {self.overlap}")
        if self.epsilon <= 0:
            raise FeatureConfigError("epsilon must be positive")
        if self.window_fn != "hann":
            raise FeatureConfigError(f"unsupported window {self.window_fn!r}")

    @property
    def step(self) -> int:
        return self.segment_len - self.overlap


@dataclass(frozen=True)
class FeatureFrame:
    pixels: np.ndarray
    subject_id: str = ""
    segment_index: int = 0
    window_index: int = 0
    label: int = 0
    split_tag: str = TRAIN

    @property
    def origin(self) -> tuple[str, int, int]:
        return (self.subject_id, self.segment_index, self.window_index)


@dataclass(frozen=True)
class AugmentPolicy:
    max_shift_frac: float = 0.1
    noise_sigma: float = 0.05

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(0.0, 0.0)


def hann(n: int) -> np.ndarray:
    # periodic form, the usual choice for spectral analysis
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_starts(n_samples: int, cfg: StftConfig) -> np.ndarray:
    count = (n_samples - cfg.overlap) // cfg.step if n_samples >= cfg.segment_len else 0
    return np.arange(count) * cfg.step


def compute_spectrogram(window: AudioWindow | np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """One-sided power spectrogram, shape (segment_len/2 + 1, frames)."""
    x = np.asarray(window.samples if isinstance(window, AudioWindow) else window, dtype=np.float64)
    if len(x) < cfg.segment_len:
        raise FeatureConfigError(f"window of {len(x)} samples shorter than segment_len {cfg.segment_len}")
    starts = frame_starts(len(x), cfg)
    frames = x[starts[:, None] + np.arange(cfg.segment_len)] * hann(cfg.segment_len)
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    power[:, 1:-1] *= 2.0
    return power.T


def log_scale(spec: np.ndarray, epsilon: float = LOG_EPSILON) -> np.ndarray:
    spec = np.asarray(spec, dtype=np.float64)
    if np.any(spec < 0):
        raise ValueError("log_scale expects non-negative power values")
    return np.log(spec + epsilon)


def resize_bilinear(img: np.ndarray, out_h: int = FRAME_SIZE, out_w: int = FRAME_SIZE) -> np.ndarray:
    """Bilinear resampling on a corner-aligned grid (first/last samples map to first/last pixels)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 2 or img.shape[1] < 2:
        raise ValueError(f"resize needs a matrix of at least 2x2, got shape {img.shape}")
    if out_h < 2 or out_w < 2:
        raise ValueError("output must be at least 2x2")
    h, w = img.shape
    ys = np.linspace(0.0, h - 1, out_h)
    xs = np.linspace(0.0, w - 1, out_w)
    y0 = np.minimum(np.floor(ys).astype(int), h - 2)
    x0 = np.minimum(np.floor(xs).astype(int), w - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = img[np.ix_(y0, x0)]
    b = img[np.ix_(y0, x0 + 1)]
    c = img[np.ix_(y0 + 1, x0)]
    d = img[np.ix_(y0 + 1, x0 + 1)]
    top = a + (b - a) * fx
    bottom = c + (d - c) * fx
    return top + (bottom - top) * fy


def normalize(pixels: np.ndarray, epsilon: float = 1e-8) -> np.ndarray:
    """Per-frame standardization; constant frames become all zeros."""
    p = np.asarray(pixels, dtype=np.float64)
    sd = p.std()
    centered = p - p.mean()
    if sd < epsilon:
        return np.zeros_like(centered)
    return centered / sd


def window_to_pixels(window: AudioWindow | np.ndarray, cfg: StftConfig = StftConfig(),
                     size: int = FRAME_SIZE) -> np.ndarray:
    spec = log_scale(compute_spectrogram(window, cfg), cfg.epsilon)
    return normalize(resize_bilinear(spec, size, size)).astype(np.float32)


def featurize_window(window: AudioWindow, label: int, cfg: StftConfig = StftConfig(),
                     size: int = FRAME_SIZE, split_tag: str = TRAIN) -> FeatureFrame:
    return FeatureFrame(window_to_pixels(window, cfg, size), window.subject_id,
                        window.segment_index, window.window_index, label, split_tag)


def augment(frame: FeatureFrame, rng: np.random.Generator, policy: AugmentPolicy = AugmentPolicy()) -> FeatureFrame:
    """Random time shift (edge-padded) and additive Gaussian noise, train frames only."""
    if frame.split_tag != TRAIN:
        raise AugmentationError(f"refusing to augment a {frame.split_tag!r} frame {frame.origin}")
    pixels = frame.pixels
    width = pixels.shape[1]
    max_shift = int(round(policy.max_shift_frac * width))
    shift = int(rng.integers(-max_shift, max_shift + 1)) if max_shift > 0 else 0
    out = pixels
    if shift:
        idx = np.clip(np.arange(width) - shift, 0, width - 1)
        out = pixels[:, idx]
    if policy.noise_sigma > 0:
        out = out + rng.normal(0.0, policy.noise_sigma, size=out.shape)
    if out is pixels:
        return frame
    return replace(frame, pixels=out.astype(pixels.dtype))


# ---------------------------------------------------------------------------
# Bulk container and cache file

@dataclass
class FeatureSet:
    """Frames stored as one (N, H, W) float32 block with aligned metadata."""

    pixels: np.ndarray
    subject_ids: list[str]
    segment_index: np.ndarray
    window_index: np.ndarray
    labels: np.ndarray
    split_tags: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.pixels)
        if not self.split_tags:
            self.split_tags = [TRAIN] * n
        lens = {len(self.subject_ids), len(self.segment_index), len(self.window_index),
                len(self.labels), len(self.split_tags)}
        if lens != {n}:
            raise ValueError("FeatureSet fields have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.pixels)

    @classmethod
    def from_frames(cls, frames: Sequence[FeatureFrame]) -> "FeatureSet":
        if not frames:
            return cls(np.zeros((0, FRAME_SIZE, FRAME_SIZE), np.float32), [], np.zeros(0, np.int64),
                       np.zeros(0, np.int64), np.zeros(0, np.int64), [])
        return cls(
            np.stack([f.pixels for f in frames]).astype(np.float32),
            [f.subject_id for f in frames],
            np.array([f.segment_index for f in frames], dtype=np.int64),
            np.array([f.window_index for f in frames], dtype=np.int64),
            np.array([f.label for f in frames], dtype=np.int64),
            [f.split_tag for f in frames],
        )

    def frame(self, i: int) -> FeatureFrame:
        return FeatureFrame(self.pixels[i], self.subject_ids[i], int(self.segment_index[i]),
                            int(self.window_index[i]), int(self.labels[i]), self.split_tags[i])

    def frames(self) -> list[FeatureFrame]:
        return [self.frame(i) for i in range(len(self))]

    def indices_for(self, subjects) -> np.ndarray:
        wanted = set(subjects)
        return np.array([i for i, s in enumerate(self.subject_ids) if s in wanted], dtype=np.int64)

    def subset(self, idx) -> "FeatureSet":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureSet(self.pixels[idx], [self.subject_ids[i] for i in idx], self.segment_index[idx],
                          self.window_index[idx], self.labels[idx], [self.split_tags[i] for i in idx])


CACHE_MAGIC = b"FFC1"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sIIII")
_SPLIT_CODES = {TRAIN: 0, VAL: 1}
_SPLIT_NAMES = {v: k for k, v in _SPLIT_CODES.items()}


class FeatureCacheError(ValueError):
    pass


def dump_feature_cache(fs: FeatureSet) -> bytes:
    """Serialize frames.

    Layout: header ``<4sIIII`` (magic, version, H, W, count), then per frame
    ``<i`` label, ``<B`` split tag, ``<H`` subject-id length + UTF-8 bytes,
    ``<II`` segment and window index, then H*W little-endian float32 row-major.
    """
    n, h, w = fs.pixels.shape if len(fs) else (0, FRAME_SIZE, FRAME_SIZE)
    parts = [_CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, h, w, n)]
    block = np.ascontiguousarray(fs.pixels, dtype="<f4")
    for i in range(n):
        sid = fs.subject_ids[i].encode("utf-8")
        parts.append(struct.pack("<iBH", int(fs.labels[i]), _SPLIT_CODES[fs.split_tags[i]], len(sid)))
        parts.append(sid)
        parts.append(struct.pack("<II", int(fs.segment_index[i]), int(fs.window_index[i])))
        parts.append(block[i].tobytes())
    return b"".join(parts)


def load_feature_cache(data: bytes) -> FeatureSet:
    if len(data) < _CACHE_HEADER.size:
        raise FeatureCacheError("feature cache truncated in header")
    magic, version, h, w, n = _CACHE_HEADER.unpack_from(data, 0)
    if magic != CACHE_MAGIC:
        raise FeatureCacheError(f"bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise FeatureCacheError(f"unsupported feature cache version {version}")
    pos = _CACHE_HEADER.size
    nbytes = h * w * 4
    pixels = np.empty((n, h, w), dtype=np.float32)
    sids, segs, wins, labels, tags = [], [], [], [], []
    for i in range(n):
        try:
            label, code, slen = struct.unpack_from("<iBH", data, pos)
            pos += 7
            sid = data[pos:pos + slen].decode("utf-8")
            pos += slen
            seg, win = struct.unpack_from("<II", data, pos)
            pos += 8
        except struct.error as exc:
            raise FeatureCacheError(f"truncated record {i} at offset {pos}") from exc
        if pos + nbytes > len(data):
            raise FeatureCacheError(f"truncated pixels for record {i} at offset {pos}")
        pixels[i] = np.frombuffer(data, dtype="<f4", count=h * w, offset=pos).reshape(h, w)
        pos += nbytes
        sids.append(sid)
        segs.append(seg)
        wins.append(win)
        labels.append(label)
        tags.append(_SPLIT_NAMES[code])
    if pos != len(data):
        raise FeatureCacheError(f"{len(data) - pos} trailing bytes at offset {pos}")
    return FeatureSet(pixels, sids, np.array(segs, np.int64), np.array(wins, np.int64),
                      np.array(labels, np.int64), tags)


def write_feature_cache(path: str | Path, fs: FeatureSet) -> None:
    Path(path).write_bytes(dump_feature_cache(fs))


def read_feature_cache(path: str | Path) -> FeatureSet:
    return load_feature_cache(Path(path).read_bytes())
