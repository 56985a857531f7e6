"""Framed log-power spectra of AIR taps."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Air
from .errors import EmptyInput

LOG_FLOOR_EPS = 1e-12
CACHE_MAGIC = b"AFM1"


@dataclass(frozen=True)
class FeatureConfig:
    frame_len_s: float = 0.003
    hop_s: float = 0.0015
    target_duration_s: float = 0.2
    n_fft: int = 64
    window: str = "hann"

    def frame_len(self, sample_rate: int) -> int:
        return int(round(self.frame_len_s * sample_rate))

    def hop(self, sample_rate: int) -> int:
        return int(round(self.hop_s * sample_rate))

    def n_frames(self, sample_rate: int) -> int:
        n = int(round(self.target_duration_s * sample_rate))
        return (n - self.frame_len(sample_rate)) // self.hop(sample_rate) + 1

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray  # T x F
    frame_len_s: float
    hop_s: float
    n_fft: int
    sample_rate: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def frame_signal(air: Air, frame_len: float = 0.003, hop: float = 0.0015, target_duration: float = 0.2) -> np.ndarray:
    """Split the first ``target_duration`` seconds of an AIR into overlapping frames.

    The AIR is zero-padded or truncated from its first sample.  Returns a
    ``(T, L)`` array with ``T = floor((N - L) / H) + 1``.
    """
    fs = air.sample_rate
    L = int(round(frame_len * fs))
    H = int(round(hop * fs))
    N = int(round(target_duration * fs))
    if len(air.taps) == 0:
        raise EmptyInput("AIR has no taps")
    if L < 2:
        raise ValueError(f"frame of {frame_len} s is shorter than 2 samples at {fs} Hz")
    if H < 1 or N < L:
        raise ValueError("hop must be >= 1 sample and the target duration at least one frame")
    x = np.zeros(N, dtype=np.float64)
    n = min(N, len(air.taps))
    x[:n] = air.taps[:n]
    T = (N - L) // H + 1
    starts = np.arange(T) * H
    return x[starts[:, None] + np.arange(L)[None, :]]


def _window(name: str, length: int) -> np.ndarray:
    if name == "hann":
        # periodic Hann keeps the first sample at zero weight, like a DFT-even window
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)
    if name in ("rect", "rectangular", "boxcar"):
        return np.ones(length)
    raise ValueError(f"unknown window {name!r}")


def log_power_spectrum(frame, n_fft: int = 64, window: str = "hann") -> np.ndarray:
    """``ln(|X[k]|^2 + eps)`` for ``k = 0 .. n_fft/2``; works row-wise on 2-D input."""
    frame = np.asarray(frame, dtype=np.float64)
    L = frame.shape[-1]
    if n_fft < L:
        raise ValueError(f"n_fft={n_fft} is shorter than the frame ({L})")
    spec = np.fft.rfft(frame * _window(window, L), n=n_fft, axis=-1)
    return np.log(spec.real ** 2 + spec.imag ** 2 + LOG_FLOOR_EPS)


def extract_features(air: Air, config: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    frames = frame_signal(air, config.frame_len_s, config.hop_s, config.target_duration_s)
    values = log_power_spectrum(frames, config.n_fft, config.window)
    return FeatureMatrix(values, config.frame_len_s, config.hop_s, config.n_fft, air.sample_rate)


@dataclass
class Standardizer:
    """Per-frequency-bin mean and standard deviation from training features."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Standardizer":
        # features: (n, T, F)
        flat = features.reshape(-1, features.shape[-1]).astype(np.float64)
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        std = np.where(std > 1e-8, std, 1.0)
        # rounded to float32 so a checkpoint round trip is exact
        return cls(mean.astype(np.float32).astype(np.float64), std.astype(np.float32).astype(np.float64))

    def __call__(self, features: np.ndarray) -> np.ndarray:
        return ((features - self.mean) / self.std).astype(features.dtype, copy=False)


def save_feature_cache(fm: FeatureMatrix, path: str | Path) -> None:
    """16-byte header (magic, T, F, reserved) then row-major little-endian float32."""
    T, F = fm.values.shape
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<III", T, F, 0))
        fh.write(np.ascontiguousarray(fm.values, dtype="<f4").tobytes())


def load_feature_cache(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise ValueError(f"{path} is not a feature cache file")
    T, F, _ = struct.unpack("<III", raw[4:16])
    values = np.frombuffer(raw, dtype="<f4", offset=16)
    if values.size != T * F:
        raise ValueError(f"{path}: expected {T * F} values, found {values.size}")
    return values.reshape(T, F).astype(np.float32)
