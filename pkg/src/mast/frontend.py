"""Waveform to log-mel spectrogram."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError

LOG_FLOOR = 1e-10
PAD_VALUE = math.log(LOG_FLOOR)


@dataclass(frozen=True)
class SpectrogramConfig:
    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 1024
    n_mels: int = 128
    target_frames: int = 1024
    mel_scale: str = "htk"
    normalize_mean: float = 0.0
    normalize_std: float = 0.5

    def __post_init__(self):
        if self.mel_scale != "htk":
            raise ConfigError(f"unsupported mel scale {self.mel_scale!r}")
        if self.n_mels < 1 or self.target_frames < 1:
            raise ConfigError("n_mels and target_frames must be >= 1")
        if self.hop_length < 1 or self.win_length < 1:
            raise ConfigError("window and hop must span at least one sample")
        if self.n_fft < self.win_length:
            raise ConfigError(f"n_fft={self.n_fft} is shorter than the {self.win_length}-sample window")
        if self.normalize_std <= 0:
            raise ConfigError("normalize_std must be positive")

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @classmethod
    def from_json(cls, path: str | Path) -> "SpectrogramConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read frontend config {path}: {exc}") from exc
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown frontend config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Spectrogram:
    values: np.ndarray
    config: SpectrogramConfig

    def __post_init__(self):
        expected = (self.config.n_mels, self.config.target_frames)
        if self.values.shape != expected:
            raise DimensionError(f"spectrogram shape {self.values.shape} != {expected}")
        if not np.isfinite(self.values).all():
            raise DimensionError("spectrogram contains non-finite values")


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_power(wave, cfg: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    """``frames x (n_fft/2 + 1)`` power spectrum, no centre padding."""
    x = np.asarray(wave, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise DimensionError("empty waveform")
    win, hop = cfg.win_length, cfg.hop_length
    if x.size < win:
        x = np.pad(x, (0, win - x.size))
    n_frames = 1 + (x.size - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * hann_window(win)
    spec = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
    return spec.real**2 + spec.imag**2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(cfg: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    """``n_mels + 2`` frequencies (Hz) equally spaced in mel from 0 to Nyquist.

    Filter ``i`` rises from edge ``i``, peaks at edge ``i + 1`` and falls to
    zero at edge ``i + 2``.
    """
    return mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2.0), cfg.n_mels + 2))


def mel_filterbank(cfg: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    """Triangular ``n_mels x n_bins`` filterbank sampled at the FFT bin frequencies."""
    edges = mel_band_edges(cfg)
    freqs = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) == 0)
    if empty.size:
        raise ConfigError(
            f"{empty.size} mel filters contain no FFT bin (first: {empty[0]}); "
            f"increase n_fft or reduce n_mels"
        )
    return fb


def pad_or_truncate(frames: np.ndarray, target: int, pad_value: float = PAD_VALUE) -> np.ndarray:
    """Right-pad along the last axis with ``pad_value`` or cut the tail to ``target`` columns."""
    n = frames.shape[-1]
    if n >= target:
        return frames[..., :target]
    pad = [(0, 0)] * (frames.ndim - 1) + [(0, target - n)]
    return np.pad(frames, pad, constant_values=pad_value)


def normalize(spec: np.ndarray, mean: float, std: float) -> np.ndarray:
    if std <= 0:
        raise ConfigError("normalization std must be positive")
    return (spec - mean) / (2.0 * std)


def log_mel(wave, cfg: SpectrogramConfig = SpectrogramConfig()) -> Spectrogram:
    power = stft_power(wave, cfg)
    mel = power @ mel_filterbank(cfg).T
    logmel = np.log(mel + LOG_FLOOR).T
    logmel = pad_or_truncate(logmel, cfg.target_frames)
    values = normalize(logmel, cfg.normalize_mean, cfg.normalize_std)
    return Spectrogram(values.astype(np.float32), cfg)


__all__ = [
    "SpectrogramConfig",
    "Spectrogram",
    "LOG_FLOOR",
    "PAD_VALUE",
    "hann_window",
    "stft_power",
    "hz_to_mel",
    "mel_to_hz",
    "mel_band_edges",
    "mel_filterbank",
    "pad_or_truncate",
    "normalize",
    "log_mel",
]
