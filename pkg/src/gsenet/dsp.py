"""STFT analysis/synthesis, convolution and power normalization.

Frames are never centered or padded at the signal start: frame ``t`` covers
samples ``[t * hop, t * hop + window)``, so no frame looks ahead of the
newest sample it contains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .audio_io import Waveform


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 320
    hop_length: int = 160
    window: str = "sqrt-hann"
    sample_rate: int = 16000

    def __post_init__(self):
        if self.window != "sqrt-hann":
            raise ValueError(f"unsupported window {self.window!r}")
        if not 0 < self.hop_length <= self.window_length:
            raise ValueError("need 0 < hop_length <= window_length")

    @property
    def num_bins(self) -> int:
        return self.window_length // 2 + 1

    def num_frames(self, length: int) -> int:
        if length < self.window_length:
            return 0
        return (length - self.window_length) // self.hop_length + 1


MODEL_STFT = StftConfig(320, 160)
LOSS_STFT = StftConfig(1024, 256)


@dataclass
class Spectrogram:
    """Complex STFT frames, shape ``(..., frames, bins)``."""

    frames: np.ndarray
    config: StftConfig

    @property
    def num_frames(self) -> int:
        return self.frames.shape[-2]


def analysis_window(length: int) -> np.ndarray:
    """Periodic sqrt-Hann; its square sums to one at 50% overlap."""
    n = np.arange(length)
    return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * n / length))


def _samples(x, cfg: StftConfig) -> np.ndarray:
    if isinstance(x, Waveform):
        if x.sample_rate != cfg.sample_rate:
            raise ValueError(
                f"waveform rate {x.sample_rate} Hz != STFT rate {cfg.sample_rate} Hz")
        return x.samples
    return np.asarray(x, dtype=np.float64)


def frame_signal(x: np.ndarray, window_length: int, hop_length: int) -> np.ndarray:
    """Strided view of ``x[..., n]`` as ``(..., frames, window_length)``."""
    n_frames = 0 if x.shape[-1] < window_length else (x.shape[-1] - window_length) // hop_length + 1
    if n_frames == 0:
        return np.zeros(x.shape[:-1] + (0, window_length), dtype=x.dtype)
    view = np.lib.stride_tricks.sliding_window_view(x, window_length, axis=-1)
    return view[..., ::hop_length, :][..., :n_frames, :]


def stft(x, cfg: StftConfig = MODEL_STFT) -> Spectrogram:
    """Short-time Fourier transform over the last axis of ``x``.

    ``x`` may be a :class:`Waveform` (its rate is checked against ``cfg``) or
    an array of shape ``(..., samples)``.
    """
    samples = _samples(x, cfg)
    frames = frame_signal(samples, cfg.window_length, cfg.hop_length)
    spec = np.fft.rfft(frames * analysis_window(cfg.window_length), axis=-1)
    return Spectrogram(spec, cfg)


def istft(spec: Spectrogram, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`.

    The result has ``(frames - 1) * hop + window`` samples unless ``length``
    is given, in which case it is cropped or zero-padded to that length.
    """
    cfg = spec.config
    frames = np.asarray(spec.frames)
    if frames.shape[-1] != cfg.num_bins:
        raise ValueError(
            f"spectrogram has {frames.shape[-1]} bins, config expects {cfg.num_bins}")
    n_frames = frames.shape[-2]
    win = analysis_window(cfg.window_length)
    chunks = np.fft.irfft(frames, n=cfg.window_length, axis=-1) * win
    total = (n_frames - 1) * cfg.hop_length + cfg.window_length if n_frames else 0
    out = np.zeros(frames.shape[:-2] + (total,))
    for t in range(n_frames):
        start = t * cfg.hop_length
        out[..., start:start + cfg.window_length] += chunks[..., t, :]
    if length is not None:
        if length <= total:
            out = out[..., :length]
        else:
            pad = [(0, 0)] * (out.ndim - 1) + [(0, length - total)]
            out = np.pad(out, pad)
    return out


def convolve(x, h) -> np.ndarray:
    """Full linear convolution, ``len(x) + len(h) - 1`` samples."""
    x_rate = getattr(x, "sample_rate", None)
    h_rate = getattr(h, "sample_rate", None)
    if x_rate is not None and h_rate is not None and x_rate != h_rate:
        raise ValueError(f"sample rates differ: {x_rate} vs {h_rate}")
    xs = np.asarray(getattr(x, "samples", x), dtype=np.float64)
    hs = np.asarray(getattr(h, "taps", getattr(h, "samples", h)), dtype=np.float64)
    if xs.size == 0 or hs.size == 0:
        raise ValueError("cannot convolve an empty sequence")
    return fftconvolve(xs, hs)


def normalize_power(x: np.ndarray, energy: bool = False) -> np.ndarray:
    """Scale ``x`` to unit mean square, or unit total energy if ``energy``."""
    x = np.asarray(x, dtype=np.float64)
    power = np.sum(x * x) if energy else np.mean(x * x)
    if not power > 0:
        raise ValueError("cannot normalize an all-zero signal")
    return x / np.sqrt(power)


def power(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))
