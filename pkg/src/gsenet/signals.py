"""Built-in synthetic sources and WAV-directory providers.

The synthetic "speech" is a sequence of voiced syllables: a harmonic series
on a gliding pitch contour, shaped by random formant resonances and a
syllabic envelope, with occasional unvoiced noise bursts between syllables.
Voiced segments carry breathy aspiration noise, and the whole clip sits on
a faint full-band recording floor (45 dB below the speech), so like a real
close-talk recording it is never exactly silent. It is not intelligible,
but it has the on/off structure and harmonic spectra that make interfering
speech hard to separate spectrally.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.signal import lfilter, butter, sosfilt

from .audio_io import PIPELINE_RATE, read_wav


def _resonator(freq: float, bandwidth: float, fs: int):
    r = np.exp(-np.pi * bandwidth / fs)
    theta = 2.0 * np.pi * freq / fs
    a = [1.0, -2.0 * r * np.cos(theta), r * r]
    b = [1.0 - r]
    return b, a


def synthetic_speech(rng: np.random.Generator, num_samples: int,
                     sample_rate: int = PIPELINE_RATE) -> np.ndarray:
    fs = sample_rate
    out = np.zeros(num_samples)
    base_f0 = rng.uniform(90.0, 240.0)
    pos = int(rng.uniform(0.0, 0.15) * fs)
    while pos < num_samples:
        dur = int(rng.uniform(0.10, 0.32) * fs)
        n = np.arange(dur)
        t = n / fs
        f0 = base_f0 * np.exp(rng.normal(0.0, 0.12)) * (1.0 + rng.uniform(-0.25, 0.25) * t / t[-1])
        f0 = f0 * (1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(4, 7) * t))
        phase = 2.0 * np.pi * np.cumsum(f0) / fs
        n_harm = int(min(80, 7600.0 / f0.max()))
        seg = np.zeros(dur)
        for h in range(1, n_harm + 1):
            seg += np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / h ** 0.8
        breath = sosfilt(butter(1, 1000.0, "highpass", fs=fs, output="sos"), rng.normal(size=dur))
        seg += rng.uniform(0.02, 0.08) * breath
        for _ in range(3):
            fc = rng.uniform(250.0, 3200.0)
            b, a = _resonator(fc, rng.uniform(60.0, 250.0), fs)
            seg = seg + 2.0 * lfilter(b, a, seg)
        env = np.sin(np.pi * n / dur) ** rng.uniform(0.5, 1.5)
        seg *= env * rng.uniform(0.4, 1.0)
        end = min(num_samples, pos + dur)
        out[pos:end] += seg[:end - pos]
        pos += dur
        if rng.random() < 0.35 and pos < num_samples:
            burst = int(rng.uniform(0.03, 0.09) * fs)
            sos = butter(2, rng.uniform(2500.0, 5000.0), "highpass", fs=fs, output="sos")
            noise = sosfilt(sos, rng.normal(size=burst)) * np.hanning(burst)
            end = min(num_samples, pos + burst)
            out[pos:end] += 0.3 * noise[:end - pos] * np.std(seg)
            pos += burst
        pos += int(rng.uniform(0.03, 0.25) * fs)
    out = _unit_power(out, rng)
    floor = lfilter([1.0], [1.0, -0.9], rng.normal(size=num_samples))
    out += floor * 10.0 ** (-45.0 / 20.0) / np.sqrt(np.mean(floor * floor))
    return _unit_power(out, rng)


def synthetic_noise(rng: np.random.Generator, num_samples: int,
                    sample_rate: int = PIPELINE_RATE) -> np.ndarray:
    """Stationary-ish coloured noise with a random spectral shape and slow modulation."""
    fs = sample_rate
    x = rng.normal(size=num_samples)
    kind = rng.integers(3)
    if kind == 0:
        sos = butter(2, rng.uniform(300.0, 3000.0), "lowpass", fs=fs, output="sos")
    elif kind == 1:
        lo = rng.uniform(100.0, 1500.0)
        sos = butter(2, [lo, min(lo * rng.uniform(2.0, 6.0), 0.45 * fs)], "bandpass",
                     fs=fs, output="sos")
    else:
        sos = butter(1, rng.uniform(50.0, 400.0), "highpass", fs=fs, output="sos")
    x = sosfilt(sos, x)
    t = np.arange(num_samples) / fs
    x *= 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.1, 1.0) * t + rng.uniform(0, 2 * np.pi))
    return _unit_power(x, rng)


def _unit_power(x: np.ndarray, rng) -> np.ndarray:
    p = np.mean(x * x)
    if p <= 0:
        x = rng.normal(size=x.shape) * 1e-3
        p = np.mean(x * x)
    return x / np.sqrt(p)


GENERATORS = {"speech": synthetic_speech, "noise": synthetic_noise}


class ClipProvider:
    """Yields fixed-length unit-power clips.

    ``spec`` is either ``"builtin:speech"`` / ``"builtin:noise"`` or a directory
    of WAV files at the pipeline rate. Directory clips are random excerpts
    (zero-padded if short); ``loop=False`` raises ``StopIteration`` once every
    file has been used.
    """

    def __init__(self, spec: str, num_samples: int, seed: int = 0,
                 sample_rate: int = PIPELINE_RATE, loop: bool = True):
        self.spec = spec
        self.num_samples = num_samples
        self.sample_rate = sample_rate
        self.loop = loop
        self.rng = np.random.default_rng(seed)
        if spec.startswith("builtin:"):
            name = spec.split(":", 1)[1]
            if name not in GENERATORS:
                raise ValueError(f"unknown builtin generator {name!r}")
            self._gen = GENERATORS[name]
            self.files = None
        else:
            self.files = sorted(Path(spec).glob("*.wav"))
            if not self.files:
                raise ValueError(f"no WAV files in {spec}")
            self._order = list(self.rng.permutation(len(self.files)))
        self._used = 0

    def __iter__(self) -> Iterator[np.ndarray]:
        return self

    def __next__(self) -> np.ndarray:
        if self.files is None:
            return self._gen(self.rng, self.num_samples, self.sample_rate)
        if self._used >= len(self.files):
            if not self.loop:
                raise StopIteration
            self._order = list(self.rng.permutation(len(self.files)))
            self._used = 0
        path = self.files[self._order[self._used]]
        self._used += 1
        wave = read_wav(path, expected_rate=self.sample_rate)
        x = wave.data[0]
        if len(x) > self.num_samples:
            start = self.rng.integers(0, len(x) - self.num_samples + 1)
            x = x[start:start + self.num_samples]
        else:
            x = np.pad(x, (0, self.num_samples - len(x)))
        return _unit_power(x, self.rng)
