"""Incremental inference with ring buffers.

Input is re-blocked into two-hop quanta: block ``k`` needs input samples
``[320k, 320k + 480)`` (STFT frames ``2k`` and ``2k + 1``) and completes
output samples ``[320k, 320k + 320)``. Each time-causal convolution keeps
its last ``kernel_time - stride`` input frames; the synthesis stage keeps
one hop of overlap-add tail.

Output is released as a fixed 480-sample delay line: after ``N`` input
samples exactly ``max(0, N - 480)`` output samples have been emitted, so
output sample ``j`` leaves the engine 480 samples after input sample ``j``
entered it. ``finalize`` flushes the remainder.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F

from .model import ArchConfig, ModelWeights, apply_output, compress, parameter_shapes, sqrt_hann, to_torch

CHUNK_SECONDS = 0.020
# published single-core figures, kept for comparison only
REFERENCE_POINT = {"processing_ms_per_20ms_chunk": 1.81, "total_latency_ms": 31.81}


@dataclass
class StreamState:
    arch: ArchConfig
    params: dict
    history: dict
    pending: np.ndarray
    overlap: np.ndarray
    ready: np.ndarray
    consumed: int = 0
    emitted: int = 0
    blocks: int = 0

    @property
    def num_buffers(self) -> int:
        return len(self.history)

    @property
    def latency_samples(self) -> int:
        return self.arch.latency_samples

    def buffer_elements(self) -> int:
        """Total number of stored values (constant for a given architecture)."""
        return sum(int(h.numel()) for h in self.history.values()) + self.overlap.size


def _history_shapes(arch: ArchConfig) -> dict[str, tuple]:
    """Ring buffer shape ``(1, in_ch, frames, bins)`` of every time-causal conv."""
    sizes = arch.freq_sizes()
    kt, stride = arch.kernel_time, arch.bottleneck_time_stride
    enc = arch.encoder_channels
    shapes = {}
    prev = arch.in_planes
    for i, c in enumerate(enc):
        shapes[f"enc{i}.time"] = (1, prev, kt - 1, sizes[i])
        prev = c
    shapes["bottleneck.down"] = (1, prev, kt - stride, sizes[-1])
    shapes["bottleneck.time"] = (1, prev, kt - 1, sizes[-1])
    for i in reversed(range(len(enc))):
        shapes[f"dec{i}.time"] = (1, 2 * enc[i], kt - 1, sizes[i])
    return shapes


def init_stream(w: ModelWeights) -> StreamState:
    expected = parameter_shapes(w.arch)
    if set(expected) != set(w.tensors) or any(
            tuple(w.tensors[k].shape) != v for k, v in expected.items()):
        raise ValueError("weights do not match their architecture")
    arch = w.arch
    history = {name: torch.zeros(shape) for name, shape in _history_shapes(arch).items()}
    hop = arch.stft.hop_length
    return StreamState(arch, to_torch(w), history, np.zeros((arch.num_inputs, 0)),
                       np.zeros(arch.stft.window_length - hop, dtype=np.float32),
                       np.zeros(0))


def _conv(state: StreamState, x: torch.Tensor, name: str, stride=(1, 1)) -> torch.Tensor:
    w = state.params[f"{name}.weight"]
    b = state.params[f"{name}.bias"]
    pad_f = w.shape[-1] // 2
    if name in state.history:
        x = torch.cat([state.history[name], x], dim=2)
        keep = state.history[name].shape[2]
        state.history[name] = x[:, :, x.shape[2] - keep:]
    x = F.pad(x, (pad_f, pad_f, 0, 0))
    return F.conv2d(x, w, b, stride=stride)


def _block(state: StreamState, frames: np.ndarray) -> np.ndarray:
    """One two-frame block: ``(sources, 480)`` input samples -> 320 output samples."""
    arch = state.arch
    cfg = arch.stft
    win = sqrt_hann(cfg.window_length)
    x = torch.tensor(frames, dtype=torch.float32)
    spec = torch.fft.rfft(x.unfold(-1, cfg.window_length, cfg.hop_length) * win, dim=-1)
    planes = []
    for s in spec:
        planes.extend([s.real, s.imag])
    h = torch.stack(planes)[None]
    y0 = h[0, :2]
    h = compress(h, arch.input_compression)
    act = lambda t: F.leaky_relu(t, arch.leaky_slope)  # noqa: E731
    skips = []
    for i in range(len(arch.encoder_channels)):
        h = act(_conv(state, h, f"enc{i}.time"))
        skips.append(h)
        h = act(_conv(state, h, f"enc{i}.down", (1, arch.freq_stride)))
    h = act(_conv(state, h, "bottleneck.down", (arch.bottleneck_time_stride, 1)))
    h = act(_conv(state, h, "bottleneck.time"))
    h = torch.repeat_interleave(h, arch.bottleneck_time_stride, dim=2)
    for i in reversed(range(len(arch.encoder_channels))):
        skip = skips[i]
        h = torch.repeat_interleave(h, arch.freq_stride, dim=-1)[..., :skip.shape[-1]]
        h = act(_conv(state, h, f"dec{i}.up"))
        h = act(_conv(state, torch.cat([h, skip], dim=1), f"dec{i}.time"))
    out = apply_output(_conv(state, h, "out")[0], y0, arch)
    chunks = torch.fft.irfft(torch.complex(out[0], out[1]), n=cfg.window_length, dim=-1) * win
    chunks = chunks.numpy()
    hop = cfg.hop_length
    n_out = arch.block_samples
    # overlap-add of the two frames onto the carried tail
    acc = np.zeros(n_out + cfg.window_length - hop, dtype=np.float32)
    acc[:state.overlap.size] += state.overlap
    for f in range(chunks.shape[0]):
        acc[f * hop:f * hop + cfg.window_length] += chunks[f]
    state.overlap = acc[n_out:].copy()
    return acc[:n_out].astype(np.float64)


def process_chunk(state: StreamState, *sources) -> np.ndarray:
    """Feed equal-length chunks (one per model input) and return released output samples."""
    arch = state.arch
    if len(sources) != arch.num_inputs:
        raise ValueError(f"stream expects {arch.num_inputs} source chunk(s), got {len(sources)}")
    chunk = np.stack([np.asarray(getattr(s, "samples", s), dtype=np.float64).reshape(-1)
                      for s in sources])
    state.pending = np.concatenate([state.pending, chunk], axis=1)
    state.consumed += chunk.shape[1]
    need = arch.latency_samples
    step = arch.block_samples
    produced = [state.ready]
    with torch.no_grad():
        while state.pending.shape[1] >= need:
            produced.append(_block(state, state.pending[:, :need]))
            state.pending = state.pending[:, step:]
            state.blocks += 1
    ready = np.concatenate(produced)
    release = max(0, state.consumed - arch.latency_samples) - state.emitted
    state.emitted += release
    state.ready = ready[release:]
    return ready[:release]


def finalize(state: StreamState) -> np.ndarray:
    """Flush everything still held; total output then equals the total input length.

    An incomplete trailing block is not processed (matching the offline pass,
    which drops a trailing odd frame); its samples come out as zeros.
    """
    tail = np.concatenate([state.ready, state.overlap.astype(np.float64)])
    remaining = state.consumed - state.emitted
    out = np.zeros(remaining)
    n = min(remaining, tail.size)
    out[:n] = tail[:n]
    state.emitted += remaining
    state.ready = np.zeros(0)
    state.overlap = np.zeros_like(state.overlap)
    state.pending = state.pending[:, :0]
    return out


def stream(w: ModelWeights, sources, chunk_size: int) -> np.ndarray:
    """Run a whole signal through a fresh stream in chunks of ``chunk_size``."""
    state = init_stream(w)
    sources = [np.asarray(getattr(s, "samples", s), dtype=np.float64) for s in sources]
    n = len(sources[0])
    outs = []
    for start in range(0, n, chunk_size):
        outs.append(process_chunk(state, *[s[start:start + chunk_size] for s in sources]))
    outs.append(finalize(state))
    return np.concatenate(outs)


@dataclass
class LatencyReport:
    algorithmic_latency_samples: int
    algorithmic_latency_ms: float
    chunk_seconds: float
    num_chunks: int
    mean_processing_seconds: float
    p95_processing_seconds: float
    real_time_factor: float
    p95_real_time_factor: float
    reference: dict = field(default_factory=lambda: dict(REFERENCE_POINT))

    def to_dict(self) -> dict:
        return asdict(self)


def profile_stream(state: StreamState, duration: float = 5.0, seed: int = 0) -> LatencyReport:
    """Wall-clock cost of each 20 ms chunk of synthetic input."""
    arch = state.arch
    rate = arch.stft.sample_rate
    chunk = int(round(CHUNK_SECONDS * rate))
    n_chunks = max(1, int(round(duration / CHUNK_SECONDS)))
    rng = np.random.default_rng(seed)
    times = []
    for _ in range(n_chunks):
        x = rng.normal(size=(arch.num_inputs, chunk)) * 0.1
        t0 = time.perf_counter()
        process_chunk(state, *x)
        times.append(time.perf_counter() - t0)
    times = np.asarray(times)
    mean = float(times.mean())
    p95 = float(np.percentile(times, 95))
    latency = arch.latency_samples
    return LatencyReport(latency, 1000.0 * latency / rate, CHUNK_SECONDS, n_chunks,
                         mean, p95, mean / CHUNK_SECONDS, p95 / CHUNK_SECONDS)
