"""WAV audio, GSEW weight files and JSON configuration.

PCM-16 samples are decoded by dividing by 32768, so the representable range
is [-1, 1 - 2**-15] and -32768 maps to exactly -1.0. Encoding clamps to
[-1, 1] and rounds half away from zero.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np

PIPELINE_RATE = 16000

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE

WEIGHTS_MAGIC = b"GSEW"
WEIGHTS_VERSION = 1


class WavError(ValueError):
    """Raised for malformed or unsupported WAV files."""


class WeightFileError(ValueError):
    """Raised for malformed GSEW weight files."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("Waveform samples must be one-dimensional")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass
class MultichannelWaveform:
    """Equal-length channels stored as a ``(channels, samples)`` array."""

    data: np.ndarray
    sample_rate: int

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = data[None, :]
        if data.ndim != 2 or data.shape[0] < 1:
            raise ValueError("MultichannelWaveform needs shape (channels>=1, samples)")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        self.data = data
        self.sample_rate = int(self.sample_rate)

    @classmethod
    def from_channels(cls, channels) -> "MultichannelWaveform":
        channels = list(channels)
        if not channels:
            raise ValueError("at least one channel is required")
        rates = {c.sample_rate for c in channels}
        lengths = {len(c) for c in channels}
        if len(rates) != 1:
            raise ValueError(f"channels have differing sample rates {sorted(rates)}")
        if len(lengths) != 1:
            raise ValueError(f"channels have differing lengths {sorted(lengths)}")
        return cls(np.stack([c.samples for c in channels]), rates.pop())

    @property
    def num_channels(self) -> int:
        return self.data.shape[0]

    @property
    def num_samples(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> list[Waveform]:
        return [Waveform(ch, self.sample_rate) for ch in self.data]

    def channel(self, index: int) -> Waveform:
        return Waveform(self.data[index], self.sample_rate)


def check_rate(sample_rate: int, expected: int = PIPELINE_RATE) -> None:
    if sample_rate != expected:
        raise ValueError(
            f"sample rate {sample_rate} Hz does not match the pipeline rate "
            f"{expected} Hz (no resampling is performed)")


def _iter_chunks(buf: bytes, start: int):
    pos = start
    while pos < len(buf):
        if len(buf) - pos < 8:
            raise WavError("truncated chunk header")
        cid, size = struct.unpack_from("<4sI", buf, pos)
        body = pos + 8
        if body + size > len(buf):
            raise WavError(
                f"chunk {cid!r} declares {size} bytes but only "
                f"{len(buf) - body} remain")
        yield cid, body, size
        pos = body + size + (size & 1)
        # a missing pad byte after the final chunk is tolerated
        if pos == len(buf) + 1:
            pos = len(buf)


def read_wav(path, expected_rate: int | None = None) -> MultichannelWaveform:
    """Read a PCM-16 or IEEE float-32 RIFF/WAVE file.

    Parameters
    ----------
    path : str or Path
        File to read.
    expected_rate : int, optional
        If given, a file at any other sample rate raises ``ValueError``.

    Returns
    -------
    MultichannelWaveform
        Samples as float64 in the file's channel order.
    """
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[0:4] != b"RIFF" or buf[8:12] != b"WAVE":
        raise WavError(f"{path}: not a RIFF/WAVE file")
    riff_size = struct.unpack_from("<I", buf, 4)[0]
    if riff_size + 8 != len(buf):
        raise WavError(
            f"{path}: RIFF size {riff_size + 8} disagrees with file size {len(buf)}")

    fmt = None
    data = None
    for cid, body, size in _iter_chunks(buf, 12):
        if cid == b"fmt ":
            if size < 16:
                raise WavError(f"{path}: fmt chunk too short")
            tag, channels, rate, _, block_align, bits = struct.unpack_from(
                "<HHIIHH", buf, body)
            if tag == _WAVE_FORMAT_EXTENSIBLE:
                if size < 40:
                    raise WavError(f"{path}: extensible fmt chunk too short")
                tag = struct.unpack_from("<H", buf, body + 24)[0]
            fmt = (tag, channels, rate, block_align, bits)
        elif cid == b"data":
            data = (body, size)
    if fmt is None:
        raise WavError(f"{path}: missing fmt chunk")
    if data is None:
        raise WavError(f"{path}: missing data chunk")

    tag, channels, rate, block_align, bits = fmt
    if channels == 0:
        raise WavError(f"{path}: zero channels")
    if tag == _WAVE_FORMAT_PCM and bits == 16:
        dtype = np.dtype("<i2")
    elif tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype = np.dtype("<f4")
    else:
        raise WavError(f"{path}: unsupported encoding (format {tag:#x}, {bits} bits)")
    if block_align != channels * dtype.itemsize:
        raise WavError(f"{path}: block align {block_align} inconsistent with format")
    if expected_rate is not None:
        check_rate(rate, expected_rate)

    body, size = data
    if size % block_align:
        raise WavError(f"{path}: data length {size} is not a whole number of frames")
    raw = np.frombuffer(buf, dtype=dtype, count=size // dtype.itemsize, offset=body)
    frames = raw.reshape(-1, channels).T
    if dtype.kind == "i":
        samples = frames.astype(np.float64) / 32768.0
    else:
        samples = frames.astype(np.float64)
    return MultichannelWaveform(samples, rate)


def _to_pcm16(samples: np.ndarray) -> np.ndarray:
    x = np.clip(samples, -1.0, 1.0) * 32768.0
    q = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return np.clip(q, -32768, 32767).astype("<i2")


def write_wav(path, wave: MultichannelWaveform | Waveform, encoding: str = "float32") -> None:
    """Write ``wave`` as PCM-16 (``"pcm16"``) or IEEE float-32 (``"float32"``)."""
    if isinstance(wave, Waveform):
        wave = MultichannelWaveform(wave.samples[None, :], wave.sample_rate)
    data = wave.data
    if not np.all(np.isfinite(data)):
        raise ValueError("cannot write non-finite samples")
    channels = data.shape[0]
    if encoding == "pcm16":
        tag, bits = _WAVE_FORMAT_PCM, 16
        payload = _to_pcm16(data.T).tobytes()
    elif encoding == "float32":
        tag, bits = _WAVE_FORMAT_IEEE_FLOAT, 32
        payload = data.T.astype("<f4").tobytes()
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    block_align = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, wave.sample_rate,
                      wave.sample_rate * block_align, block_align, bits)
    pad = b"\x00" if len(payload) & 1 else b""
    chunks = (b"fmt " + struct.pack("<I", len(fmt)) + fmt
              + b"data" + struct.pack("<I", len(payload)) + payload + pad)
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks)


def save_weights(path, weights) -> None:
    """Serialize named tensors in the GSEW little-endian format.

    ``weights`` is a mapping or a sequence of ``(name, tensor)`` pairs; order
    is preserved on load.
    """
    items = list(weights.items()) if isinstance(weights, Mapping) else list(weights)
    names = [name for name, _ in items]
    if len(set(names)) != len(names):
        raise WeightFileError("duplicate tensor names")
    parts = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(items))]
    for name, tensor in items:
        arr = np.asarray(tensor, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_weights(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise WeightFileError(f"{path}: truncated weight file")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != WEIGHTS_MAGIC:
        raise WeightFileError(f"{path}: bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != WEIGHTS_VERSION:
        raise WeightFileError(f"{path}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        if name in out:
            raise WeightFileError(f"{path}: duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims)
        out[name] = arr.astype(np.float32)
    if pos != len(buf):
        raise WeightFileError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def encode_json_tensor(obj: Any) -> np.ndarray:
    """Pack a JSON document into a float32 tensor of byte values."""
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def decode_json_tensor(tensor: np.ndarray) -> Any:
    raw = np.asarray(tensor).astype(np.uint8).tobytes()
    return json.loads(raw.decode("utf-8"))


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: configuration must be a JSON object")
    return cfg
