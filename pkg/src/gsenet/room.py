"""Shoebox image-method room impulse responses.

Absorption is uniform over the six surfaces. A target reverberation time is
mapped to absorption by calibrating against the image method's own energy
decay: Eyring's formula gives the starting point, and a few fixed-point
steps on the log reflection coefficient correct for the slower late decay
of the image lattice (images along the long axes reflect less often).
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numba
import numpy as np
from scipy.signal import butter, sosfilt

from .audio_io import MultichannelWaveform, read_wav, write_wav

KERNEL_TAPS = 81
# high-pass on the reflected field; all-positive image amplitudes otherwise
# accumulate a DC component that stretches the late decay
DC_BLOCK_HZ = 50.0
_HALF = KERNEL_TAPS // 2


@dataclass(frozen=True)
class RoomSpec:
    dimensions: tuple[float, float, float]
    absorption: float
    target_t60: float | None = None
    speed_of_sound: float = 343.0

    def __post_init__(self):
        if any(d <= 0 for d in self.dimensions):
            raise ValueError(f"room dimensions must be positive, got {self.dimensions}")
        if not 0.0 < self.absorption <= 1.0:
            raise ValueError(f"absorption must be in (0, 1], got {self.absorption}")

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dimensions
        return lx * ly * lz

    @property
    def surface(self) -> float:
        lx, ly, lz = self.dimensions
        return 2.0 * (lx * ly + lx * lz + ly * lz)

    @property
    def reflection(self) -> float:
        """Pressure reflection coefficient of every wall."""
        return math.sqrt(1.0 - self.absorption)

    def contains(self, pos, margin: float = 0.0) -> bool:
        p = np.asarray(pos, dtype=float)
        return bool(np.all(p >= margin) and np.all(p <= np.asarray(self.dimensions) - margin))

    @classmethod
    def from_t60(cls, dimensions, t60: float, speed_of_sound: float = 343.0) -> "RoomSpec":
        dims = tuple(float(d) for d in dimensions)
        return cls(dims, calibrated_absorption(dims, t60, speed_of_sound), float(t60),
                   speed_of_sound)


def eyring_absorption(dimensions, t60: float, speed_of_sound: float = 343.0) -> float:
    lx, ly, lz = dimensions
    volume = lx * ly * lz
    surface = 2.0 * (lx * ly + lx * lz + ly * lz)
    # T60 = 24 ln(10) V / (c S (-ln(1 - a)))
    k = 24.0 * math.log(10.0) * volume / (speed_of_sound * surface * t60)
    return float(min(1.0, 1.0 - math.exp(-k)))


def eyring_t60(room: RoomSpec) -> float:
    if room.absorption >= 1.0:
        return 0.0
    return (24.0 * math.log(10.0) * room.volume
            / (room.speed_of_sound * room.surface * -math.log(1.0 - room.absorption)))


@numba.njit(cache=True)
def _energy_histogram(dims, src, rcv, beta, fs, c, length):
    out = np.zeros(length)
    max_dist = length * c / fs
    nmax = np.empty(3, dtype=np.int64)
    for a in range(3):
        nmax[a] = int(max_dist / (2.0 * dims[a])) + 1
    log_b2 = 2.0 * math.log(beta)
    for nx in range(-nmax[0], nmax[0] + 1):
        for qx in range(2):
            dx = (1 - 2 * qx) * src[0] + 2 * nx * dims[0] - rcv[0]
            rx = abs(nx - qx) + abs(nx)
            for ny in range(-nmax[1], nmax[1] + 1):
                for qy in range(2):
                    dy = (1 - 2 * qy) * src[1] + 2 * ny * dims[1] - rcv[1]
                    ry = abs(ny - qy) + abs(ny)
                    dxy = dx * dx + dy * dy
                    if dxy > max_dist * max_dist:
                        continue
                    for nz in range(-nmax[2], nmax[2] + 1):
                        for qz in range(2):
                            dz = (1 - 2 * qz) * src[2] + 2 * nz * dims[2] - rcv[2]
                            rz = abs(nz - qz) + abs(nz)
                            d2 = dxy + dz * dz
                            n = int(math.sqrt(d2) * fs / c)
                            if n >= length:
                                continue
                            out[n] += math.exp((rx + ry + rz) * log_b2) / max(d2, 1e-6)
    return out


# fixed fractional source/receiver pairs spanning short and long distances
_CAL_PAIRS = np.array([
    [[0.31, 0.37, 0.43], [0.68, 0.61, 0.55]],
    [[0.15, 0.20, 0.30], [0.85, 0.75, 0.60]],
    [[0.50, 0.50, 0.50], [0.58, 0.43, 0.52]],
    [[0.20, 0.80, 0.40], [0.70, 0.30, 0.45]],
    [[0.82, 0.18, 0.35], [0.25, 0.66, 0.62]],
    [[0.40, 0.12, 0.70], [0.45, 0.88, 0.30]],
])
_CAL_RATE = 8000.0


def _ensemble_t60(dims, beta, speed_of_sound, length) -> float:
    values = []
    for src, rcv in _CAL_PAIRS:
        hist = _energy_histogram(dims, src * dims, rcv * dims, beta,
                                 _CAL_RATE, speed_of_sound, length)
        values.append(schroeder_t60(np.sqrt(hist), int(_CAL_RATE)))
    return float(np.mean(values))


def calibrated_absorption(dimensions, t60: float, speed_of_sound: float = 343.0,
                          iterations: int = 8, rtol: float = 0.01) -> float:
    """Absorption whose image-method Schroeder T60 equals ``t60``.

    The decay is averaged over energy histograms of fixed relative
    source/receiver pairs, so the result depends on the room only.
    """
    if t60 <= 0:
        raise ValueError("target T60 must be positive")
    dims = np.asarray(dimensions, dtype=np.float64)
    length = int(math.ceil(1.2 * t60 * _CAL_RATE)) + 16
    absorption = eyring_absorption(dims, t60, speed_of_sound)
    for _ in range(iterations):
        absorption = min(absorption, 0.999)
        try:
            measured = _ensemble_t60(dims, math.sqrt(1.0 - absorption), speed_of_sound, length)
        except ValueError:
            break
        if abs(measured / t60 - 1.0) < rtol:
            break
        decay = -math.log(1.0 - absorption) * measured / t60
        absorption = 1.0 - math.exp(-decay)
    return float(min(max(absorption, 1e-4), 1.0))


@dataclass
class Rir:
    taps: np.ndarray
    sample_rate: int
    direct_path_delay: float

    def __len__(self) -> int:
        return len(self.taps)


@dataclass
class RoomLayout:
    room: RoomSpec
    sources: np.ndarray
    receivers: np.ndarray


@dataclass
class RirSet:
    """RIRs indexed ``[source, receiver]``."""

    rirs: list[list[Rir]]
    sources: np.ndarray
    receivers: np.ndarray
    room: RoomSpec | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.rirs) != len(self.sources):
            raise ValueError("one RIR row per source is required")
        for row in self.rirs:
            if len(row) != len(self.receivers):
                raise ValueError("incomplete RIR grid")
        rates = {r.sample_rate for row in self.rirs for r in row}
        if len(rates) > 1:
            raise ValueError("RIRs have mixed sample rates")

    def __getitem__(self, key: tuple[int, int]) -> Rir:
        k, j = key
        return self.rirs[k][j]

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.sources), len(self.receivers)

    @property
    def sample_rate(self) -> int:
        return self.rirs[0][0].sample_rate


@dataclass(frozen=True)
class SamplingRanges:
    x: tuple[float, float] = (3.0, 10.0)
    y: tuple[float, float] = (3.0, 10.0)
    z: tuple[float, float] = (2.5, 4.0)
    t60: tuple[float, float] = (0.15, 0.7)
    wall_margin: float = 0.3
    receiver_spread: float = 0.05


def sample_room(rng: np.random.Generator, ranges: SamplingRanges = SamplingRanges(),
                num_sources: int = 3, num_receivers: int = 2) -> RoomLayout:
    """Draw a random shoebox room with sources and a tight receiver cluster.

    Every receiver lies within ``receiver_spread / 2`` of the cluster centre,
    so all receiver pairs are at most ``receiver_spread`` apart.
    """
    for lo, hi in (ranges.x, ranges.y, ranges.z, ranges.t60):
        if lo > hi:
            raise ValueError(f"invalid range ({lo}, {hi})")
    m = ranges.wall_margin
    r = ranges.receiver_spread / 2.0
    if min(ranges.x[0], ranges.y[0], ranges.z[0]) <= 2 * (m + r):
        raise ValueError("wall margin does not fit in the smallest room")

    dims = (rng.uniform(*ranges.x), rng.uniform(*ranges.y), rng.uniform(*ranges.z))
    t60 = rng.uniform(*ranges.t60)
    room = RoomSpec.from_t60(dims, t60)
    hi = np.asarray(dims)
    sources = rng.uniform(m, hi - m, size=(num_sources, 3))
    centre = rng.uniform(m + r, hi - m - r)
    offsets = rng.normal(size=(num_receivers, 3))
    offsets /= np.linalg.norm(offsets, axis=1, keepdims=True)
    offsets *= r * rng.uniform(0.0, 1.0, size=(num_receivers, 1)) ** (1.0 / 3.0)
    return RoomLayout(room, sources, centre + offsets)


@numba.njit(cache=True)
def _image_rir(dims, src, rcv, beta, fs, c, length, max_order):
    direct = np.zeros(length)
    reflected = np.zeros(length)
    lx, ly, lz = dims[0], dims[1], dims[2]
    max_dist = (length + _HALF) * c / fs
    nx_max = int(max_dist / (2.0 * lx)) + 1
    ny_max = int(max_dist / (2.0 * ly)) + 1
    nz_max = int(max_dist / (2.0 * lz)) + 1
    log_beta = math.log(beta) if beta > 0.0 else -np.inf
    for nx in range(-nx_max, nx_max + 1):
        for qx in range(2):
            dx = (1 - 2 * qx) * src[0] + 2 * nx * lx - rcv[0]
            rx = abs(nx - qx) + abs(nx)
            for ny in range(-ny_max, ny_max + 1):
                for qy in range(2):
                    dy = (1 - 2 * qy) * src[1] + 2 * ny * ly - rcv[1]
                    ry = abs(ny - qy) + abs(ny)
                    dxy = dx * dx + dy * dy
                    if dxy > max_dist * max_dist:
                        continue
                    for nz in range(-nz_max, nz_max + 1):
                        for qz in range(2):
                            dz = (1 - 2 * qz) * src[2] + 2 * nz * lz - rcv[2]
                            rz = abs(nz - qz) + abs(nz)
                            dist = math.sqrt(dxy + dz * dz)
                            delay = dist * fs / c
                            if delay >= length + _HALF:
                                continue
                            order = rx + ry + rz
                            if max_order >= 0 and order > max_order:
                                continue
                            out = reflected
                            if order == 0:
                                gain = 1.0
                                out = direct
                            elif beta == 0.0:
                                continue
                            else:
                                gain = math.exp(order * log_beta)
                            amp = gain / (4.0 * math.pi * max(dist, 1e-3))
                            n0 = int(math.floor(delay + 0.5))
                            frac = n0 - delay
                            # sin(pi (n - d)) alternates sign over integer n
                            s0 = math.sin(math.pi * frac)
                            for k in range(-_HALF, _HALF + 1):
                                n = n0 + k
                                if n < 0 or n >= length:
                                    continue
                                t = frac + k
                                win = 0.5 * (1.0 + math.cos(math.pi * t / (_HALF + 1)))
                                if abs(t) < 1e-9:
                                    sinc = 1.0
                                else:
                                    sign = 1.0 if abs(k) % 2 == 0 else -1.0
                                    sinc = sign * s0 / (math.pi * t)
                                out[n] += amp * win * sinc
    return direct, reflected


@functools.lru_cache(maxsize=8)
def _dc_block(sample_rate: int) -> np.ndarray:
    return butter(2, DC_BLOCK_HZ, "highpass", fs=sample_rate, output="sos")


def rir_length(room: RoomSpec, sample_rate: int) -> int:
    """Taps covering one T60 (target if set, else the Eyring estimate)."""
    t60 = room.target_t60 if room.target_t60 is not None else eyring_t60(room)
    return int(math.ceil(max(t60, 0.05) * sample_rate)) + KERNEL_TAPS


def image_method_rir(room: RoomSpec, source, receiver, sample_rate: int = 16000,
                     length: int | None = None, max_order: int | None = None) -> Rir:
    """Image-method RIR from ``source`` to ``receiver``.

    All image sources whose delay falls inside ``length`` taps contribute
    ``reflection**order / (4 pi distance)``, placed with an 81-tap
    Hann-windowed sinc at the fractional delay ``distance / c``. The
    reflected part is high-passed at ``DC_BLOCK_HZ``; the direct path is
    left untouched. The default length covers the room's target T60;
    ``max_order`` limits the total reflection count per image (``None``:
    every image inside the length).
    """
    src = np.asarray(source, dtype=np.float64)
    rcv = np.asarray(receiver, dtype=np.float64)
    if not room.contains(src):
        raise ValueError(f"source {src} lies outside the room {room.dimensions}")
    if not room.contains(rcv):
        raise ValueError(f"receiver {rcv} lies outside the room {room.dimensions}")
    if length is None:
        length = rir_length(room, sample_rate)
    direct, reflected = _image_rir(np.asarray(room.dimensions, dtype=np.float64), src, rcv,
                                   room.reflection, float(sample_rate),
                                   room.speed_of_sound, int(length),
                                   -1 if max_order is None else int(max_order))
    taps = direct + sosfilt(_dc_block(sample_rate), reflected)
    delay = float(np.linalg.norm(src - rcv) * sample_rate / room.speed_of_sound)
    return Rir(taps, sample_rate, delay)


def layout_rirs(layout: RoomLayout, sample_rate: int = 16000, seed: int | None = None) -> RirSet:
    length = rir_length(layout.room, sample_rate)
    rirs = [[image_method_rir(layout.room, s, r, sample_rate, length)
             for r in layout.receivers] for s in layout.sources]
    return RirSet(rirs, np.asarray(layout.sources), np.asarray(layout.receivers),
                  layout.room, seed)


def anechoic_rir(r: Rir) -> Rir:
    """Keep only the strongest tap, at its original index and value."""
    taps = np.asarray(r.taps)
    if not np.any(taps):
        raise ValueError("cannot extract the direct path of an all-zero RIR")
    idx = int(np.argmax(np.abs(taps)))
    out = np.zeros_like(taps)
    out[idx] = taps[idx]
    return Rir(out, r.sample_rate, r.direct_path_delay)


def schroeder_t60(taps: np.ndarray, sample_rate: int, fit_range=(-5.0, -25.0)) -> float:
    """Reverberation time from a linear fit to the Schroeder decay curve.

    The energy decay curve between ``fit_range`` dB (T20 by default) is fitted
    by least squares and extrapolated to a 60 dB decay.
    """
    energy = np.asarray(taps, dtype=np.float64) ** 2
    edc = np.cumsum(energy[::-1])[::-1]
    if edc[0] <= 0:
        raise ValueError("all-zero impulse response")
    # start the curve at the direct sound
    start = int(np.argmax(np.abs(taps)))
    edc = edc[start:]
    edc_db = 10.0 * np.log10(np.maximum(edc / edc[0], 1e-300))
    hi, lo = fit_range
    idx = np.nonzero((edc_db <= hi) & (edc_db >= lo))[0]
    if idx.size < 2:
        raise ValueError("decay curve does not span the fit range")
    t = idx / sample_rate
    slope, _ = np.polyfit(t, edc_db[idx], 1)
    if slope >= 0:
        raise ValueError("non-decaying impulse response")
    return float(-60.0 / slope)


def save_rirset(path, rirs: RirSet) -> None:
    """Write a RIR set as float-32 WAV plus a ``.json`` sidecar.

    Channels are ordered source-major: channel ``k * receivers + j`` holds
    the RIR from source ``k`` to receiver ``j``.
    """
    path = Path(path)
    n_src, n_rcv = rirs.shape
    length = max(len(rirs[k, j]) for k in range(n_src) for j in range(n_rcv))
    data = np.zeros((n_src * n_rcv, length))
    for k in range(n_src):
        for j in range(n_rcv):
            taps = rirs[k, j].taps
            data[k * n_rcv + j, :len(taps)] = taps
    write_wav(path, MultichannelWaveform(data, rirs.sample_rate), "float32")
    sidecar = {
        "num_sources": n_src,
        "num_receivers": n_rcv,
        "sources": np.asarray(rirs.sources).tolist(),
        "receivers": np.asarray(rirs.receivers).tolist(),
        "direct_path_delay": [[rirs[k, j].direct_path_delay for j in range(n_rcv)]
                              for k in range(n_src)],
        "room": asdict(rirs.room) if rirs.room is not None else None,
        "seed": rirs.seed,
        **rirs.meta,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_rirset(path) -> RirSet:
    path = Path(path)
    wave = read_wav(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    n_src, n_rcv = meta.pop("num_sources"), meta.pop("num_receivers")
    delays = meta.pop("direct_path_delay")
    rirs = [[Rir(wave.data[k * n_rcv + j].copy(), wave.sample_rate, delays[k][j])
             for j in range(n_rcv)] for k in range(n_src)]
    room = meta.pop("room")
    if room is not None:
        room["dimensions"] = tuple(room["dimensions"])
        room = RoomSpec(**room)
    return RirSet(rirs, np.asarray(meta.pop("sources")), np.asarray(meta.pop("receivers")),
                  room, meta.pop("seed"), meta)
