"""Listening-room scene geometry: a small planar array, a target and 8 interferers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dsp import convolve
from .room import RoomSpec, SamplingRanges, anechoic_rir, image_method_rir, rir_length

ANGLES = tuple(range(0, 360, 45))


def triangle_array(side: float = 0.04) -> np.ndarray:
    """Equilateral triangle in the horizontal plane, one vertex on the 0 degree axis.

    The layout is mirror-symmetric about the target axis, so interferers at
    ``a`` and ``360 - a`` degrees produce mirrored inter-mic delays.
    """
    radius = side / np.sqrt(3.0)
    ang = np.deg2rad([0.0, 120.0, 240.0])
    return np.stack([radius * np.cos(ang), radius * np.sin(ang), np.zeros(3)], axis=1)


@dataclass(frozen=True)
class SceneConfig:
    mic_geometry: tuple = tuple(map(tuple, triangle_array()))
    target_azimuth: float = 0.0
    target_distance: float = 0.8
    interferer_azimuths: tuple = ANGLES
    interferer_distance_range: tuple[float, float] = (1.0, 3.0)
    snr_list: tuple = (0.0, 6.0)
    room_ranges: SamplingRanges = SamplingRanges(x=(7.0, 10.0), y=(7.0, 10.0),
                                                 z=(2.5, 4.0), t60=(0.2, 0.5))
    array_height: float = 1.2
    duration: float = 4.0
    sample_rate: int = 16000

    @property
    def num_mics(self) -> int:
        return len(self.mic_geometry)

    @property
    def num_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))


@dataclass
class SceneLayout:
    room: RoomSpec
    mics: np.ndarray
    target: np.ndarray
    interferers: np.ndarray
    interferer_distances: np.ndarray
    orientation: float
    meta: dict = field(default_factory=dict)


def sample_scene_layout(rng: np.random.Generator, scene: SceneConfig) -> SceneLayout:
    r = scene.room_ranges
    dims = np.array([rng.uniform(*r.x), rng.uniform(*r.y), rng.uniform(*r.z)])
    room = RoomSpec.from_t60(tuple(dims), rng.uniform(*r.t60))
    orientation = rng.uniform(0.0, 2.0 * np.pi)
    far = scene.interferer_distance_range[1] + r.wall_margin
    centre = np.empty(3)
    for a in range(2):
        lo, hi = far, dims[a] - far
        if lo > hi:
            raise ValueError("room too small for the interferer distance range")
        centre[a] = rng.uniform(lo, hi)
    centre[2] = min(max(scene.array_height, r.wall_margin), dims[2] - r.wall_margin)

    def place(azimuth_deg: float, distance: float) -> np.ndarray:
        phi = orientation + np.deg2rad(azimuth_deg)
        return centre + distance * np.array([np.cos(phi), np.sin(phi), 0.0])

    c, s = np.cos(orientation), np.sin(orientation)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    mics = centre + np.asarray(scene.mic_geometry) @ rot.T
    target = place(scene.target_azimuth, scene.target_distance)
    dists = rng.uniform(*scene.interferer_distance_range, size=len(scene.interferer_azimuths))
    interferers = np.stack([place(a, d) for a, d in zip(scene.interferer_azimuths, dists)])
    for p in [target, *interferers, *mics]:
        if not room.contains(p, r.wall_margin * 0.999):
            raise ValueError(f"position {p} outside room {room.dimensions}")
    return SceneLayout(room, mics, target, interferers, dists, orientation)


def render(room: RoomSpec, source_pos, mics: np.ndarray, signal: np.ndarray,
           sample_rate: int, anechoic: bool = False) -> np.ndarray:
    """``(mics, len(signal))`` recording of ``signal`` played at ``source_pos``."""
    length = rir_length(room, sample_rate)
    out = np.empty((len(mics), len(signal)))
    for m, mic in enumerate(mics):
        rir = image_method_rir(room, source_pos, mic, sample_rate, length)
        if anechoic:
            rir = anechoic_rir(rir)
        out[m] = convolve(signal, rir.taps)[:len(signal)]
    return out
