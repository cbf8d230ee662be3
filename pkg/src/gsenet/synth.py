"""Training triples ``(y0, y1, target)`` with simulated beamformer contrast.

``y0`` stands in for a beamformer output and ``y1`` for the raw reference
microphone: both hear the same speech, noise and interference through
their own RIRs, but the noise and interference are boosted in ``y1`` by
the random gains ``alpha`` and ``beta``::

    y0 = s*r00 + gN n*r10 + pI gI i*r20
    y1 = s*r01 + alpha gN n*r11 + beta pI gI i*r21
    target = s * anechoic(r00)

and every signal is finally scaled by ``gGlobal``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .audio_io import MultichannelWaveform, Waveform, read_wav, write_wav
from .dsp import convolve
from .room import Rir, RirSet, SamplingRanges, anechoic_rir, layout_rirs, sample_room
from .signals import ClipProvider

SPEECH, NOISE, INTERFERENCE = 0, 1, 2
MODEL_KINDS = ("ssenetA", "ssenetB", "gsenet")


def db_to_gain(db):
    return 10.0 ** (np.asarray(db, dtype=np.float64) / 20.0)


def gain_to_db(g):
    return 20.0 * np.log10(np.asarray(g, dtype=np.float64))


@dataclass(frozen=True)
class MixParams:
    gN: float
    gI: float
    pI: int
    alpha: float
    beta: float
    gGlobal: float

    def __post_init__(self):
        for name in ("gN", "gI", "alpha", "beta", "gGlobal"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.pI not in (0, 1):
            raise ValueError("pI must be 0 or 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Normal:
    """Normal in dB with standard deviation ``std``, optionally floored at ``floor`` dB."""

    mean: float
    std: float
    floor: float | None = None

    def draw(self, rng: np.random.Generator, size=None):
        x = rng.normal(self.mean, self.std, size)
        if self.floor is not None:
            x = np.maximum(x, self.floor)
        return x


@dataclass(frozen=True)
class SamplerConfig:
    """Mixing-gain distributions; every ``Normal`` is over dB values.

    ``alpha`` and ``beta`` equal to ``None`` mean 0 dB (the single-input
    models never see ``y1``).
    """

    modelKind: str = "gsenet"
    gN: Normal = Normal(-5.0, 10.0)
    gI: Normal | None = Normal(-3.0, 3.0)
    pI: float = 0.4
    alpha: Normal | None = Normal(0.0, 3.0, floor=-4.0)
    beta: Normal | None = Normal(4.0, 6.0, floor=4.0)
    gGlobal: tuple[float, float] = (-10.0, 0.0)
    sigma_is_std: bool = True

    def __post_init__(self):
        if self.modelKind not in MODEL_KINDS:
            raise ValueError(f"modelKind must be one of {MODEL_KINDS}")
        if not 0.0 <= self.pI <= 1.0:
            raise ValueError("pI must be a probability")
        if self.modelKind != "ssenetA" and self.gI is None:
            raise ValueError("interference gain distribution required")
        lo, hi = self.gGlobal
        if lo > hi:
            raise ValueError("invalid gGlobal range")

    @classmethod
    def for_model(cls, kind: str) -> "SamplerConfig":
        if kind == "ssenetA":
            return cls(modelKind=kind, gI=None, pI=0.0, alpha=None, beta=None)
        if kind == "ssenetB":
            return cls(modelKind=kind, gI=Normal(-9.0, 3.0), pI=0.4, alpha=None, beta=None)
        if kind == "gsenet":
            return cls(modelKind=kind)
        raise ValueError(f"modelKind must be one of {MODEL_KINDS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        base = cls.for_model(d.get("modelKind", "gsenet"))
        updates = {}
        for k, v in d.items():
            if k in ("gN", "gI", "alpha", "beta") and isinstance(v, dict):
                v = Normal(**v)
            elif k == "gGlobal":
                v = tuple(v)
            updates[k] = v
        return replace(base, **updates)


def sample_mix_params(rng: np.random.Generator, cfg: SamplerConfig = SamplerConfig()) -> MixParams:
    g_n = cfg.gN.draw(rng)
    if cfg.modelKind == "ssenetA":
        p_i, g_i = 0, 0.0
    else:
        p_i = int(rng.random() < cfg.pI)
        g_i = cfg.gI.draw(rng)
    alpha = cfg.alpha.draw(rng) if cfg.alpha is not None else 0.0
    beta = cfg.beta.draw(rng) if cfg.beta is not None else 0.0
    g_global = rng.uniform(*cfg.gGlobal)
    return MixParams(gN=float(db_to_gain(g_n)), gI=float(db_to_gain(g_i)), pI=p_i,
                     alpha=float(db_to_gain(alpha)), beta=float(db_to_gain(beta)),
                     gGlobal=float(db_to_gain(g_global)))


@dataclass
class TrainingExample:
    y0: Waveform
    y1: Waveform
    target: Waveform
    params: MixParams
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        lengths = {len(self.y0), len(self.y1), len(self.target)}
        rates = {self.y0.sample_rate, self.y1.sample_rate, self.target.sample_rate}
        if len(lengths) != 1 or len(rates) != 1:
            raise ValueError("y0, y1 and target must share length and rate")


def _samples(x) -> np.ndarray:
    return np.asarray(getattr(x, "samples", x), dtype=np.float64)


def synthesize_example(s, n, i, rirs: RirSet, params: MixParams, anechoic_target: bool = True,
                       sample_rate: int | None = None) -> TrainingExample:
    """Evaluate the two-channel mixing equations for one set of source clips."""
    rates = {getattr(x, "sample_rate", None) for x in (s, n, i)} - {None}
    rate = sample_rate or rirs.sample_rate
    if rates and rates != {rate}:
        raise ValueError(f"source rates {sorted(rates)} differ from the RIR rate {rate}")
    s, n, i = _samples(s), _samples(n), _samples(i)
    if not (len(s) == len(n) == len(i)):
        raise ValueError("speech, noise and interference clips differ in length")
    if rirs.shape[0] < 3 or rirs.shape[1] < 2:
        raise ValueError(f"RIR grid {rirs.shape} lacks the 3 x 2 entries needed")
    length = len(s)

    def conv(x, k, j):
        return convolve(x, rirs[k, j].taps)[:length]

    y0 = conv(s, SPEECH, 0) + params.gN * conv(n, NOISE, 0)
    y1 = conv(s, SPEECH, 1) + params.alpha * params.gN * conv(n, NOISE, 1)
    if params.pI:
        y0 = y0 + params.gI * conv(i, INTERFERENCE, 0)
        y1 = y1 + params.beta * params.gI * conv(i, INTERFERENCE, 1)
    if anechoic_target:
        target = convolve(s, anechoic_rir(rirs[SPEECH, 0]).taps)[:length]
    else:
        target = conv(s, SPEECH, 0)
    g = params.gGlobal
    return TrainingExample(Waveform(g * y0, rate), Waveform(g * y1, rate),
                           Waveform(g * target, rate), params)


def normalize_rirs(rirs: RirSet) -> RirSet:
    """Scale every RIR to unit energy."""
    rows = []
    for row in rirs.rirs:
        out = []
        for r in row:
            e = float(np.sum(r.taps ** 2))
            if not e > 0:
                raise ValueError("all-zero RIR")
            out.append(Rir(r.taps / np.sqrt(e), r.sample_rate, r.direct_path_delay))
        rows.append(out)
    return RirSet(rows, rirs.sources, rirs.receivers, rirs.room, rirs.seed, dict(rirs.meta))


@dataclass(frozen=True)
class DatasetConfig:
    sampler: SamplerConfig = SamplerConfig()
    rooms: SamplingRanges = SamplingRanges()
    speech: str = "builtin:speech"
    noise: str = "builtin:noise"
    interference: str = "builtin:speech"
    clip_seconds: float = 3.0
    sample_rate: int = 16000
    anechoic_target: bool = True
    # consecutive examples sharing one simulated room (1: a fresh room per example)
    examples_per_room: int = 1

    @property
    def clip_samples(self) -> int:
        return int(round(self.clip_seconds * self.sample_rate))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        if "sampler" in d:
            d["sampler"] = SamplerConfig.from_dict(d["sampler"])
        if "rooms" in d:
            d["rooms"] = SamplingRanges(**{k: tuple(v) if isinstance(v, list) else v
                                           for k, v in d["rooms"].items()})
        return cls(**d)


def generate_dataset(rng: np.random.Generator | int, cfg: DatasetConfig = DatasetConfig(),
                     count: int | None = None, loop: bool = True) -> Iterator[TrainingExample]:
    """Stream training examples; ``count=None`` streams forever.

    Rooms, mixing gains and each provider draw from independent child
    generators of the master generator, so a fixed seed reproduces the
    stream exactly.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    seeds = rng.integers(0, 2 ** 63 - 1, size=5)
    room_rng = np.random.default_rng(seeds[0])
    mix_rng = np.random.default_rng(seeds[1])
    n = cfg.clip_samples
    providers = [ClipProvider(spec, n, int(seed), cfg.sample_rate, loop)
                 for spec, seed in zip((cfg.speech, cfg.noise, cfg.interference), seeds[2:])]
    produced = 0
    rirs = None
    while count is None or produced < count:
        if rirs is None or produced % max(1, cfg.examples_per_room) == 0:
            layout = sample_room(room_rng, cfg.rooms, num_sources=3, num_receivers=2)
            rirs = normalize_rirs(layout_rirs(layout, cfg.sample_rate))
        try:
            s, noise, interf = (next(p) for p in providers)
        except StopIteration:
            if count is not None:
                raise RuntimeError(f"source provider exhausted after {produced} examples")
            return
        params = sample_mix_params(mix_rng, cfg.sampler)
        ex = synthesize_example(Waveform(s, cfg.sample_rate), Waveform(noise, cfg.sample_rate),
                                Waveform(interf, cfg.sample_rate), rirs, params,
                                cfg.anechoic_target)
        ex.meta = {"index": produced, "room": list(rirs.room.dimensions),
                   "t60": rirs.room.target_t60}
        produced += 1
        yield ex


def save_example(path, ex: TrainingExample) -> None:
    """3-channel float-32 WAV (y0, y1, target) plus a JSON sidecar."""
    path = Path(path)
    wave = MultichannelWaveform(np.stack([ex.y0.samples, ex.y1.samples, ex.target.samples]),
                                ex.y0.sample_rate)
    write_wav(path, wave, "float32")
    sidecar = {"params": ex.params.to_dict(), "channels": ["y0", "y1", "target"], **ex.meta}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_example(path) -> TrainingExample:
    path = Path(path)
    wave = read_wav(path)
    if wave.num_channels != 3:
        raise ValueError(f"{path}: expected 3 channels, got {wave.num_channels}")
    meta = json.loads(path.with_suffix(".json").read_text())
    params = MixParams(**meta.pop("params"))
    meta.pop("channels", None)
    y0, y1, t = wave.channels
    return TrainingExample(y0, y1, t, params, meta)
