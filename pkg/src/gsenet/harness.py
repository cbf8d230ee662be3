"""Simulated evaluation protocol.

Three rooms are drawn from independent seeds. In rooms A and B the target
talker plays against noise from all eight interferer positions; the
beamformer is derived from the pooled statistics and frozen. In room C
each interferer position is evaluated on its own, with speech and noise
interference at every configured SNR, scoring the raw reference
microphone, the beamformer output and the beamformer followed by the
model against the direct-path target at the reference microphone.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import MultichannelWaveform, Waveform, write_wav
from .beamformer import (BeamformerConfig, BeamformerWeights, apply_beamformer,
                         estimate_covariances, solve_mcwf)
from .dsp import convolve
from .metrics import SdrConfig, bss_sdr
from .model import ModelWeights, forward
from .room import anechoic_rir, image_method_rir, rir_length
from .scene import SceneConfig, SceneLayout, sample_scene_layout
from .signals import ClipProvider

log = logging.getLogger(__name__)

SYSTEMS = ("reference_mic", "beamformer", "beamformer+model")
KINDS = ("speech", "noise")
ROOM_NAMES = ("A", "B", "C")

# large-scale published averages over the 8 angles, for comparison only
REFERENCE_AVERAGES = {"speech@0dB": {"beamformer": 1.8, "beamformer+model": 8.2}}


@dataclass
class SceneRecordings:
    """Per-source multichannel recordings of one room, kept separate for mixing."""

    layout: SceneLayout
    target: np.ndarray
    clean_reference: np.ndarray
    interferers: dict
    sample_rate: int

    @property
    def num_samples(self) -> int:
        return self.target.shape[1]


def _render(layout: SceneLayout, position, signals: list[np.ndarray], rate: int):
    """Render several signals from one position; the RIRs are computed once."""
    length = rir_length(layout.room, rate)
    rirs = [image_method_rir(layout.room, position, mic, rate, length) for mic in layout.mics]
    n = len(signals[0])
    outs = [np.stack([convolve(sig, r.taps)[:n] for r in rirs]) for sig in signals]
    return outs, rirs


def simulate_scene(rng: np.random.Generator, scene: SceneConfig, sources: dict,
                   kinds=KINDS, reference_mic: int = 0) -> SceneRecordings:
    """Render the target and every interferer position to all microphones.

    ``sources`` maps ``"target"`` and each interference kind to an iterator
    of clips. Each interferer position gets its own clip of every kind. The
    clean reference is the target through the direct path to
    ``reference_mic`` only.
    """
    layout = sample_scene_layout(rng, scene)
    rate = scene.sample_rate
    speech = next(sources["target"])
    (target,), rirs = _render(layout, layout.target, [speech], rate)
    clean = convolve(speech, anechoic_rir(rirs[reference_mic]).taps)[:len(speech)]
    interferers = {k: [] for k in kinds}
    for pos in layout.interferers:
        outs, _ = _render(layout, pos, [next(sources[k]) for k in kinds], rate)
        for k, rec in zip(kinds, outs):
            interferers[k].append(rec)
    return SceneRecordings(layout, target, clean, interferers, rate)


def mix_at_snr(target, interference, snr_db: float, sample_rate: int = 16000) -> MultichannelWaveform:
    """Scale the interference so total target power over total interference power is ``snr_db``."""
    t = np.asarray(getattr(target, "data", target), dtype=np.float64)
    i = np.asarray(getattr(interference, "data", interference), dtype=np.float64)
    if t.shape != i.shape:
        raise ValueError(f"shape mismatch: {t.shape} vs {i.shape}")
    pt = float(np.sum(t * t))
    pi = float(np.sum(i * i))
    if pt <= 0 or pi <= 0:
        raise ValueError("target and interference must both have nonzero power")
    scale = np.sqrt(pt / (pi * 10.0 ** (snr_db / 10.0)))
    return MultichannelWaveform(np.atleast_2d(t + scale * i), sample_rate)


@dataclass(frozen=True)
class ProtocolConfig:
    scene: SceneConfig = SceneConfig()
    beamformer: BeamformerConfig = BeamformerConfig()
    target_source: str = "builtin:speech"
    speech_source: str = "builtin:speech"
    noise_source: str = "builtin:noise"
    # model inputs are rescaled so the reference-mic mixture sits at this power
    model_input_db: float = -5.0
    sdr: SdrConfig = SdrConfig()


@dataclass
class EvalTable:
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, system: str, kind: str, snr_db: float, angle: int, value: float) -> None:
        self.rows.append((system, kind, float(snr_db), int(angle), float(value)))

    def value(self, system, kind, snr_db, angle) -> float:
        for r in self.rows:
            if r[:4] == (system, kind, float(snr_db), int(angle)):
                return r[4]
        raise KeyError((system, kind, snr_db, angle))

    def systems(self) -> list[str]:
        return list(dict.fromkeys(r[0] for r in self.rows))

    def averages(self) -> list[tuple]:
        """``(system, kind, snr_db, mean over angles)`` per row of the table."""
        groups: dict = {}
        for system, kind, snr_db, _, v in self.rows:
            groups.setdefault((system, kind, snr_db), []).append(v)
        return [(*k, float(np.mean(v))) for k, v in groups.items()]

    def average(self, system, kind, snr_db) -> float:
        for s, k, snr_v, v in self.averages():
            if (s, k, snr_v) == (system, kind, float(snr_db)):
                return v
        raise KeyError((system, kind, snr_db))


def _seeds(rng: np.random.Generator) -> dict:
    names = ["room_A", "room_B", "room_C", "derive_target", "derive_noise",
             "eval_target", "eval_speech", "eval_noise"]
    values = rng.integers(0, 2 ** 63 - 1, size=len(names))
    seeds = {n: int(v) for n, v in zip(names, values)}
    if len(set(seeds.values())) != len(seeds):
        raise RuntimeError("seed collision between protocol stages")
    return seeds


def derive_protocol_beamformer(seeds: dict, cfg: ProtocolConfig) -> BeamformerWeights:
    """MCWF from rooms A and B, pooled over both rooms' statistics."""
    scene = cfg.scene
    n = scene.num_samples
    target = ClipProvider(cfg.target_source, n, seeds["derive_target"], scene.sample_rate)
    noise = ClipProvider(cfg.noise_source, n, seeds["derive_noise"], scene.sample_rate)
    phi_mat = phi_vec = None
    for name in ("A", "B"):
        rec = simulate_scene(np.random.default_rng(seeds[f"room_{name}"]), scene,
                             {"target": target, "noise": noise}, kinds=("noise",),
                             reference_mic=cfg.beamformer.reference_mic)
        noise_sum = np.sum(rec.interferers["noise"], axis=0)
        a, b = estimate_covariances(MultichannelWaveform(rec.target, scene.sample_rate),
                                    MultichannelWaveform(noise_sum, scene.sample_rate),
                                    cfg.beamformer)
        phi_mat = a if phi_mat is None else phi_mat + a
        phi_vec = b if phi_vec is None else phi_vec + b
    return solve_mcwf(phi_mat / 2.0, phi_vec / 2.0, cfg.beamformer)


def _model_output(weights: ModelWeights, bf_out: np.ndarray, ref: np.ndarray,
                  level_db: float) -> np.ndarray:
    scale = np.sqrt(10.0 ** (level_db / 10.0) / max(np.mean(ref * ref), 1e-20))
    if weights.arch.num_inputs == 2:
        out, _ = forward(weights, bf_out * scale, ref * scale)
    else:
        out, _ = forward(weights, bf_out * scale)
    return out / scale


def run_protocol(rng: np.random.Generator | int, cfg: ProtocolConfig = ProtocolConfig(),
                 weights: ModelWeights | None = None,
                 beamformer: BeamformerWeights | None = None) -> EvalTable:
    """Full table over systems x kinds x SNRs x angles.

    Without ``weights`` the model rows are omitted; without ``beamformer``
    one is derived from rooms A and B.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    seeds = _seeds(rng)
    scene = cfg.scene
    if beamformer is None:
        beamformer = derive_protocol_beamformer(seeds, cfg)
    ref_mic = beamformer.config.reference_mic
    n = scene.num_samples
    sources = {
        "target": ClipProvider(cfg.target_source, n, seeds["eval_target"], scene.sample_rate),
        "speech": ClipProvider(cfg.speech_source, n, seeds["eval_speech"], scene.sample_rate),
        "noise": ClipProvider(cfg.noise_source, n, seeds["eval_noise"], scene.sample_rate),
    }
    rec = simulate_scene(np.random.default_rng(seeds["room_C"]), scene, sources,
                         reference_mic=ref_mic)
    table = EvalTable()
    for kind in KINDS:
        for snr_db in scene.snr_list:
            for angle, interf in zip(scene.interferer_azimuths, rec.interferers[kind]):
                mix = mix_at_snr(rec.target, interf, snr_db, scene.sample_rate)
                ref = mix.data[ref_mic]
                bf_out = apply_beamformer(beamformer, mix)
                table.add(SYSTEMS[0], kind, snr_db, angle, bss_sdr(ref, rec.clean_reference, cfg.sdr))
                table.add(SYSTEMS[1], kind, snr_db, angle,
                          bss_sdr(bf_out, rec.clean_reference, cfg.sdr))
                if weights is not None:
                    enhanced = _model_output(weights, bf_out, ref, cfg.model_input_db)
                    table.add(SYSTEMS[2], kind, snr_db, angle,
                              bss_sdr(enhanced, rec.clean_reference, cfg.sdr))
    layout = rec.layout
    table.meta = {
        "seeds": seeds,
        "derivation_rooms": ["A", "B"],
        "evaluation_room": "C",
        "room_C": {"dimensions": [float(x) for x in layout.room.dimensions],
                   "t60": float(layout.room.target_t60),
                   "interferer_distances": [float(d) for d in layout.interferer_distances]},
        "singular_bins": list(beamformer.singular_bins),
        "reference_averages": REFERENCE_AVERAGES,
    }
    return table


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def emit_outputs(table: EvalTable, out_dir) -> dict:
    """Write ``eval_table.csv``, ``polar.json`` and ``summary.json``; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["system", "kind", "snr_db", "angle_deg", "bss_sdr_db"])
    for system, kind, snr_db, angle, v in table.rows:
        w.writerow([system, kind, _fmt(snr_db), angle, _fmt(v)])
    paths = {"csv": out / "eval_table.csv", "polar": out / "polar.json",
             "summary": out / "summary.json"}
    paths["csv"].write_text(buf.getvalue())

    angles = sorted({r[3] for r in table.rows})
    series = []
    for system in table.systems():
        for kind in dict.fromkeys(r[1] for r in table.rows):
            for snr_db in dict.fromkeys(r[2] for r in table.rows):
                vals = [table.value(system, kind, snr_db, a) for a in angles]
                series.append({"system": system, "kind": kind, "snr_db": snr_db,
                               "bss_sdr_db": [round(v, 6) for v in vals]})
    polar = {"angles_deg": angles, "series": series}
    paths["polar"].write_text(json.dumps(polar, indent=2, sort_keys=True) + "\n")
    summary = {"averages": [{"system": s, "kind": k, "snr_db": snr_v, "avg_bss_sdr_db": round(v, 6)}
                            for s, k, snr_v, v in table.averages()],
               "meta": table.meta}
    paths["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return paths


def save_recordings(out_dir, rec: SceneRecordings) -> None:
    """Scene recordings as float-32 WAVs with a JSON sidecar describing the geometry."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rate = rec.sample_rate
    write_wav(out / "target.wav", MultichannelWaveform(rec.target, rate))
    write_wav(out / "clean_reference.wav", Waveform(rec.clean_reference, rate))
    for kind, recs in rec.interferers.items():
        for idx, r in enumerate(recs):
            write_wav(out / f"{kind}_{idx}.wav", MultichannelWaveform(r, rate))
    lay = rec.layout
    meta = {"room": {"dimensions": [float(x) for x in lay.room.dimensions],
                     "absorption": float(lay.room.absorption),
                     "t60": float(lay.room.target_t60)},
            "mics": lay.mics.tolist(), "target": lay.target.tolist(),
            "interferers": lay.interferers.tolist(),
            "interferer_distances": lay.interferer_distances.tolist(),
            "orientation_rad": float(lay.orientation), "sample_rate": rate}
    (out / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
