"""Causal multi-frame multi-channel Wiener filter (MCWF).

For each frequency bin the beamformer output is a fixed linear combination
of the current and ``num_frames - 1`` previous STFT frames of every
microphone. The stacked observation vector is ordered lag-major::

    z(t, f) = [Y_0(t, f), ..., Y_{M-1}(t, f), Y_0(t-1, f), ..., Y_{M-1}(t-L+1, f)]

and the output is ``B(t, f) = w_f^H z(t, f)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict, field

import numpy as np

from .audio_io import (MultichannelWaveform, decode_json_tensor, encode_json_tensor,
                       load_weights, save_weights)
from .dsp import MODEL_STFT, Spectrogram, StftConfig, istft, stft

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BeamformerConfig:
    num_mics: int = 3
    num_frames: int = 4
    stft: StftConfig = MODEL_STFT
    diagonal_loading: float = 1e-3
    derivation_snr: float = 3.0
    reference_mic: int = 0

    def __post_init__(self):
        if self.num_mics < 1 or self.num_frames < 1:
            raise ValueError("num_mics and num_frames must be >= 1")
        if not 0 <= self.reference_mic < self.num_mics:
            raise ValueError("reference_mic out of range")

    @property
    def dim(self) -> int:
        return self.num_mics * self.num_frames

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stft"] = asdict(self.stft)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BeamformerConfig":
        d = dict(d)
        if "stft" in d and isinstance(d["stft"], dict):
            d["stft"] = StftConfig(**d["stft"])
        return cls(**d)


@dataclass
class BeamformerWeights:
    """Complex taps, shape ``(bins, num_mics * num_frames)``."""

    taps: np.ndarray
    config: BeamformerConfig
    singular_bins: list[int] = field(default_factory=list)

    @property
    def reference_mic(self) -> int:
        return self.config.reference_mic


def stack_frames(spec: np.ndarray, num_frames: int) -> np.ndarray:
    """``(mics, T, F)`` spectra -> ``(F, T, num_frames * mics)`` causal stacks."""
    mics, n_t, n_f = spec.shape
    out = np.zeros((n_f, n_t, num_frames * mics), dtype=np.complex128)
    for lag in range(num_frames):
        shifted = spec[:, :n_t - lag, :] if lag else spec
        out[:, lag:, lag * mics:(lag + 1) * mics] = shifted.transpose(2, 1, 0)
    return out


def _spectra(x: MultichannelWaveform, cfg: BeamformerConfig) -> np.ndarray:
    if x.num_channels != cfg.num_mics:
        raise ValueError(f"expected {cfg.num_mics} channels, got {x.num_channels}")
    if x.sample_rate != cfg.stft.sample_rate:
        raise ValueError(f"sample rate {x.sample_rate} != {cfg.stft.sample_rate}")
    return stft(x.data, cfg.stft).frames


def scale_to_snr(speech: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    """Scale ``noise`` so total speech power over total noise power equals ``snr_db``."""
    ps = float(np.sum(speech ** 2))
    pn = float(np.sum(noise ** 2))
    if ps <= 0 or pn <= 0:
        raise ValueError("speech and noise must both have nonzero power")
    return noise * np.sqrt(ps / (pn * 10.0 ** (snr_db / 10.0)))


def estimate_covariances(speech: MultichannelWaveform, noise: MultichannelWaveform | None,
                         cfg: BeamformerConfig = BeamformerConfig(), scale_noise: bool = True):
    """Per-bin stacked mixture covariance and cross-covariance with the reference speech.

    Returns ``(Phi, phi)`` with shapes ``(F, D, D)`` and ``(F, D)``. Unless
    ``scale_noise`` is false, the noise is first rescaled to
    ``cfg.derivation_snr`` measured over all microphones.
    """
    s_spec = _spectra(speech, cfg)
    if noise is None:
        mix = speech.data
    else:
        if noise.num_channels != speech.num_channels:
            raise ValueError("speech and noise channel counts differ")
        if noise.num_samples != speech.num_samples:
            raise ValueError("speech and noise lengths differ")
        n = noise.data
        if scale_noise:
            n = scale_to_snr(speech.data, n, cfg.derivation_snr)
        mix = speech.data + n
    y_spec = stft(mix, cfg.stft).frames
    return spectral_covariances(y_spec, s_spec[cfg.reference_mic], cfg.num_frames)


def spectral_covariances(y_spec: np.ndarray, s_ref: np.ndarray, num_frames: int):
    """``Phi = mean z z^H`` and ``phi = mean z conj(S_ref)`` from ``(mics, T, F)`` mixture
    spectra and ``(T, F)`` reference speech spectra."""
    n_t = y_spec.shape[1]
    dim = y_spec.shape[0] * num_frames
    if n_t < dim:
        raise ValueError(f"only {n_t} frames; need at least {dim}")
    if s_ref.shape != y_spec.shape[1:]:
        raise ValueError("reference spectra shape does not match the mixture")
    z = stack_frames(y_spec, num_frames)
    phi_mat = np.einsum("ftd,fte->fde", z, z.conj()) / n_t
    phi_vec = np.einsum("ftd,ft->fd", z, s_ref.T.conj()) / n_t
    return phi_mat, phi_vec


def solve_mcwf(phi_mat: np.ndarray, phi_vec: np.ndarray,
               cfg: BeamformerConfig = BeamformerConfig()) -> BeamformerWeights:
    """``w_f = (Phi_f + delta * tr(Phi_f)/D * I)^{-1} phi_f`` for every bin."""
    n_f, dim, _ = phi_mat.shape
    taps = np.zeros((n_f, dim), dtype=np.complex128)
    singular = []
    eye = np.eye(dim)
    for f in range(n_f):
        a = phi_mat[f]
        load = cfg.diagonal_loading * np.real(np.trace(a)) / dim
        a = a + load * eye
        try:
            w = np.linalg.solve(a, phi_vec[f])
        except np.linalg.LinAlgError:
            w = None
        if w is None or not np.all(np.isfinite(w)):
            singular.append(f)
            continue
        taps[f] = w
    if singular:
        log.warning("MCWF: %d singular bins set to zero: %s", len(singular), singular)
    return BeamformerWeights(taps, cfg, singular)


def derive_beamformer(speech: MultichannelWaveform, noise: MultichannelWaveform,
                      cfg: BeamformerConfig = BeamformerConfig()) -> BeamformerWeights:
    phi_mat, phi_vec = estimate_covariances(speech, noise, cfg)
    return solve_mcwf(phi_mat, phi_vec, cfg)


def apply_beamformer_spec(w: BeamformerWeights, spec: np.ndarray) -> np.ndarray:
    """Beamform ``(mics, T, F)`` spectra into ``(T, F)``."""
    z = stack_frames(spec, w.config.num_frames)
    return np.einsum("fd,ftd->tf", w.taps.conj(), z)


def apply_beamformer(w: BeamformerWeights, x: MultichannelWaveform) -> np.ndarray:
    """Beamformer output waveform with the same length as ``x``."""
    spec = _spectra(x, w.config)
    out = apply_beamformer_spec(w, spec)
    return istft(Spectrogram(out, w.config.stft), length=x.num_samples)


def save_beamformer(path, w: BeamformerWeights) -> None:
    save_weights(path, {
        "real": w.taps.real.astype(np.float32),
        "imag": w.taps.imag.astype(np.float32),
        "config": encode_json_tensor(w.config.to_dict()),
    })


def load_beamformer(path) -> BeamformerWeights:
    tensors = load_weights(path)
    cfg = BeamformerConfig.from_dict(decode_json_tensor(tensors["config"]))
    taps = tensors["real"].astype(np.float64) + 1j * tensors["imag"].astype(np.float64)
    if taps.shape != (cfg.stft.num_bins, cfg.dim):
        raise ValueError(f"beamformer taps have shape {taps.shape}")
    return BeamformerWeights(taps, cfg)
