"""BSS-SDR and plain SNR."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_toeplitz
from scipy.signal import fftconvolve


@dataclass(frozen=True)
class SdrConfig:
    projection_taps: int = 512
    cap: float = 100.0

    def __post_init__(self):
        if self.projection_taps < 1:
            raise ValueError("projection_taps must be >= 1")


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "samples", x), dtype=np.float64)


def _correlate(a: np.ndarray, b: np.ndarray, taps: int) -> np.ndarray:
    """``sum_n a[n] * b[n - k]`` for ``k = 0 .. taps-1``."""
    full = fftconvolve(a, b[::-1])
    mid = len(b) - 1
    return full[mid:mid + taps]


def project_onto_reference(estimate, reference, taps: int = 512) -> np.ndarray:
    """Least-squares fit of ``estimate`` by the reference through a causal FIR filter.

    Delayed copies of the reference are allowed to run past the end of the
    signal, so the normal equations are exactly Toeplitz. The returned
    target component has ``len(estimate) + taps - 1`` samples.
    """
    est = _as_array(estimate)
    ref = _as_array(reference)
    auto = _correlate(ref, ref, taps)
    cross = _correlate(est, ref, taps)
    # relative ridge of 1e-12 keeps band-limited references solvable
    auto[0] *= 1.0 + 1e-12
    coeffs = solve_toeplitz(auto, cross)
    return fftconvolve(ref, coeffs)


def bss_sdr(estimate, reference, cfg: SdrConfig = SdrConfig()) -> float:
    """Signal-to-distortion ratio in dB, capped at ``cfg.cap``.

    The target component is the projection of ``estimate`` onto the span of
    the reference delayed by ``0 .. projection_taps - 1`` samples. Returns
    ``-inf`` when the projection is degenerate (zero target component).
    """
    est = _as_array(estimate)
    ref = _as_array(reference)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    if not np.any(ref):
        raise ValueError("reference is all zeros")
    taps = cfg.projection_taps
    s_target = project_onto_reference(est, ref, taps)
    target_energy = float(np.dot(s_target, s_target))
    if not np.isfinite(target_energy) or target_energy <= 0.0:
        return float("-inf")
    est_padded = np.concatenate([est, np.zeros(taps - 1)])
    error = est_padded - s_target
    error_energy = float(np.dot(error, error))
    if error_energy <= target_energy * 10.0 ** (-cfg.cap / 10.0):
        return cfg.cap
    return float(min(cfg.cap, 10.0 * np.log10(target_energy / error_energy)))


def snr(estimate, reference, cap: float = 100.0) -> float:
    est = _as_array(estimate)
    ref = _as_array(reference)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    num = float(np.dot(ref, ref))
    den = float(np.dot(est - ref, est - ref))
    if den <= num * 10.0 ** (-cap / 10.0):
        return cap
    return float(10.0 * np.log10(num / den))
