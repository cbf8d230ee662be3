"""Dual-input causal speech enhancement after a fixed multichannel beamformer."""

__version__ = "0.1.0"
