"""Causal U-Net enhancement network (dual-input GSENet, single-input SSENet).

Layout, for encoder channels ``[c0, c1, ..., cL-1]``::

    stft(y0[, y1]) -> re/im planes (2 or 4 channels, T frames, 161 bins)
                      -> magnitude compression |Y|^c, phase kept
    encoder block i:  causal (kt x kf) conv -> lrelu -> skip_i
                      (1 x kf) conv, frequency stride 2 -> lrelu
    bottleneck:       causal (kt x kf) conv, time stride 2 -> lrelu
                      causal (kt x kf) conv at half frame rate -> lrelu
                      repeat every frame twice
    decoder block i:  repeat bins x2, crop to skip_i size, (1 x kf) conv -> lrelu
                      concat skip_i -> causal (kt x kf) conv -> lrelu
    output:           (1 x 1) conv to 2 planes z -> Y0 * 2 sigmoid(z_re) -> istft
                      (or Y0 + z, or z itself; see ``ArchConfig.output_mode``)

Time convolutions see only the current and past frames. The strided
bottleneck merges frames ``(2k, 2k+1)`` so outputs are produced two frames
at a time. Frequency convolutions are centered.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, asdict, field
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .audio_io import decode_json_tensor, encode_json_tensor, load_weights, save_weights
from .dsp import LOSS_STFT, MODEL_STFT, StftConfig

log = logging.getLogger(__name__)

ARCH_TENSOR = "__arch__"


OUTPUT_MODES = ("direct", "residual", "mask")


@dataclass(frozen=True)
class ArchConfig:
    num_inputs: int = 2
    encoder_channels: tuple = (16, 32, 64)
    kernel_time: int = 3
    kernel_freq: int = 3
    freq_stride: int = 2
    bottleneck_time_stride: int = 2
    leaky_slope: float = 0.3
    stft: StftConfig = MODEL_STFT
    # "direct": the net emits the complex STFT; "residual": y0 spectrum + net;
    # "mask": y0 spectrum times 2 sigmoid(net re plane), keeping the y0 phase
    output_mode: str = "mask"
    # network inputs are Y |Y|^(c - 1), still packed as re/im; 1.0 disables it
    input_compression: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        if self.num_inputs not in (1, 2):
            raise ValueError("num_inputs must be 1 (SSENet) or 2 (GSENet)")
        if not self.encoder_channels or min(self.encoder_channels) < 1:
            raise ValueError("encoder_channels must be a non-empty list of positive ints")
        if self.kernel_time < self.bottleneck_time_stride:
            raise ValueError("kernel_time must cover the bottleneck stride")
        if self.kernel_freq % 2 != 1:
            raise ValueError("kernel_freq must be odd (centered padding)")
        if not 0.0 < self.input_compression <= 1.0:
            raise ValueError("input_compression must lie in (0, 1]")
        if self.output_mode not in OUTPUT_MODES:
            raise ValueError(f"output_mode must be one of {OUTPUT_MODES}")
        if self.bottleneck_time_stride != 2:
            raise ValueError("the bottleneck halves the frame rate exactly once")

    @property
    def in_planes(self) -> int:
        return 2 * self.num_inputs

    @property
    def block_frames(self) -> int:
        return self.bottleneck_time_stride

    @property
    def block_samples(self) -> int:
        return self.block_frames * self.stft.hop_length

    @property
    def latency_samples(self) -> int:
        return self.stft.window_length + (self.block_frames - 1) * self.stft.hop_length

    def freq_sizes(self) -> list[int]:
        sizes = [self.stft.num_bins]
        for _ in self.encoder_channels:
            sizes.append((sizes[-1] - 1) // self.freq_stride + 1)
        return sizes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["stft"] = asdict(self.stft)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        if isinstance(d.get("stft"), dict):
            d["stft"] = StftConfig(**d["stft"])
        return cls(**d)


@dataclass(frozen=True)
class LossConfig:
    stft: StftConfig = LOSS_STFT
    epsilon: float = 1e-6
    log_term_weight: float = 1.0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass
class ModelWeights:
    arch: ArchConfig
    tensors: dict[str, np.ndarray]

    def save(self, path) -> None:
        items = dict(self.tensors)
        items[ARCH_TENSOR] = encode_json_tensor(self.arch.to_dict())
        save_weights(path, items)

    @classmethod
    def load(cls, path) -> "ModelWeights":
        tensors = load_weights(path)
        if ARCH_TENSOR not in tensors:
            raise ValueError(f"{path}: no embedded architecture descriptor")
        arch = ArchConfig.from_dict(decode_json_tensor(tensors.pop(ARCH_TENSOR)))
        expected = parameter_shapes(arch)
        if list(tensors) != list(expected) or any(
                tensors[k].shape != v for k, v in expected.items()):
            raise ValueError(f"{path}: tensors do not match the embedded architecture")
        return cls(arch, tensors)


def conv_layers(arch: ArchConfig) -> list[tuple[str, int, int, int, int]]:
    """``(name, out_ch, in_ch, kernel_time, kernel_freq)`` for every convolution, in order."""
    kt, kf = arch.kernel_time, arch.kernel_freq
    enc = arch.encoder_channels
    layers = []
    prev = arch.in_planes
    for i, c in enumerate(enc):
        layers.append((f"enc{i}.time", c, prev, kt, kf))
        layers.append((f"enc{i}.down", c, c, 1, kf))
        prev = c
    layers.append(("bottleneck.down", prev, prev, kt, kf))
    layers.append(("bottleneck.time", prev, prev, kt, kf))
    for i in reversed(range(len(enc))):
        layers.append((f"dec{i}.up", enc[i], prev, 1, kf))
        layers.append((f"dec{i}.time", enc[i], 2 * enc[i], kt, kf))
        prev = enc[i]
    layers.append(("out", 2, prev, 1, 1))
    return layers


def causal_layers(arch: ArchConfig) -> list[str]:
    """Convolutions with time history (each owns a ring buffer when streaming)."""
    return [name for name, _, _, kt, _ in conv_layers(arch) if kt > 1]


def parameter_shapes(arch: ArchConfig) -> dict[str, tuple]:
    shapes = {}
    for name, out_ch, in_ch, kt, kf in conv_layers(arch):
        shapes[f"{name}.weight"] = (out_ch, in_ch, kt, kf)
        shapes[f"{name}.bias"] = (out_ch,)
    return shapes


def build_model(arch: ArchConfig = ArchConfig(), seed: int = 0,
                zero_output: bool = False) -> ModelWeights:
    """Kernels uniform in ``+-sqrt(1 / fan_in)``, biases zero.

    ``zero_output`` zeros the final projection, so a residual model starts
    as the exact identity on ``y0`` (used for training from scratch).
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(arch).items():
        if name.endswith(".bias") or (zero_output and name.startswith("out.")):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            bound = math.sqrt(1.0 / (shape[1] * shape[2] * shape[3]))
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return ModelWeights(arch, tensors)


# -- torch building blocks ---------------------------------------------------

def sqrt_hann(length: int, dtype=torch.float32) -> torch.Tensor:
    n = torch.arange(length, dtype=torch.float64)
    return torch.sqrt(0.5 - 0.5 * torch.cos(2.0 * math.pi * n / length)).to(dtype)


def torch_stft(x: torch.Tensor, cfg: StftConfig) -> torch.Tensor:
    """``(B, N)`` -> complex ``(B, T, bins)``, uncentered."""
    frames = x.unfold(-1, cfg.window_length, cfg.hop_length)
    return torch.fft.rfft(frames * sqrt_hann(cfg.window_length, x.dtype), dim=-1)


def torch_istft(spec: torch.Tensor, cfg: StftConfig, length: int) -> torch.Tensor:
    """Complex ``(B, T, bins)`` -> ``(B, length)`` by windowed overlap-add."""
    win = sqrt_hann(cfg.window_length, spec.real.dtype)
    chunks = torch.fft.irfft(spec, n=cfg.window_length, dim=-1) * win
    n_frames = chunks.shape[1]
    total = (n_frames - 1) * cfg.hop_length + cfg.window_length
    out = F.fold(chunks.transpose(1, 2), output_size=(1, total),
                 kernel_size=(1, cfg.window_length), stride=(1, cfg.hop_length))
    out = out.reshape(spec.shape[0], total)
    if total >= length:
        return out[:, :length]
    return F.pad(out, (0, length - total))


class _ClampedMagnitude(torch.autograd.Function):
    """``|z|`` whose gradient uses ``max(|z|, eps)`` in the denominator."""

    @staticmethod
    def forward(ctx, re, im, eps):
        mag = torch.sqrt(re * re + im * im)
        ctx.save_for_backward(re, im, mag)
        ctx.eps = eps
        return mag

    @staticmethod
    def backward(ctx, grad):
        re, im, mag = ctx.saved_tensors
        denom = torch.clamp(mag, min=ctx.eps)
        return grad * re / denom, grad * im / denom, None


def magnitude(spec: torch.Tensor, eps: float) -> torch.Tensor:
    return _ClampedMagnitude.apply(spec.real, spec.imag, eps)


def _conv(x, params, name, kt, stride_t=1, left=None):
    """Time-causal conv: ``left`` frames of zero history, centered frequency padding."""
    w = params[f"{name}.weight"]
    b = params[f"{name}.bias"]
    kf = w.shape[-1]
    if left is None:
        left = kt - stride_t
    x = F.pad(x, (kf // 2, kf // 2, left, 0))
    return F.conv2d(x, w, b, stride=(stride_t, 1))


def _conv_freq(x, params, name, stride_f=1):
    w = params[f"{name}.weight"]
    kf = w.shape[-1]
    x = F.pad(x, (kf // 2, kf // 2, 0, 0))
    return F.conv2d(x, w, params[f"{name}.bias"], stride=(1, stride_f))


def upsample_freq(x: torch.Tensor, factor: int, size: int) -> torch.Tensor:
    return torch.repeat_interleave(x, factor, dim=-1)[..., :size]


def pack(specs: list[torch.Tensor]) -> torch.Tensor:
    """Complex ``(B, T, F)`` spectra -> real ``(B, 2 * len(specs), T, F)``."""
    planes = []
    for s in specs:
        planes.extend([s.real, s.imag])
    return torch.stack(planes, dim=1)


def unpack(planes: torch.Tensor) -> torch.Tensor:
    return torch.complex(planes[:, 0], planes[:, 1])


def compress(planes: torch.Tensor, power: float) -> torch.Tensor:
    """Power-law magnitude compression of packed re/im planes, phase kept."""
    if power == 1.0:
        return planes
    re, im = planes[:, 0::2], planes[:, 1::2]
    g = (re * re + im * im + 1e-12) ** (0.5 * (power - 1.0))
    return torch.stack([re * g, im * g], dim=2).flatten(1, 2)


def network(planes: torch.Tensor, params: dict, arch: ArchConfig,
            cache: dict | None = None) -> torch.Tensor:
    """U-Net over packed planes ``(B, C, T, F)`` with ``T`` even."""
    slope = arch.leaky_slope
    kt = arch.kernel_time
    preacts = cache.setdefault("preactivations", []) if cache is not None else None

    def act(t):
        if preacts is not None:
            preacts.append(t)
        return F.leaky_relu(t, slope)

    skips = []
    x = compress(planes, arch.input_compression)
    for i in range(len(arch.encoder_channels)):
        x = act(_conv(x, params, f"enc{i}.time", kt))
        skips.append(x)
        x = act(_conv_freq(x, params, f"enc{i}.down", arch.freq_stride))
    x = act(_conv(x, params, "bottleneck.down", kt, stride_t=arch.bottleneck_time_stride))
    x = act(_conv(x, params, "bottleneck.time", kt))
    x = torch.repeat_interleave(x, arch.bottleneck_time_stride, dim=2)
    for i in reversed(range(len(arch.encoder_channels))):
        skip = skips[i]
        x = upsample_freq(x, arch.freq_stride, skip.shape[-1])
        x = act(_conv_freq(x, params, f"dec{i}.up"))
        x = act(_conv(torch.cat([x, skip], dim=1), params, f"dec{i}.time", kt))
    out = apply_output(_conv_freq(x, params, "out"), planes[:, :2], arch)
    if cache is not None:
        cache["skips"] = skips
    return out


def apply_output(out: torch.Tensor, y0: torch.Tensor, arch: ArchConfig) -> torch.Tensor:
    """Turn the final projection into re/im planes; ``y0`` holds the y0 planes."""
    if arch.output_mode == "residual":
        return out + y0
    if arch.output_mode == "mask":
        return y0 * (2.0 * torch.sigmoid(out[..., :1, :, :]))
    return out


def to_torch(weights: ModelWeights, dtype=torch.float32, requires_grad: bool = False) -> dict:
    return {k: torch.tensor(v, dtype=dtype, requires_grad=requires_grad)
            for k, v in weights.tensors.items()}


def _inputs(weights: ModelWeights, y0, y1):
    arch = weights.arch
    y0 = np.asarray(getattr(y0, "samples", y0), dtype=np.float64)
    if (y1 is None) != (arch.num_inputs == 1):
        raise ValueError(f"model expects {arch.num_inputs} input(s)")
    sources = [y0]
    if y1 is not None:
        y1 = np.asarray(getattr(y1, "samples", y1), dtype=np.float64)
        if y1.shape != y0.shape:
            raise ValueError("y0 and y1 lengths differ")
        sources.append(y1)
    if y0.shape[-1] < arch.stft.window_length:
        raise ValueError("input shorter than one STFT window")
    return sources


def enhance_tensor(params: dict, arch: ArchConfig, sources: list[torch.Tensor],
                   cache: dict | None = None) -> torch.Tensor:
    """Differentiable forward pass on ``(B, N)`` inputs; returns ``(B, N)``."""
    length = sources[0].shape[-1]
    specs = [torch_stft(s, arch.stft) for s in sources]
    n_frames = specs[0].shape[1]
    usable = n_frames - n_frames % arch.block_frames
    if usable == 0:
        raise ValueError("input shorter than one two-frame block")
    specs = [s[:, :usable] for s in specs]
    out_planes = network(pack(specs), params, arch, cache)
    out_spec = unpack(out_planes)
    if cache is not None:
        cache["input_spec"] = specs
        cache["output_spec"] = out_spec
    return torch_istft(out_spec, arch.stft, length)


def forward(weights: ModelWeights, y0, y1=None, dtype=torch.float32):
    """Enhance one waveform (pair).

    Returns ``(enhanced, cache)``: the enhanced waveform has the input's
    length; a trailing odd STFT frame is dropped and the samples it would
    have covered are zero. ``cache`` holds the input/output spectra and
    encoder skip activations.
    """
    sources = _inputs(weights, y0, y1)
    params = to_torch(weights, dtype)
    cache: dict = {}
    with torch.no_grad():
        ts = [torch.tensor(s, dtype=dtype)[None] for s in sources]
        out = enhance_tensor(params, weights.arch, ts, cache)
    return out[0].double().numpy(), cache


def stft_loss_tensor(pred: torch.Tensor, target: torch.Tensor,
                     cfg: LossConfig = LossConfig()) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    m_hat = magnitude(torch_stft(pred, cfg.stft), cfg.epsilon)
    m = magnitude(torch_stft(target, cfg.stft), cfg.epsilon)
    loss = torch.mean(torch.abs(m - m_hat))
    if cfg.log_term_weight:
        loss = loss + cfg.log_term_weight * torch.mean(
            torch.abs(torch.log(m + cfg.epsilon) - torch.log(m_hat + cfg.epsilon)))
    return loss


def stft_loss(pred, target, cfg: LossConfig = LossConfig()) -> float:
    """``mean|M - M^| + w * mean|log(M + eps) - log(M^ + eps)|`` at the loss STFT."""
    p = torch.as_tensor(np.asarray(getattr(pred, "samples", pred), dtype=np.float64))
    t = torch.as_tensor(np.asarray(getattr(target, "samples", target), dtype=np.float64))
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {tuple(p.shape)} vs {tuple(t.shape)}")
    with torch.no_grad():
        return float(stft_loss_tensor(p[None], t[None], cfg))


def _example_tensors(example, arch: ArchConfig, dtype):
    def t(x):
        return torch.tensor(np.asarray(getattr(x, "samples", x), dtype=np.float64), dtype=dtype)
    sources = [t(example.y0)]
    if arch.num_inputs == 2:
        sources.append(t(example.y1))
    return sources, t(example.target)


def backward(weights: ModelWeights, example, loss_cfg: LossConfig = LossConfig(),
             dtype=torch.float64):
    """Loss and gradients of every weight tensor for one training example."""
    params = to_torch(weights, dtype, requires_grad=True)
    sources, target = _example_tensors(example, weights.arch, dtype)
    pred = enhance_tensor(params, weights.arch, [s[None] for s in sources])
    loss = stft_loss_tensor(pred, target[None], loss_cfg)
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    loss.backward()
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.all(torch.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
        grads[name] = g.numpy().astype(np.float64)
    return float(loss.detach()), grads


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 1
    checkpoint_every: int = 0


@dataclass
class TrainResult:
    weights: ModelWeights
    losses: list[float] = field(default_factory=list)


def train(weights: ModelWeights, dataset: Iterable, steps: int,
          opt: OptimizerConfig = OptimizerConfig(), loss_cfg: LossConfig = LossConfig(),
          checkpoint_path=None, seed: int = 0, time_budget: float | None = None) -> TrainResult:
    """Adam on the STFT loss, one (batched) example draw per step.

    Stops early if ``time_budget`` seconds of wall time elapse. Raises
    ``FloatingPointError`` on a non-finite loss.
    """
    import time

    torch.manual_seed(seed)
    arch = weights.arch
    params = to_torch(weights, torch.float32, requires_grad=True)
    optimizer = torch.optim.Adam(params.values(), lr=opt.learning_rate,
                                 betas=(opt.beta1, opt.beta2), eps=opt.epsilon)
    it = iter(dataset)
    losses: list[float] = []
    start = time.monotonic()
    for step in range(steps):
        batch = [next(it) for _ in range(opt.batch_size)]
        srcs, tgts = zip(*(_example_tensors(ex, arch, torch.float32) for ex in batch))
        sources = [torch.stack([s[k] for s in srcs]) for k in range(arch.num_inputs)]
        target = torch.stack(tgts)
        optimizer.zero_grad()
        pred = enhance_tensor(params, arch, sources)
        loss = stft_loss_tensor(pred, target, loss_cfg)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss at step {step}")
        loss.backward()
        optimizer.step()
        losses.append(value)
        if opt.checkpoint_every and checkpoint_path and (step + 1) % opt.checkpoint_every == 0:
            _snapshot(params, arch).save(checkpoint_path)
        if step % 50 == 0:
            log.info("step %d loss %.4f", step, value)
        if time_budget is not None and time.monotonic() - start > time_budget:
            log.info("time budget reached after %d steps", step + 1)
            break
    result = TrainResult(_snapshot(params, arch), losses)
    if checkpoint_path:
        result.weights.save(checkpoint_path)
    return result


def _snapshot(params: dict, arch: ArchConfig) -> ModelWeights:
    return ModelWeights(arch, {k: v.detach().numpy().astype(np.float32).copy()
                               for k, v in params.items()})


def write_loss_trace(path, losses: list[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])


def arch_from_json(path) -> ArchConfig:
    with open(path) as fh:
        return ArchConfig.from_dict(json.load(fh))
