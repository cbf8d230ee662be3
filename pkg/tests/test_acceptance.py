"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import csv
import json
import time
from pathlib import Path

import numpy as np
from scipy import stats

from gsenet.audio_io import (MultichannelWaveform, Waveform, load_weights, read_wav, save_weights,
                             write_wav)
from gsenet.beamformer import BeamformerConfig, solve_mcwf, spectral_covariances
from gsenet.cli import main
from gsenet.dsp import MODEL_STFT, istft, stft
from gsenet.harness import run_protocol
from gsenet.metrics import bss_sdr
from gsenet.model import (ArchConfig, ModelWeights, OptimizerConfig, backward, build_model,
                          forward, train)
from gsenet.room import Rir, RirSet, RoomSpec, SamplingRanges, image_method_rir, sample_room, \
    schroeder_t60
from gsenet.signals import synthetic_noise, synthetic_speech
from gsenet.streaming import init_stream, process_chunk, stream
from gsenet.synth import (DatasetConfig, MixParams, SamplerConfig, TrainingExample, gain_to_db,
                          generate_dataset, sample_mix_params, synthesize_example)

from oracles import finite_difference

ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "configs" / "desk_gsenet.json"
DESK_WEIGHTS = ROOT / "artifacts" / "gsenet_desk.gsew"
TRAIN_BUDGET_S = 30 * 60


def test_1_streaming_equivalence(record):
    t0 = time.monotonic()
    w = build_model(ArchConfig(), seed=11)
    rng = np.random.default_rng(1)
    n = 10 * 16000
    y0 = synthetic_speech(rng, n) + 0.3 * synthetic_noise(rng, n)
    y1 = y0 + 0.5 * synthetic_speech(rng, n)
    offline, _ = forward(w, y0, y1)
    outs = {c: stream(w, [y0, y1], c) for c in (1, 160, 4800)}
    err = max(float(np.max(np.abs(o - offline))) for o in outs.values())
    identical = all(outs[c].tobytes() == outs[1].tobytes() for c in outs)
    elapsed = time.monotonic() - t0
    ok = record(1, "streaming equivalence", err <= 1e-5 and identical and elapsed < 60,
                f"max |stream - offline| = {err:.2e}, chunkings bit-identical = {identical}, "
                f"{elapsed:.1f} s")
    assert ok


def test_2_latency_contract(record):
    w = build_model(ArchConfig(), seed=2)
    state = init_stream(w)
    x = np.random.default_rng(2).normal(size=(2, 2000))
    first = None
    for k in range(x.shape[1]):
        got = process_chunk(state, x[0, k:k + 1], x[1, k:k + 1])
        if got.size and first is None:
            first = k  # input samples consumed before this one
        assert state.emitted == max(0, k + 1 - 480)
    ok = record(2, "latency contract", first == 480,
                f"first output emitted after {first} input samples (30 ms = 480)")
    assert ok


def test_3_gradient_correctness(record):
    t0 = time.monotonic()
    rng = np.random.default_rng(3)
    w = build_model(ArchConfig(encoder_channels=(2, 4)), seed=3)
    for k in w.tensors:
        if k.endswith(".bias"):
            w.tensors[k] = (rng.normal(size=w.tensors[k].shape) * 0.05).astype(np.float32)
    n = 4000
    y0 = rng.normal(size=n) * 0.3
    y1 = y0 + rng.normal(size=n) * 0.3
    ex = TrainingExample(Waveform(y0, 16000), Waveform(y1, 16000),
                         Waveform(np.convolve(y0, [0.6, 0.2])[:n], 16000),
                         MixParams(1, 1, 0, 1, 1, 1))
    _, grads = backward(w, ex)
    names = list(w.tensors)
    worst = 0.0
    for _ in range(24):
        name = names[rng.integers(len(names))]
        idx = tuple(int(rng.integers(s)) for s in w.tensors[name].shape)
        fd = finite_difference(w, ex, name, idx)
        an = float(grads[name][idx])
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    elapsed = time.monotonic() - t0
    ok = record(3, "gradient correctness", worst <= 1e-3 and elapsed < 120,
                f"24 parameters, max relative error {worst:.2e}, {elapsed:.1f} s")
    assert ok


def test_4_overfit_sanity(record):
    t0 = time.monotonic()
    ex = next(generate_dataset(4, DatasetConfig(clip_seconds=1.0), count=1))
    res = train(build_model(ArchConfig(), seed=4), iter([ex] * 500), 500,
                OptimizerConfig(), seed=4)
    first, last = res.losses[0], res.losses[-1]
    elapsed = time.monotonic() - t0
    ok = record(4, "overfit sanity", last <= 0.2 * first and elapsed < 300,
                f"loss {first:.3f} -> {last:.3f} ({100 * last / first:.1f}% of initial), "
                f"{elapsed:.0f} s")
    assert ok


def test_5_beamformer_gain(record):
    t0 = time.monotonic()
    gains = []
    for seed in range(4):
        table = run_protocol(seed)
        gains.append(table.value("beamformer", "speech", 0.0, 90)
                     - table.value("reference_mic", "speech", 0.0, 90))
    mean = float(np.mean(gains))
    elapsed = time.monotonic() - t0
    ok = record(5, "beamformer gain", mean >= 2.0 and elapsed < 300,
                f"mean 90 deg gain over seeds 0-3 = {mean:.2f} dB "
                f"(per seed {', '.join(f'{g:.2f}' for g in gains)}), {elapsed:.0f} s")
    assert ok


def test_6_wiener_oracle(record):
    rng = np.random.default_rng(6)
    n_t, n_f = 500, 161
    s = rng.normal(size=(n_t, n_f)) + 1j * rng.normal(size=(n_t, n_f))
    noise = (rng.normal(size=(n_t, n_f)) + 1j * rng.normal(size=(n_t, n_f))) \
        * np.linspace(0.2, 4.0, n_f)
    # remove the sample cross-power so the closed form holds exactly
    noise -= np.sum(noise * s.conj(), axis=0) / np.sum(np.abs(s) ** 2, axis=0) * s
    phi_mat, phi_vec = spectral_covariances((s + noise)[None], s, 1)
    w = solve_mcwf(phi_mat, phi_vec, BeamformerConfig(num_mics=1, num_frames=1,
                                                     diagonal_loading=0.0))
    ps = np.mean(np.abs(s) ** 2, axis=0)
    pn = np.mean(np.abs(noise) ** 2, axis=0)
    err = float(np.max(np.abs(w.taps[:, 0] - ps / (ps + pn))))
    ok = record(6, "Wiener oracle", err <= 1e-6, f"max |w - Ps/(Ps+Pn)| = {err:.2e}")
    assert ok


def test_7_rir_physics(record):
    rng = np.random.default_rng(7)
    worst_delay = 0.0
    for _ in range(100):
        dims = rng.uniform([3, 3, 2.5], [10, 10, 4])
        room = RoomSpec(tuple(dims), absorption=rng.uniform(0.2, 0.9))
        src, rcv = rng.uniform(0.3, dims - 0.3), rng.uniform(0.3, dims - 0.3)
        r = image_method_rir(room, src, rcv, 16000, length=4000)
        expected = np.linalg.norm(src - rcv) * 16000 / 343.0
        lo = max(0, int(round(expected)) - 1)
        peak = lo + int(np.argmax(np.abs(r.taps[lo:lo + 3])))
        worst_delay = max(worst_delay, abs(peak - expected))
    worst_t60 = 0.0
    for _ in range(20):
        layout = sample_room(rng, SamplingRanges(), 1, 1)
        r = image_method_rir(layout.room, layout.sources[0], layout.receivers[0], 16000)
        est = schroeder_t60(r.taps, 16000)
        worst_t60 = max(worst_t60, abs(est / layout.room.target_t60 - 1.0))
    ok = record(7, "RIR physics", worst_delay <= 1.0 and worst_t60 <= 0.2,
                f"worst direct-path offset {worst_delay:.2f} samples, "
                f"worst T60 error {100 * worst_t60:.1f}%")
    assert ok


def test_8_contrast_property(record):
    rng = np.random.default_rng(8)

    def shared_rir():
        h = rng.normal(size=300) * np.exp(-np.arange(300) / 40.0)
        h[5] = 3.0
        r = Rir(h / np.sqrt(np.sum(h ** 2)), 16000, 5.0)
        return [r, r]

    rirs = RirSet([shared_rir() for _ in range(3)], np.zeros((3, 3)), np.zeros((2, 3)),
                  RoomSpec((5, 5, 3), 0.5))
    p = MixParams(gN=0.6, gI=0.8, pI=1, alpha=1.7, beta=2.9, gGlobal=0.5)
    n = 320000
    z = np.zeros(n)
    ex_n = synthesize_example(z, rng.normal(size=n), z, rirs, p)
    ex_i = synthesize_example(z, z, rng.normal(size=n), rirs, p)
    rn = np.mean(ex_n.y1.samples ** 2) / np.mean(ex_n.y0.samples ** 2) / p.alpha ** 2
    ri = np.mean(ex_i.y1.samples ** 2) / np.mean(ex_i.y0.samples ** 2) / p.beta ** 2
    ok = record(8, "data-pipeline contrast", abs(rn - 1) < 0.01 and abs(ri - 1) < 0.01,
                f"noise ratio / alpha^2 = {rn:.5f}, interference ratio / beta^2 = {ri:.5f}")
    assert ok


def _truncated_ks(values_db, mean, std, floor):
    above = values_db[values_db > floor + 1e-9]
    a = (floor - mean) / std
    return stats.kstest(above, stats.truncnorm(a, np.inf, loc=mean, scale=std).cdf).pvalue


def test_9_sampler_fidelity(record):
    expected = {
        "ssenetA": {"gN": (-5, 10), "pI": 0.0},
        "ssenetB": {"gN": (-5, 10), "gI": (-9, 3), "pI": 0.4},
        "gsenet": {"gN": (-5, 10), "gI": (-3, 3), "pI": 0.4,
                   "alpha": (0, 3, -4), "beta": (4, 6, 4)},
    }
    failures = []
    for kind, exp in expected.items():
        rng = np.random.default_rng(9)
        cfg = SamplerConfig.for_model(kind)
        draws = [sample_mix_params(rng, cfg) for _ in range(100_000)]
        get = {k: np.array([getattr(d, k) for d in draws]) for k in MixParams.__dataclass_fields__}
        rate = get["pI"].mean()
        if abs(rate - exp["pI"]) > 0.02:
            failures.append(f"{kind} pI rate {rate:.4f}")
        for key in ("gN", "gI"):
            if key in exp:
                db = gain_to_db(get[key])
                if stats.kstest(db, stats.norm(*exp[key]).cdf).pvalue <= 0.01:
                    failures.append(f"{kind} {key} KS")
        for key in ("alpha", "beta"):
            if key in exp:
                mean, std, floor = exp[key]
                db = gain_to_db(get[key])
                if db.min() < floor - 1e-9:
                    failures.append(f"{kind} {key} below floor")
                if _truncated_ks(db, mean, std, floor) <= 0.01:
                    failures.append(f"{kind} {key} KS")
        g = gain_to_db(get["gGlobal"])
        if stats.kstest(g, stats.uniform(-10, 10).cdf).pvalue <= 0.01:
            failures.append(f"{kind} gGlobal KS")
    ok = record(9, "sampler fidelity", not failures,
                "3 samplers x 1e5 draws" + (f"; failed: {failures}" if failures else ""))
    assert ok


def test_10_metric_oracles(record, tmp_path):
    rng = np.random.default_rng(10)
    s = np.convolve(rng.normal(size=16000), np.hanning(9), "same")
    s[:600] = s[-600:] = 0
    caps = [bss_sdr(s, s)] + [bss_sdr(np.concatenate([np.zeros(d), s[:-d]]), s)
                              for d in (1, 100, 512 - 1)]
    ref = rng.normal(size=64000)
    e = rng.normal(size=64000)
    e *= np.sqrt(np.sum(ref ** 2) / np.sum(e ** 2) / 10.0)
    ten = bss_sdr(ref + e, ref)
    x = rng.normal(size=8000)
    y = istft(stft(x), length=len(x))
    hop = MODEL_STFT.hop_length
    covered = MODEL_STFT.num_frames(len(x)) * hop
    rt = float(np.max(np.abs(y[hop:covered] - x[hop:covered])))
    arr = rng.normal(size=(3, 5)).astype(np.float32)
    save_weights(tmp_path / "w.gsew", [("a", arr)])
    weights_exact = load_weights(tmp_path / "w.gsew")["a"].tobytes() == arr.tobytes()
    data = rng.normal(size=(2, 999)).astype(np.float32).astype(np.float64)
    write_wav(tmp_path / "f.wav", MultichannelWaveform(data, 16000), "float32")
    wav_exact = read_wav(tmp_path / "f.wav").data.tobytes() == data.tobytes()
    passed = (all(c == 100.0 for c in caps) and abs(ten - 10.0) <= 0.5 and rt <= 1e-6
              and weights_exact and wav_exact)
    ok = record(10, "metric oracles", passed,
                f"cap hits {caps}, 10 dB mixture -> {ten:.2f} dB, STFT round trip {rt:.1e}, "
                f"weights exact {weights_exact}, float WAV exact {wav_exact}")
    assert ok


def _desk_weights() -> tuple[Path, str]:
    """The desk-trained GSENet: the cached artifact, or a fresh run of the same config."""
    if DESK_WEIGHTS.exists():
        return DESK_WEIGHTS, "cached artifact"
    t0 = time.monotonic()
    assert main(["train", "--config", str(DESK_CONFIG), "--out", str(DESK_WEIGHTS),
                 "--seed", "0"]) == 0
    elapsed = time.monotonic() - t0
    assert elapsed <= TRAIN_BUDGET_S
    return DESK_WEIGHTS, f"trained here in {elapsed / 60:.1f} min"


def test_11_end_to_end(record, tmp_path):
    cfg = json.loads(DESK_CONFIG.read_text())
    assert cfg["time_budget"] <= TRAIN_BUDGET_S
    weights, origin = _desk_weights()
    assert ModelWeights.load(weights).arch.num_inputs == 2
    out = tmp_path / "eval"
    assert main(["eval", "--weights", str(weights), "--out-dir", str(out), "--seed", "0"]) == 0
    with open(out / "eval_table.csv") as fh:
        rows = list(csv.DictReader(fh))
    cells = {(r["system"], r["kind"], float(r["snr_db"]), int(r["angle_deg"])) for r in rows}
    finite = all(np.isfinite(float(r["bss_sdr_db"])) for r in rows)

    def average(system):
        vals = [float(r["bss_sdr_db"]) for r in rows
                if r["system"] == system and r["kind"] == "speech" and float(r["snr_db"]) == 0.0]
        assert len(vals) == 8
        return float(np.mean(vals))

    gse, bf = average("beamformer+model"), average("beamformer")
    ok = record(11, "end-to-end smoke", len(rows) == 96 and len(cells) == 96 and finite and gse > bf,
                f"{len(rows)} cells; 0 dB speech average: beamformer {bf:.2f} dB, "
                f"beamformer+GSENet {gse:.2f} dB ({origin})")
    assert ok
