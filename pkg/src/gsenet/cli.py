"""Command-line entry point.

Every subcommand accepts ``--config file.json``; explicit flags override
values read from the file. ``--seed`` is the master seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

log = logging.getLogger("gsenet")


def _config(args) -> dict:
    if not getattr(args, "config", None):
        return {}
    from .audio_io import load_config
    return load_config(args.config)


def _pick(flag, cfg: dict, key: str, default):
    if flag is not None:
        return flag
    return cfg.get(key, default)


def _dump(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_rir(args) -> int:
    from .room import SamplingRanges, layout_rirs, sample_room, save_rirset
    cfg = _config(args)
    ranges = SamplingRanges(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in cfg.get("rooms", {}).items()})
    rng = np.random.default_rng(args.seed)
    layout = sample_room(rng, ranges, _pick(args.num_sources, cfg, "num_sources", 3),
                         _pick(args.num_receivers, cfg, "num_receivers", 2))
    rirs = layout_rirs(layout, seed=args.seed)
    save_rirset(args.out, rirs)
    print(json.dumps({"out": str(args.out), "room": list(layout.room.dimensions),
                      "t60": layout.room.target_t60, "absorption": layout.room.absorption}))
    return 0


def _dataset_config(cfg: dict, model_kind: str | None, clip_seconds: float | None):
    from .synth import DatasetConfig, SamplerConfig
    d = dict(cfg.get("dataset", {}))
    ds = DatasetConfig.from_dict(d)
    if model_kind is not None:
        ds = replace(ds, sampler=SamplerConfig.for_model(model_kind))
    if clip_seconds is not None:
        ds = replace(ds, clip_seconds=clip_seconds)
    return ds


def cmd_synth(args) -> int:
    from .synth import generate_dataset, save_example
    cfg = _config(args)
    ds = _dataset_config(cfg, args.model_kind, args.clip_seconds)
    count = _pick(args.count, cfg, "count", 10)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for idx, ex in enumerate(generate_dataset(args.seed, ds, count=count)):
        save_example(out / f"example_{idx:05d}.wav", ex)
    _dump(out / "dataset.json", {"seed": args.seed, "count": count, "config": ds.to_dict()})
    print(json.dumps({"out_dir": str(out), "count": count}))
    return 0


def _directory_examples(path: Path):
    from .synth import load_example
    files = sorted(path.glob("example_*.wav"))
    if not files:
        raise ValueError(f"no example_*.wav files in {path}")
    while True:
        for f in files:
            yield load_example(f)


def cmd_train(args) -> int:
    from .model import (ArchConfig, LossConfig, OptimizerConfig, build_model, train,
                        write_loss_trace)
    from .synth import generate_dataset
    cfg = _config(args)
    kind = _pick(args.model_kind, cfg, "model_kind", "gsenet")
    arch_d = dict(cfg.get("arch", {}))
    arch_d.setdefault("num_inputs", 2 if kind == "gsenet" else 1)
    arch = ArchConfig.from_dict(arch_d)
    opt = OptimizerConfig(**cfg.get("optimizer", {}))
    if args.learning_rate is not None:
        opt = replace(opt, learning_rate=args.learning_rate)
    loss_cfg = LossConfig(**{k: v for k, v in cfg.get("loss", {}).items() if k != "stft"})
    steps = _pick(args.steps, cfg, "steps", 1000)
    budget = _pick(args.time_budget, cfg, "time_budget", None)
    if args.data_dir:
        data = _directory_examples(Path(args.data_dir))
    else:
        data = generate_dataset(args.seed, _dataset_config(cfg, kind, args.clip_seconds))
    weights = build_model(arch, seed=args.seed, zero_output=cfg.get("zero_output", True))
    result = train(weights, data, steps, opt, loss_cfg, checkpoint_path=args.out,
                   seed=args.seed, time_budget=budget)
    trace = args.loss_trace or str(Path(args.out).with_suffix(".loss.csv"))
    write_loss_trace(trace, result.losses)
    print(json.dumps({"weights": str(args.out), "loss_trace": trace,
                      "steps": len(result.losses), "final_loss": result.losses[-1]}))
    return 0


def _protocol_config(cfg: dict):
    from .beamformer import BeamformerConfig
    from .harness import ProtocolConfig
    from .scene import SceneConfig
    from .room import SamplingRanges
    d = dict(cfg.get("protocol", {}))
    scene_d = {}
    for k, v in d.pop("scene", {}).items():
        if k == "room_ranges":
            v = SamplingRanges(**{a: tuple(b) if isinstance(b, list) else b for a, b in v.items()})
        elif k == "mic_geometry":
            v = tuple(tuple(p) for p in v)
        elif isinstance(v, list):
            v = tuple(v)
        scene_d[k] = v
    scene = SceneConfig(**scene_d)
    bf = BeamformerConfig.from_dict(d.pop("beamformer", {}))
    return ProtocolConfig(scene=scene, beamformer=bf, **d)


def cmd_derive_bf(args) -> int:
    from .audio_io import read_wav
    from .beamformer import BeamformerConfig, derive_beamformer, save_beamformer
    from .harness import _seeds, derive_protocol_beamformer
    cfg = _config(args)
    if args.speech or args.noise:
        if not (args.speech and args.noise):
            raise ValueError("--speech and --noise must be given together")
        bf_cfg = BeamformerConfig.from_dict(cfg.get("beamformer", {}))
        w = derive_beamformer(read_wav(args.speech, 16000), read_wav(args.noise, 16000), bf_cfg)
    else:
        pcfg = _protocol_config(cfg)
        w = derive_protocol_beamformer(_seeds(np.random.default_rng(args.seed)), pcfg)
    save_beamformer(args.out, w)
    print(json.dumps({"out": str(args.out), "singular_bins": w.singular_bins}))
    return 0


def cmd_enhance(args) -> int:
    from .audio_io import Waveform, read_wav, write_wav
    from .beamformer import apply_beamformer, load_beamformer
    from .model import ModelWeights
    from .streaming import finalize, init_stream, process_chunk
    weights = ModelWeights.load(args.weights)
    wave = read_wav(args.input, expected_rate=16000)
    if wave.num_channels == 2 and not args.beamformer:
        y0, y1 = wave.data
    elif args.beamformer:
        bf = load_beamformer(args.beamformer)
        y0 = apply_beamformer(bf, wave)
        y1 = wave.data[bf.reference_mic]
    else:
        raise ValueError("input must have 2 channels (beamformer, reference mic), or pass "
                         "--beamformer for raw multichannel input")
    sources = [y0, y1][:weights.arch.num_inputs]
    state = init_stream(weights)
    chunk = args.chunk_size
    outs = []
    for start in range(0, len(y0), chunk):
        outs.append(process_chunk(state, *[s[start:start + chunk] for s in sources]))
    outs.append(finalize(state))
    out = np.concatenate(outs)
    write_wav(args.output, Waveform(out, 16000), args.encoding)
    _dump(Path(args.output).with_suffix(".json"),
          {"input": str(args.input), "weights": str(args.weights),
           "beamformer": args.beamformer, "chunk_size": chunk,
           "latency_samples": state.latency_samples, "num_samples": int(len(out))})
    return 0


def cmd_simulate_room(args) -> int:
    from .harness import save_recordings, simulate_scene
    from .signals import ClipProvider
    cfg = _config(args)
    scene = _protocol_config(cfg).scene
    rng = np.random.default_rng(args.seed)
    seeds = rng.integers(0, 2 ** 63 - 1, size=4)
    n = scene.num_samples
    sources = {"target": ClipProvider("builtin:speech", n, int(seeds[1])),
               "speech": ClipProvider("builtin:speech", n, int(seeds[2])),
               "noise": ClipProvider("builtin:noise", n, int(seeds[3]))}
    rec = simulate_scene(np.random.default_rng(int(seeds[0])), scene, sources)
    save_recordings(args.out_dir, rec)
    print(json.dumps({"out_dir": str(args.out_dir), "t60": rec.layout.room.target_t60}))
    return 0


def cmd_eval(args) -> int:
    from .beamformer import load_beamformer
    from .harness import emit_outputs, run_protocol
    from .model import ModelWeights
    cfg = _config(args)
    pcfg = _protocol_config(cfg)
    weights = ModelWeights.load(args.weights) if args.weights else None
    bf = load_beamformer(args.beamformer) if args.beamformer else None
    table = run_protocol(args.seed, pcfg, weights, bf)
    paths = emit_outputs(table, args.out_dir)
    summary = {f"{s}/{k}/{snr:g}dB": round(v, 3) for s, k, snr, v in table.averages()}
    print(json.dumps({"files": {k: str(v) for k, v in paths.items()}, "averages": summary},
                     indent=2))
    return 0


def cmd_profile(args) -> int:
    from .model import ArchConfig, ModelWeights, build_model
    from .streaming import init_stream, profile_stream
    weights = ModelWeights.load(args.weights) if args.weights else build_model(ArchConfig(),
                                                                               args.seed)
    report = profile_stream(init_stream(weights), args.duration, args.seed)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gsenet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, default=0, help="master seed")
        sp.set_defaults(func=func)
        return sp

    sp = add("rir", cmd_rir, "simulate a random room's RIR set")
    sp.add_argument("--out", required=True)
    sp.add_argument("--num-sources", type=int)
    sp.add_argument("--num-receivers", type=int)

    sp = add("synth", cmd_synth, "write training examples")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--count", type=int)
    sp.add_argument("--model-kind", choices=["ssenetA", "ssenetB", "gsenet"])
    sp.add_argument("--clip-seconds", type=float)

    sp = add("train", cmd_train, "train a model")
    sp.add_argument("--out", required=True, help="weights file (GSEW)")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--time-budget", type=float, help="seconds of wall time")
    sp.add_argument("--model-kind", choices=["ssenetA", "ssenetB", "gsenet"])
    sp.add_argument("--learning-rate", type=float)
    sp.add_argument("--clip-seconds", type=float)
    sp.add_argument("--data-dir", help="train on a synth output directory instead")
    sp.add_argument("--loss-trace")

    sp = add("derive-bf", cmd_derive_bf, "derive MCWF beamformer weights")
    sp.add_argument("--out", required=True)
    sp.add_argument("--speech", help="multichannel clean target WAV")
    sp.add_argument("--noise", help="multichannel noise WAV")

    sp = add("enhance", cmd_enhance, "stream a WAV through the model")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--beamformer", help="beamformer weights for raw multichannel input")
    sp.add_argument("--chunk-size", type=int, default=320)
    sp.add_argument("--encoding", choices=["float32", "pcm16"], default="float32")

    sp = add("simulate-room", cmd_simulate_room, "render a scene's per-source recordings")
    sp.add_argument("--out-dir", required=True)

    sp = add("eval", cmd_eval, "run the evaluation protocol")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--weights")
    sp.add_argument("--beamformer")

    sp = add("profile", cmd_profile, "time streaming inference")
    sp.add_argument("--weights")
    sp.add_argument("--duration", type=float, default=5.0)
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError, FloatingPointError, KeyError) as exc:
        print(f"gsenet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
