import csv
import json

import numpy as np
import pytest

from gsenet.audio_io import MultichannelWaveform, read_wav, write_wav
from gsenet.cli import main
from gsenet.model import ModelWeights


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, out


def test_rir_writes_set(tmp_path, capsys):
    code, out = _run(capsys, "rir", "--out", str(tmp_path / "rirs.wav"), "--seed", "3",
                     "--num-sources", "1", "--num-receivers", "1")
    assert code == 0
    info = json.loads(out)
    assert len(info["room"]) == 3
    assert list(tmp_path.iterdir())


def test_synth_train_enhance_profile(tmp_path, capsys):
    data = tmp_path / "data"
    code, _ = _run(capsys, "synth", "--out-dir", str(data), "--count", "2",
                   "--clip-seconds", "1.0", "--seed", "1")
    assert code == 0
    wavs = sorted(data.glob("example_*.wav"))
    assert len(wavs) == 2
    side = json.loads(wavs[0].with_suffix(".json").read_text())
    assert side["channels"] == ["y0", "y1", "target"]

    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"arch": {"encoder_channels": [2, 4]}, "steps": 3}))
    weights = tmp_path / "w.gsew"
    code, out = _run(capsys, "train", "--config", str(cfg), "--out", str(weights),
                     "--data-dir", str(data), "--seed", "0")
    assert code == 0
    info = json.loads(out)
    assert info["steps"] == 3
    with open(info["loss_trace"]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "loss"] and len(rows) == 4
    w = ModelWeights.load(weights)
    assert w.arch.encoder_channels == (2, 4)

    ex = read_wav(wavs[0])
    pair = tmp_path / "pair.wav"
    write_wav(pair, MultichannelWaveform(ex.data[:2], ex.sample_rate))
    enhanced = tmp_path / "enhanced.wav"
    code, _ = _run(capsys, "enhance", "--weights", str(weights), "--input", str(pair),
                   "--output", str(enhanced), "--chunk-size", "777")
    assert code == 0
    out_wave = read_wav(enhanced)
    assert out_wave.num_channels == 1 and out_wave.num_samples == ex.num_samples
    meta = json.loads(enhanced.with_suffix(".json").read_text())
    assert meta["latency_samples"] == 480

    report = tmp_path / "profile.json"
    code, out = _run(capsys, "profile", "--weights", str(weights), "--duration", "0.2",
                     "--out", str(report))
    assert code == 0
    prof = json.loads(report.read_text())
    assert prof["algorithmic_latency_samples"] == 480
    assert prof["num_chunks"] == 10


def test_enhance_rejects_mono(tmp_path, capsys):
    from gsenet.audio_io import Waveform
    from gsenet.model import ArchConfig, build_model
    w = tmp_path / "w.gsew"
    build_model(ArchConfig(encoder_channels=(2, 4)), 0).save(w)
    mono = tmp_path / "mono.wav"
    write_wav(mono, Waveform(np.zeros(1600), 16000))
    code = main(["enhance", "--weights", str(w), "--input", str(mono),
                 "--output", str(tmp_path / "o.wav")])
    assert code == 1
    assert "2 channels" in capsys.readouterr().err


def test_bad_config_is_an_error(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text("[1, 2]")
    code = main(["synth", "--config", str(cfg), "--out-dir", str(tmp_path / "x")])
    assert code == 1


@pytest.mark.slow
def test_eval_and_simulate_room(tmp_path, capsys):
    cfg = tmp_path / "proto.json"
    cfg.write_text(json.dumps({"protocol": {"scene": {"duration": 2.0}}}))
    code, out = _run(capsys, "eval", "--config", str(cfg), "--out-dir", str(tmp_path / "ev"),
                     "--seed", "0")
    assert code == 0
    with open(tmp_path / "ev" / "eval_table.csv") as fh:
        rows = list(csv.DictReader(fh))
    # two systems without a model: 2 x 8 angles x 2 kinds x 2 SNRs
    assert len(rows) == 64
    polar = json.loads((tmp_path / "ev" / "polar.json").read_text())
    assert polar["angles_deg"] == [0, 45, 90, 135, 180, 225, 270, 315]

    bf = tmp_path / "bf.gsew"
    code, _ = _run(capsys, "derive-bf", "--config", str(cfg), "--out", str(bf), "--seed", "0")
    assert code == 0 and bf.exists()

    code, _ = _run(capsys, "simulate-room", "--config", str(cfg),
                   "--out-dir", str(tmp_path / "scene"), "--seed", "2")
    assert code == 0
    target = read_wav(tmp_path / "scene" / "target.wav")
    assert target.num_channels == 3 and target.num_samples == 32000
