import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gsenet.audio_io import (MultichannelWaveform, Waveform, WavError, WeightFileError,
                             check_rate, decode_json_tensor, encode_json_tensor, load_weights,
                             read_wav, save_weights, write_wav)


def _pcm16_bytes(values, channels=1, rate=16000):
    payload = struct.pack(f"<{len(values)}h", *values)
    fmt = struct.pack("<HHIIHH", 1, channels, rate, rate * 2 * channels, 2 * channels, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack(
        "<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


def test_pcm16_decodes_by_32768(tmp_path):
    p = tmp_path / "a.wav"
    p.write_bytes(_pcm16_bytes([0, 16384, -32768, 32767, -1]))
    w = read_wav(p)
    assert w.sample_rate == 16000
    np.testing.assert_array_equal(w.data[0], [0.0, 0.5, -1.0, 32767 / 32768, -1 / 32768])


def test_pcm16_interleaved_channels(tmp_path):
    p = tmp_path / "st.wav"
    p.write_bytes(_pcm16_bytes([1, 2, 3, 4, 5, 6], channels=2))
    w = read_wav(p)
    np.testing.assert_array_equal(w.data * 32768, [[1, 3, 5], [2, 4, 6]])


def test_float_roundtrip_bit_exact(tmp_path, rng):
    data = rng.normal(size=(3, 1001)).astype(np.float32).astype(np.float64)
    p = tmp_path / "f.wav"
    write_wav(p, MultichannelWaveform(data, 16000), "float32")
    back = read_wav(p, expected_rate=16000)
    assert back.data.tobytes() == data.tobytes()


def test_pcm16_write_rounds_and_clips(tmp_path):
    x = np.array([0.0, 1.0, -1.0, 2.0, 0.5 / 32768, -0.5 / 32768, 1.4 / 32768])
    p = tmp_path / "q.wav"
    write_wav(p, Waveform(x, 16000), "pcm16")
    got = np.round(read_wav(p).data[0] * 32768).astype(int)
    np.testing.assert_array_equal(got, [0, 32767, -32768, 32767, 1, -1, 1])


def test_rate_mismatch_rejected(tmp_path):
    p = tmp_path / "r.wav"
    p.write_bytes(_pcm16_bytes([0, 1], rate=8000))
    with pytest.raises(ValueError):
        read_wav(p, expected_rate=16000)
    with pytest.raises(ValueError):
        check_rate(44100)


@pytest.mark.parametrize("cut", [3, 20, 44, 47])
def test_truncated_wav_rejected(tmp_path, cut):
    raw = _pcm16_bytes([1, 2, 3, 4])
    p = tmp_path / "t.wav"
    p.write_bytes(raw[:cut])
    with pytest.raises(WavError):
        read_wav(p)


def test_unsupported_encoding(tmp_path):
    raw = bytearray(_pcm16_bytes([1, 2]))
    raw[34:36] = struct.pack("<H", 24)  # bits per sample
    p = tmp_path / "u.wav"
    p.write_bytes(bytes(raw))
    with pytest.raises(WavError):
        read_wav(p)


def test_weights_known_bytes(tmp_path):
    raw = (b"GSEW" + struct.pack("<II", 1, 1) + struct.pack("<I", 1) + b"w"
           + struct.pack("<III", 2, 2, 1) + struct.pack("<2f", 1.5, -2.0))
    p = tmp_path / "k.gsew"
    p.write_bytes(raw)
    got = load_weights(p)
    assert list(got) == ["w"]
    np.testing.assert_array_equal(got["w"], [[1.5], [-2.0]])
    p2 = tmp_path / "k2.gsew"
    save_weights(p2, got)
    assert p2.read_bytes() == raw


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(0, 5)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_weights_roundtrip_bit_exact(tmp_path_factory, arr):
    p = tmp_path_factory.mktemp("w") / "x.gsew"
    save_weights(p, [("a.weight", arr), ("b", np.float32(3.0) * np.ones(2, np.float32))])
    back = load_weights(p)
    assert list(back) == ["a.weight", "b"]
    assert back["a.weight"].tobytes() == arr.tobytes()
    assert back["a.weight"].shape == arr.shape


@pytest.mark.parametrize("mutate", ["magic", "version", "truncate", "trailing"])
def test_weights_corruption(tmp_path, mutate):
    p = tmp_path / "c.gsew"
    save_weights(p, {"x": np.ones(3, np.float32)})
    raw = bytearray(p.read_bytes())
    if mutate == "magic":
        raw[:4] = b"XXXX"
    elif mutate == "version":
        raw[4:8] = struct.pack("<I", 9)
    elif mutate == "truncate":
        raw = raw[:-2]
    else:
        raw += b"\0"
    p.write_bytes(bytes(raw))
    with pytest.raises(WeightFileError):
        load_weights(p)


def test_duplicate_names_rejected(tmp_path):
    with pytest.raises(WeightFileError):
        save_weights(tmp_path / "d.gsew", [("a", np.ones(1)), ("a", np.zeros(1))])


def test_json_tensor_roundtrip():
    doc = {"channels": [2, 4], "name": "ünï", "slope": 0.3}
    assert decode_json_tensor(encode_json_tensor(doc)) == doc


def test_multichannel_validation():
    with pytest.raises(ValueError):
        MultichannelWaveform.from_channels([Waveform(np.zeros(3), 16000),
                                            Waveform(np.zeros(4), 16000)])
    with pytest.raises(ValueError):
        Waveform(np.zeros((2, 2)), 16000)
