from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mast.data_io import (
    Checkpoint,
    Manifest,
    ManifestEntry,
    checkpoint_to_params,
    decode_tensor,
    encode_tensor,
    load_checkpoint,
    params_to_checkpoint,
    read_manifest,
    read_tensor,
    read_wav,
    save_checkpoint,
    synth_dataset,
    write_manifest,
    write_tensor,
    write_wav,
)
from mast.errors import CheckpointError, FormatError, InputError
from mast.model import forward, init_params, param_shapes
from mast.schedule import make_schedule

GOLDEN = Path(__file__).parent / "golden"


def test_scalar_file_is_19_bytes(tmp_path):
    p = tmp_path / "one.mtsr"
    write_tensor(p, np.array([1.0], dtype=np.float32))
    data = p.read_bytes()
    assert len(data) == 4 + 1 + 1 + 1 + 8 + 4
    assert data == (GOLDEN / "one_f32.mtsr").read_bytes()


def test_golden_files_parse():
    one = read_tensor(GOLDEN / "one_f32.mtsr")
    assert one.dtype == np.float32 and one.shape == (1,) and one[0] == 1.0
    grid = read_tensor(GOLDEN / "grid_2x3_f64.mtsr")
    assert grid.dtype == np.float64 and grid.shape == (2, 3)
    expected = np.array([[0.5, -1.25, 3.0], [1e-300, -0.0, 2.0**60]])
    assert grid.tobytes() == expected.tobytes()


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float32, np.float64]), hnp.array_shapes(min_dims=0, max_dims=4, max_side=5)))
def test_round_trip_bitwise(arr):
    back, end = decode_tensor(encode_tensor(arr))
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()
    assert end == len(encode_tensor(arr))


def test_truncated_payload_names_lengths(tmp_path):
    blob = encode_tensor(np.zeros((2, 3), dtype=np.float32))
    p = tmp_path / "t.mtsr"
    p.write_bytes(blob[:-5])
    with pytest.raises(FormatError, match=r"expected 24 bytes, found 19"):
        read_tensor(p)


@pytest.mark.parametrize(
    "mutate, pattern",
    [
        (lambda b: b"MTSX" + b[4:], "magic"),
        (lambda b: b[:4] + b"\x02" + b[5:], "version"),
        (lambda b: b[:5] + b"\x07" + b[6:], "dtype"),
        (lambda b: b[:10], "extents"),
        (lambda b: b[:3], "header"),
        (lambda b: b + b"\x00", "trailing"),
    ],
)
def test_malformed_tensor_errors(tmp_path, mutate, pattern):
    p = tmp_path / "bad.mtsr"
    p.write_bytes(mutate(encode_tensor(np.ones((2,), dtype=np.float64))))
    with pytest.raises(FormatError, match=pattern) as info:
        read_tensor(p)
    assert "byte" in str(info.value)


def test_rejects_other_dtypes():
    with pytest.raises(FormatError):
        encode_tensor(np.zeros(3, dtype=np.int32))


def test_synth_deterministic(tmp_path):
    a = synth_dataset(tmp_path / "a", 32, 4, seed=7)
    b = synth_dataset(tmp_path / "b", 32, 4, seed=7)
    files_a = sorted(p.name for p in a.parent.iterdir())
    assert files_a == sorted(p.name for p in b.parent.iterdir())
    for name in files_a:
        assert (a.parent / name).read_bytes() == (b.parent / name).read_bytes()
    c = synth_dataset(tmp_path / "c", 32, 4, seed=8)
    assert (c.parent / "sample_00000.mtsr").read_bytes() != (a.parent / "sample_00000.mtsr").read_bytes()


def _class_means(manifest):
    m = manifest if isinstance(manifest, Manifest) else read_manifest(manifest)
    x = m.load_arrays().astype(np.float64)
    y = np.array([e.labels[0] for e in m.entries])
    return x, y, {c: x[y == c].mean(0) for c in sorted(set(y))}


def test_synth_class_bands_differ(synth_manifest):
    _, _, means = _class_means(synth_manifest)
    band0 = means[0].mean(1).argmax()
    band1 = means[1].mean(1).argmax()
    assert band0 != band1


def test_synth_many_classes_use_band_modulo(tmp_path):
    # more classes than mel rows: class c peaks at row c mod h
    _, y, means = _class_means(synth_dataset(tmp_path, 40, 10, seed=3, shape=(8, 64)))
    for c in (0, 8, 9):
        assert means[c].mean(1).argmax() == c % 8


def test_nearest_centroid_learnable(synth_manifest):
    x, y, means = _class_means(synth_manifest)
    flat = x.reshape(len(x), -1)
    # leave-one-out centroids so a sample never votes for itself
    correct = 0
    for i in range(len(x)):
        cents = {}
        for c in means:
            members = [j for j in range(len(x)) if y[j] == c and j != i]
            cents[c] = flat[members].mean(0)
        pred = min(cents, key=lambda c: ((flat[i] - cents[c]) ** 2).sum())
        correct += pred == y[i]
    assert correct / len(x) >= 0.9


def test_manifest_round_trip_and_relative_paths(tmp_path):
    (tmp_path / "d").mkdir()
    f = tmp_path / "d" / "x.mtsr"
    write_tensor(f, np.zeros((2, 2), dtype=np.float32))
    m = Manifest([ManifestEntry(f, [1, 2], [0])])
    write_manifest(tmp_path / "d" / "m.jsonl", m)
    line = json.loads((tmp_path / "d" / "m.jsonl").read_text())
    assert line == {"path": "x.mtsr", "labels": [1, 2], "labels2": [0]}
    back = read_manifest(tmp_path / "d" / "m.jsonl")
    assert back.entries[0].path == f and back.entries[0].labels == [1, 2]


def test_manifest_accepts_scalar_label(tmp_path):
    write_tensor(tmp_path / "x.mtsr", np.zeros((1,), dtype=np.float32))
    (tmp_path / "m.jsonl").write_text('{"path": "x.mtsr", "labels": 3}\n\n')
    assert read_manifest(tmp_path / "m.jsonl").entries[0].labels == [3]


def test_manifest_validation(tmp_path):
    f = tmp_path / "x.mtsr"
    write_tensor(f, np.zeros((1,), dtype=np.float32))
    Manifest([ManifestEntry(f, [3])]).validate((4,))
    with pytest.raises(InputError, match="out of range"):
        Manifest([ManifestEntry(f, [4])]).validate((4,))
    with pytest.raises(InputError, match="missing file"):
        Manifest([ManifestEntry(tmp_path / "nope.mtsr", [0])]).validate((4,))
    with pytest.raises(InputError, match="labels2"):
        Manifest([ManifestEntry(f, [0])]).validate((4, 5))
    with pytest.raises(InputError, match="head 1"):
        Manifest([ManifestEntry(f, [0], [5])]).validate((4, 5))


def test_manifest_format_errors(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text("{not json}\n")
    with pytest.raises(FormatError, match=":1:"):
        read_manifest(p)
    p.write_text('{"path": "a"}\n')
    with pytest.raises(FormatError):
        read_manifest(p)
    p.write_text('{"path": "a", "labels": ["x"]}\n')
    with pytest.raises(FormatError):
        read_manifest(p)


def test_wav_stereo_is_averaged(tmp_path):
    left = np.full(100, 0.5)
    right = np.full(100, -0.25)
    write_wav(tmp_path / "s.wav", np.stack([left, right], axis=1), 8000, channels=2)
    mono, rate = read_wav(tmp_path / "s.wav")
    assert rate == 8000 and mono.shape == (100,)
    expected = (round(0.5 * 32767) + round(-0.25 * 32767)) / 2 / 32768
    np.testing.assert_allclose(mono, expected, rtol=0, atol=1e-15)


def test_wav_rejects_8_bit(tmp_path):
    import wave

    with wave.open(str(tmp_path / "b.wav"), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(1)
        w.setframerate(8000)
        w.writeframes(bytes(10))
    with pytest.raises(FormatError, match="16-bit"):
        read_wav(tmp_path / "b.wav")


def test_checkpoint_round_trip_forward_bitwise(tmp_path):
    s = make_schedule("mast-tiny")
    params = init_params(s, seed=3)
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, params_to_checkpoint(params, {"base_lr": 1e-4}))
    ckpt = load_checkpoint(p, s)
    assert ckpt.schedule == s and ckpt.train_config == {"base_lr": 1e-4}
    for k, v in params.items():
        assert ckpt.tensors[k].tobytes() == v.data.tobytes()
    x = np.random.default_rng(0).standard_normal((2, *s.input_shape)).astype(np.float32)
    a = forward(x, params).logits[0].data
    b = forward(x, checkpoint_to_params(ckpt)).logits[0].data
    assert a.tobytes() == b.tobytes()


def test_ast_checkpoint_into_mast_b_lists_names(tmp_path):
    ast = make_schedule("ast")
    tensors = {k: np.zeros(v, dtype=np.float32) for k, v in param_shapes(ast).items()}
    p = tmp_path / "ast.ckpt"
    save_checkpoint(p, Checkpoint(ast, tensors))
    del tensors
    with pytest.raises(CheckpointError) as info:
        load_checkpoint(p, make_schedule("mast-b"))
    msg = str(info.value)
    assert "missing=" in msg and "extra=" in msg
    assert "blocks.23" in msg  # mast-b has 24 blocks, ast only 12


def test_checkpoint_count_mismatch(tmp_path):
    s = make_schedule("gradcheck-tiny")
    p = tmp_path / "c.ckpt"
    save_checkpoint(p, params_to_checkpoint(init_params(s)))
    buf = bytearray(p.read_bytes())
    (head_len,) = struct.unpack_from("<Q", buf, 5)
    header = json.loads(buf[13:13 + head_len])
    header["tensor_count"] += 1
    new_head = json.dumps(header, sort_keys=True).encode()
    p.write_bytes(bytes(buf[:5]) + struct.pack("<Q", len(new_head)) + new_head + bytes(buf[13 + head_len:]))
    with pytest.raises(FormatError, match="declares"):
        load_checkpoint(p)


def test_checkpoint_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "c.ckpt"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(p)
    s = make_schedule("gradcheck-tiny")
    save_checkpoint(p, params_to_checkpoint(init_params(s)))
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(p)
