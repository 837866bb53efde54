import json

import numpy as np
import pytest

from rtdlog import checkpoint, detector, electra, preprocess

from conftest import TINY_MESSAGES, tiny_config


@pytest.fixture
def saved(tmp_path, tiny_vocab):
    cfg = tiny_config()
    b = electra.new_bundle(tiny_vocab, preprocess.default_config(), cfg)
    rng = np.random.default_rng(0)
    for v in b.parameters().values():
        v += rng.normal(0, 0.05, v.shape).astype(v.dtype)
    b.steps = 17
    checkpoint.save(b, cfg, tmp_path / "ck")
    return b, cfg, tmp_path / "ck"


def probe():
    return [m + f" {i}" for i in range(13) for m in TINY_MESSAGES][:100]


def test_roundtrip_scores_identical(saved):
    b, cfg, d = saved
    back, cfg2 = checkpoint.load(d)
    assert cfg2 == cfg and back.steps == 17
    for k, v in b.parameters().items():
        assert np.array_equal(v, back.parameters()[k]), k
    before = [s.value for s in detector.score_lines(b, probe())]
    after = [s.value for s in detector.score_lines(back, probe())]
    assert before == after


def test_tensor_file_layout(tmp_path):
    t = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b.c": np.ones(4, np.float32)}
    checkpoint.write_tensors(tmp_path / "t.bin", t)
    raw = (tmp_path / "t.bin").read_bytes()
    assert raw[:8] == b"RTDTENS1"
    back = checkpoint.read_tensors(tmp_path / "t.bin")
    assert set(back) == {"a", "b.c"} and np.array_equal(back["a"], t["a"])
    (tmp_path / "t.bin").write_bytes(raw + b"\0")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.read_tensors(tmp_path / "t.bin")


def test_manifest_fields(saved):
    _, _, d = saved
    m = json.loads((d / "manifest.json").read_text())
    for key in ("format_version", "generator", "discriminator", "training", "seed", "steps", "vocab", "normalizer"):
        assert key in m
    assert m["tensors"]["dtype"] == "<f4"


def test_version_mismatch(saved):
    _, _, d = saved
    m = json.loads((d / "manifest.json").read_text())
    m["format_version"] = 99
    (d / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(checkpoint.CheckpointError, match="format"):
        checkpoint.load(d)


def test_vocab_tamper_detected(saved):
    _, _, d = saved
    with open(d / "vocab.txt", "a") as fh:
        fh.write("extra\n")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(d)


def test_missing_dir(tmp_path):
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(tmp_path / "nope")
