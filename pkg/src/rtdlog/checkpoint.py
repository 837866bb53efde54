"""On-disk model format.

A checkpoint is a directory::

    manifest.json     format version, encoder/training configs, file digests
    tensors.bin       named little-endian float32 arrays with shape headers
    vocab.txt/.json   tokenizer vocabulary and sidecar
    normalizer.json   normalizer config

``tensors.bin`` layout: magic ``RTDTENS1``, u32 tensor count, then per
tensor: u16 name length, UTF-8 name, u8 rank, u32 dims, raw ``<f4`` data.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .electra import ModelBundle, TrainingConfig, encoder_configs
from .encoder import EncoderState
from .preprocess import NormalizerConfig
from .tokenizer import Vocabulary

FORMAT_VERSION = 1
MAGIC = b"RTDTENS1"


class CheckpointError(ValueError):
    pass


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a tensor file")
    off = len(MAGIC)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        out[name] = arr.astype(np.float32)
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return out


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save(bundle: ModelBundle, cfg: TrainingConfig, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    bundle.vocab.save(d / "vocab.txt", d / "vocab.json")
    bundle.normalizer.save(d / "normalizer.json")
    write_tensors(d / "tensors.bin", bundle.parameters())
    gen_cfg, disc_cfg = encoder_configs(cfg, len(bundle.vocab))
    manifest = {
        "format_version": FORMAT_VERSION,
        "generator": gen_cfg.to_dict(),
        "discriminator": disc_cfg.to_dict(),
        "training": cfg.to_dict(),
        "seed": cfg.seed,
        "steps": bundle.steps,
        "vocab": {"file": "vocab.txt", "sidecar": "vocab.json", "sha256": _sha256(d / "vocab.txt")},
        "normalizer": {"file": "normalizer.json", "sha256": _sha256(d / "normalizer.json")},
        "tensors": {"file": "tensors.bin", "dtype": "<f4"},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return d


def load(directory) -> tuple[ModelBundle, TrainingConfig]:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"{d}: no manifest.json") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{d}: checkpoint format {manifest.get('format_version')!r}, "
                              f"this build reads {FORMAT_VERSION}")
    vocab_file = d / manifest["vocab"]["file"]
    if _sha256(vocab_file) != manifest["vocab"]["sha256"]:
        raise CheckpointError(f"{vocab_file}: digest mismatch")
    vocab = Vocabulary.load(vocab_file, d / manifest["vocab"]["sidecar"])
    normalizer = NormalizerConfig.load(d / manifest["normalizer"]["file"])
    cfg = TrainingConfig.from_dict(manifest["training"])
    gen_cfg, disc_cfg = encoder_configs(cfg, len(vocab))
    t = read_tensors(d / manifest["tensors"]["file"])

    def take(prefix):
        return {k[len(prefix):]: v for k, v in t.items() if k.startswith(prefix)}

    bundle = ModelBundle(
        vocab, normalizer, t["emb"], EncoderState(gen_cfg, take("gen.")), take("gen_head."),
        EncoderState(disc_cfg, take("disc.")), t["disc_head.w"], cfg.max_len, manifest["steps"],
    )
    expected = set(ModelBundle.parameters(bundle))
    if expected != set(t):
        raise CheckpointError(f"{d}: tensor names do not match the model layout")
    return bundle, cfg
