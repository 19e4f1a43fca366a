"""Checkpoint serialization: JSON manifest plus a raw little-endian
float32 blob.

A checkpoint is a directory holding ``manifest.json``, ``params.bin`` and
``vocab.txt``. Floats never round-trip through decimal text, so
load(save(model)) reproduces every parameter bit-exactly.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .encoder import EncoderConfig, EncoderModel
from .errors import CheckpointError
from .tokenizer import Vocab

FORMAT_VERSION = "ssb-ckpt/1"
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"
VOCAB_NAME = "vocab.txt"
BLOB_DTYPE = np.dtype("<f4")


def save_checkpoint(model: EncoderModel, vocab: Vocab, path, seeds: list[int],
                    train_config: dict | None = None) -> None:
    """Write manifest + blob + vocab under ``path`` (created if needed)."""
    if model.dtype != np.float32:
        raise CheckpointError(
            f"checkpoints store little-endian float32; model is {model.dtype} "
            "(64-bit builds are for gradient checking, not persistence)")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    tensors = []
    offset = 0
    chunks = []
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype=BLOB_DTYPE).tobytes()
        tensors.append({"name": name, "shape": list(p.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    manifest = {
        "format": FORMAT_VERSION,
        "encoder_config": model.config.to_dict(),
        "train_config": train_config,
        "vocab_file": VOCAB_NAME,
        "seeds": list(seeds),
        "tensors": tensors,
    }
    (path / BLOB_NAME).write_bytes(b"".join(chunks))
    with open(path / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    vocab.save(path / VOCAB_NAME)


def _validate_manifest(manifest: dict, blob_size: int) -> None:
    if manifest.get("format") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {manifest.get('format')!r}, "
            f"expected {FORMAT_VERSION!r}")
    end = 0
    for t in manifest["tensors"]:
        expected = int(np.prod(t["shape"])) * BLOB_DTYPE.itemsize
        if t["nbytes"] != expected:
            raise CheckpointError(
                f"tensor {t['name']!r}: shape {t['shape']} implies {expected} bytes, "
                f"manifest says {t['nbytes']}")
        if t["offset"] != end:
            raise CheckpointError(
                f"tensor {t['name']!r}: offset {t['offset']} is not contiguous "
                f"(expected {end}); offsets must be ordered and non-overlapping")
        end += t["nbytes"]
    if end != blob_size:
        raise CheckpointError(f"blob is {blob_size} bytes, manifest covers {end}")


def load_checkpoint(path) -> tuple[EncoderModel, Vocab, dict]:
    """Rebuild the model and vocabulary; returns the manifest as well."""
    path = Path(path)
    try:
        with open(path / MANIFEST_NAME, encoding="utf-8") as fh:
            manifest = json.load(fh)
        blob = (path / BLOB_NAME).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest in {path}: {exc}") from exc

    _validate_manifest(manifest, len(blob))
    config = EncoderConfig.from_dict(manifest["encoder_config"])
    model = EncoderModel(config=config, dtype=np.dtype(np.float32))
    for t in manifest["tensors"]:
        raw = blob[t["offset"]: t["offset"] + t["nbytes"]]
        data = np.frombuffer(raw, dtype=BLOB_DTYPE).reshape(t["shape"]).copy()
        model.params[t["name"]] = Tensor(data, requires_grad=True)
    vocab = Vocab.load(path / manifest["vocab_file"])
    if config.vocab_size != vocab.size:
        raise CheckpointError(
            f"vocab file has {vocab.size} entries but config says {config.vocab_size}")
    return model, vocab, manifest
