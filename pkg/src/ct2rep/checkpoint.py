"""Binary checkpoint: magic, version, JSON header, then little-endian float64 tensors.

Layout::

    b"CT2RCKPT" | u32 version | u64 header length | header JSON (sorted keys) | payload

The header lists every tensor with its shape and byte offset into the payload.
Everything is serialised deterministically, so save -> load -> save reproduces
the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .textproc import Vocabulary

MAGIC = b"CT2RCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    model_kind: str
    vocab: Vocabulary
    step: int
    tensors: dict  # name -> float64 array, model weights first, then "adam.*" moments
    optimizer_step: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def weights(self) -> dict:
        return {k: v for k, v in self.tensors.items() if not k.startswith("adam.")}

    @property
    def optimizer_arrays(self) -> dict:
        return {k: v for k, v in self.tensors.items() if k.startswith("adam.")}


def to_bytes(ckpt: Checkpoint) -> bytes:
    index, chunks, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "model_kind": ckpt.model_kind,
        "vocab": ckpt.vocab.itos,
        "step": int(ckpt.step),
        "optimizer_step": int(ckpt.optimizer_step),
        "meta": ckpt.meta,
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)) + head + b"".join(chunks)


def from_bytes(blob: bytes) -> Checkpoint:
    """Parse and validate the whole file before returning anything."""
    if len(blob) < _PREFIX.size:
        raise CheckpointError("file too short to be a checkpoint")
    magic, version, head_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; not a checkpoint")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads version {FORMAT_VERSION}")
    start = _PREFIX.size
    if start + head_len > len(blob):
        raise CheckpointError("header length runs past the end of the file")
    try:
        header = json.loads(blob[start: start + head_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupted checkpoint header: {exc}") from exc
    if header.get("format_version") != version:
        raise CheckpointVersionError(
            f"header says version {header.get('format_version')}, prefix says version {version}")
    try:
        config = RunConfig.from_dict(header["config"])
        vocab = Vocabulary(header["vocab"])
        payload = memoryview(blob)[start + head_len:]
        tensors = {}
        for item in header["tensors"]:
            lo, n = item["offset"], item["nbytes"]
            if lo + n > len(payload) or n != 8 * int(np.prod(item["shape"], dtype=np.int64)):
                raise CheckpointError(f"tensor {item['name']} is truncated or mis-sized")
            arr = np.frombuffer(payload[lo: lo + n], dtype="<f8").reshape(item["shape"])
            tensors[item["name"]] = arr.astype(np.float64)
        return Checkpoint(config, header["model_kind"], vocab, header["step"], tensors,
                          header.get("optimizer_step", 0), header.get("meta", {}))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupted checkpoint header: {exc}") from exc


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def capture(model, cfg: RunConfig, vocab: Vocabulary, step: int, optimizer=None, meta=None) -> Checkpoint:
    named = list(model.named_parameters())
    tensors = {name: p.data for name, p in named}
    opt_step = 0
    if optimizer is not None:
        tensors.update(optimizer.state_arrays({id(p): name for name, p in named}))
        opt_step = optimizer.step_count
    return Checkpoint(cfg, model.kind, vocab, step, tensors, opt_step, dict(meta or {}))


def restore(ckpt: Checkpoint, model, optimizer=None) -> None:
    if model.kind != ckpt.model_kind:
        raise CheckpointError(f"checkpoint holds a {ckpt.model_kind!r} model, got a {model.kind!r} model")
    model.load_state_dict(ckpt.weights)
    if optimizer is not None:
        names = {id(p): name for name, p in model.named_parameters()}
        optimizer.load_state_arrays(ckpt.optimizer_arrays, names, ckpt.optimizer_step)


def checkpoint_roundtrip(path) -> bool:
    """Load and re-serialise; raise if the bytes differ."""
    blob = Path(path).read_bytes()
    again = to_bytes(from_bytes(blob))
    if again != blob:
        raise CheckpointError(f"{path}: re-serialised checkpoint differs from the file")
    return True
