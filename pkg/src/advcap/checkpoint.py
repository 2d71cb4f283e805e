"""Single-file checkpoints: magic line, length-prefixed JSON header, raw float64 payload.

Layout::

    b"ADVCAP-CKPT/1\\n"
    8-byte little-endian header length
    UTF-8 JSON header {kind, config, vocab_hash, params: [{name, shape}], extra}
    parameter arrays, float64 little-endian, in header order
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import DataError, IntegrityError, PreconditionError

MAGIC = b"ADVCAP-CKPT/1\n"


def save_checkpoint(path, kind: str, config: dict, vocab_hash: str,
                    params: "OrderedDict[str, Tensor]", extra: dict | None = None) -> Path:
    path = Path(path)
    header = {
        "kind": kind,
        "config": config,
        "vocab_hash": vocab_hash,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for v in params.values():
            fh.write(np.ascontiguousarray(v.data, dtype="<f8").tobytes())
    return path


def read_checkpoint(path, expected_vocab_hash: str | None = None,
                    kind: str | None = None) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    path = Path(path)
    if not path.exists():
        raise PreconditionError(f"checkpoint {path} not found")
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise DataError(f"{path} is not an advcap checkpoint")
    off = len(MAGIC)
    (n,) = struct.unpack_from("<Q", raw, off)
    off += 8
    header = json.loads(raw[off:off + n].decode("utf-8"))
    off += n
    if kind is not None and header["kind"] != kind:
        raise IntegrityError(f"{path} holds a {header['kind']!r} checkpoint, expected {kind!r}")
    if expected_vocab_hash is not None and header["vocab_hash"] != expected_vocab_hash:
        raise IntegrityError(f"{path}: vocabulary hash mismatch "
                             f"({header['vocab_hash'][:12]} vs {expected_vocab_hash[:12]})")
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    for spec in header["params"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        params[spec["name"]] = arr.reshape(spec["shape"]).astype(np.float64)
        off += 8 * count
    if off != len(raw):
        raise DataError(f"{path}: {len(raw) - off} trailing bytes after the parameter payload")
    return header, params


def load_into(model, params: "OrderedDict[str, np.ndarray]"):
    """Copy arrays into ``model.params`` in place, checking names and shapes."""
    if list(params) != list(model.params):
        raise IntegrityError("checkpoint parameter names do not match the model")
    for name, arr in params.items():
        if model.params[name].shape != arr.shape:
            raise IntegrityError(f"parameter {name}: shape {arr.shape} != {model.params[name].shape}")
        model.params[name].data[...] = arr
