"""Single-file binary checkpoints and batch caches.

Layout (little-endian)::

    magic      8 bytes  b"RDCKPT01"
    version    u32
    header_len u32, header: UTF-8 JSON (format version, kind, ModelConfig, vocab, ...)
    n_records  u32
    record*    u32 name_len, name (UTF-8), u8 dtype code ('f' = f64, 'i' = i64),
               u32 ndim, u64 dims[ndim], row-major data
    sha256     32 bytes over everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .data import DistillBatch, Vocabulary
from .eval import HeadSpec, TaskHead, TaskModel
from .model import Encoder, ModelConfig, Module, RecursiveStudent, TeacherModel

MAGIC = b"RDCKPT01"
FORMAT_VERSION = 1
_DTYPES = {b"f": np.dtype("<f8"), b"i": np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


def _pack(header: dict, records: list[tuple[str, np.ndarray]]) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(head)), head, struct.pack("<I", len(records))]
    for name, arr in records:
        code = b"i" if np.issubdtype(arr.dtype, np.integer) else b"f"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, code, struct.pack("<I", data.ndim)]
        parts += [struct.pack(f"<{data.ndim}Q", *data.shape), data.tobytes()]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def _unpack(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < len(MAGIC) + 32 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (file is corrupt or truncated)")
    try:
        pos = len(MAGIC)
        (version,) = struct.unpack_from("<I", body, pos)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format version {version}")
        (hlen,) = struct.unpack_from("<I", body, pos + 4)
        pos += 8
        header = json.loads(body[pos : pos + hlen].decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        records = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            dtype = _DTYPES[body[pos : pos + 1]]
            (ndim,) = struct.unpack_from("<I", body, pos + 1)
            pos += 5
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(body):
                raise CheckpointError(f"record {name!r} runs past the end of the file")
            records[name] = np.frombuffer(body, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
        if pos != len(body):
            raise CheckpointError("trailing bytes after the last record")
    except CheckpointError:
        raise
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    return header, records


def save_checkpoint(path, model: Module, vocab: Vocabulary | None = None, meta: dict | None = None) -> None:
    header = {"format_version": FORMAT_VERSION, "meta": meta or {}}
    if isinstance(model, TaskModel):
        encoder = model.encoder
        spec = model.head.spec
        header["kind"] = "task"
        header["head"] = {"kind": spec.kind, "num_labels": spec.num_labels, "dropout_prob": spec.dropout_prob, "label_names": list(spec.label_names)}
    else:
        encoder = model
        header["kind"] = encoder.kind
    header["encoder_kind"] = encoder.kind
    header["config"] = encoder.config.to_dict()
    header["has_adapters"] = encoder.has_adapters
    if vocab is not None:
        header["vocab"] = vocab.tokens
        header["vocab_mode"] = vocab.mode
    records = [(name, p.data) for name, p in model.named_parameters()]
    Path(path).write_bytes(_pack(header, records))


def _build_encoder(kind: str, config: ModelConfig, has_adapters: bool) -> Encoder:
    if kind == "teacher":
        return TeacherModel(config, None, with_adapters=has_adapters)
    if kind == "student":
        return RecursiveStudent(config, None)
    raise CheckpointError(f"unknown encoder kind {kind!r}")


def load_checkpoint(path) -> tuple[Module, dict]:
    """Returns ``(model, header)``; the vocabulary (if stored) is ``header_vocab(header)``."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    header, records = _unpack(blob)
    try:
        config = ModelConfig.from_dict(header["config"])
        encoder = _build_encoder(header["encoder_kind"], config, header.get("has_adapters", False))
        if header["kind"] == "task":
            h = header["head"]
            spec = HeadSpec(h["kind"], h["num_labels"], h["dropout_prob"], tuple(h.get("label_names", ())))
            model: Module = TaskModel(encoder, TaskHead(spec, config.hidden_dim, None, dtype=config.np_dtype))
        else:
            model = encoder
        model.load_state_dict(records)
    except CheckpointError:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"checkpoint content does not describe a model: {exc}") from exc
    return model, header


def header_vocab(header: dict) -> Vocabulary | None:
    if "vocab" not in header:
        return None
    return Vocabulary(header["vocab"], header.get("vocab_mode", "word"))


def save_batch_cache(path, batches: list[DistillBatch], meta: dict | None = None) -> None:
    records = []
    for i, b in enumerate(batches):
        for key in ("x", "y", "w", "valid"):
            records.append((f"{i}.{key}", np.asarray(getattr(b, key), dtype=np.int64)))
    header = {"format_version": FORMAT_VERSION, "kind": "batch_cache", "count": len(batches), "meta": meta or {}}
    Path(path).write_bytes(_pack(header, records))


def load_batch_cache(path) -> list[DistillBatch]:
    header, records = _unpack(Path(path).read_bytes())
    if header.get("kind") != "batch_cache":
        raise CheckpointError("file is not a batch cache")
    out = []
    for i in range(header["count"]):
        x, y, w, valid = (records[f"{i}.{k}"] for k in ("x", "y", "w", "valid"))
        out.append(DistillBatch(x, y, w, valid.astype(bool)))
    return out
