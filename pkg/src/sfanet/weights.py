"""SFAW binary weights/checkpoint container.

Layout (all integers little-endian)::

    b"SFAW" | version u32 | record count u32
    records, each:
        name length u32 | UTF-8 name | dtype tag u8 | rank u32 | extents u32 * rank | payload
    CRC32 (u32) of every byte between the header and the CRC

The CRC is verified before any record is decoded, so a corrupted file
never yields a partial state.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"SFAW"
VERSION = 1

DTYPE_TAGS = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("u1"): 3,
    np.dtype("<i4"): 4,
}
TAG_DTYPES = {tag: dt for dt, tag in DTYPE_TAGS.items()}


class WeightsFileError(ValueError):
    """Malformed, truncated, or corrupted SFAW data."""


def encode(records: dict[str, np.ndarray]) -> bytes:
    body = bytearray()
    for name, arr in records.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|", "<", "=") else arr.dtype
        dt = np.dtype(dt.str.replace("=", "<"))
        if dt not in DTYPE_TAGS:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        body += struct.pack("<I", len(raw)) + raw
        body += struct.pack("<BI", DTYPE_TAGS[dt], arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += np.ascontiguousarray(arr, dtype=dt).tobytes()
    header = MAGIC + struct.pack("<II", VERSION, len(records))
    return header + bytes(body) + struct.pack("<I", zlib.crc32(body))


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise WeightsFileError("not an SFAW file (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise WeightsFileError(f"unsupported SFAW version {version}")
    body = buf[12:-4]
    (stored_crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(body) != stored_crc:
        raise WeightsFileError("CRC mismatch: weights file is corrupted")

    records: dict[str, np.ndarray] = {}
    pos = 0
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            tag, rank = struct.unpack_from("<BI", body, pos)
            pos += 5
            shape = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            dt = TAG_DTYPES[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(body):
                raise WeightsFileError(f"record {name!r} runs past the end of the file")
            records[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise WeightsFileError(f"malformed record table: {exc}") from exc
    if pos != len(body):
        raise WeightsFileError(f"{len(body) - pos} trailing bytes after {count} records")
    return records


def save(path, records: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(records))
    tmp.replace(path)


def load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# model checkpoints


def text_record(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def read_text_record(arr: np.ndarray):
    return json.loads(arr.tobytes().decode("utf-8"))


def checkpoint_records(model, state=None, extra_meta: dict | None = None) -> dict[str, np.ndarray]:
    from dataclasses import asdict

    records: dict[str, np.ndarray] = {}
    meta = {"model": asdict(model.config), "folded": bool(getattr(model, "folded", False))}
    meta.update(extra_meta or {})
    records["meta/info"] = text_record(meta)
    for name, p in model.named_parameters():
        records[f"param/{name}"] = p.data
    for name, b in model.named_buffers():
        records[f"buffer/{name}"] = b.data
    if state is not None:
        records["state/iteration"] = np.asarray(state.iteration, dtype=np.int64)
        for name, buf in state.optimizer.buffers.items():
            records[f"optim/momentum/{name}"] = buf
    return records


def save_checkpoint(path, model, state=None, extra_meta: dict | None = None) -> None:
    save(path, checkpoint_records(model, state, extra_meta))


def split_checkpoint(records: dict[str, np.ndarray]):
    """-> (meta dict, model state dict, iteration or None, momentum buffers)."""
    if "meta/info" not in records:
        raise WeightsFileError("checkpoint has no meta/info record")
    meta = read_text_record(records["meta/info"])
    state = {}
    momentum = {}
    iteration = None
    for key, arr in records.items():
        kind, _, name = key.partition("/")
        if kind in ("param", "buffer"):
            state[name] = arr
        elif key.startswith("optim/momentum/"):
            momentum[key[len("optim/momentum/"):]] = arr
        elif key == "state/iteration":
            iteration = int(arr)
    return meta, state, iteration, momentum


def restore_model(records: dict[str, np.ndarray]):
    """Rebuild a model from checkpoint records.

    -> (model, meta, iteration or None, momentum buffers). The model is
    constructed from the stored config, BN-folded first if the checkpoint
    was saved folded, and only then populated, so any mismatch raises
    before a partially loaded model exists.
    """
    from .network import SfanetConfig, SfanetModel, fold_batch_norm

    meta, state, iteration, momentum = split_checkpoint(records)
    try:
        config = SfanetConfig(**meta["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise WeightsFileError(f"checkpoint model config is invalid: {exc}") from exc
    model = SfanetModel(config)
    if meta.get("folded"):
        model = fold_batch_norm(model.eval())
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError, TypeError) as exc:
        raise WeightsFileError(f"checkpoint does not match its model config: {exc}") from exc
    return model, meta, iteration, momentum


def load_model(path):
    return restore_model(load(path))
