"""Binary tensor container used for weights and exported feature pairs.

Layout::

    0..3    magic b"MSRW"
    4..7    format version, u32 little-endian (1)
    8..15   header length in bytes, u64 little-endian
    16..    UTF-8 JSON header: {name: {"shape": [...], "offset": n, "dtype": "f32"}}
    ...     float32 little-endian payloads at their absolute file offsets,
            each offset a multiple of 64, zero bytes in between
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError, IOFailure
from .model import Model, ModelConfig, build
from .tensor import Tensor

MAGIC = b"MSRW"
VERSION = 1
ALIGN = 64
_PREFIX = struct.Struct("<4sIQ")


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def write_container(path, tensors: Mapping[str, np.ndarray | Tensor]) -> None:
    arrays = {k: np.asarray(v.data if isinstance(v, Tensor) else v, dtype="<f4") for k, v in tensors.items()}
    names = sorted(arrays)
    # offsets depend on the header length, which depends on the offsets; iterate to a fixed point
    header_len = 0
    while True:
        offset = _align(_PREFIX.size + header_len)
        entries = {}
        for name in names:
            entries[name] = {"shape": list(arrays[name].shape), "offset": offset, "dtype": "f32"}
            offset = _align(offset + arrays[name].nbytes)
        header = json.dumps(entries, sort_keys=True, separators=(",", ":")).encode("utf-8")
        if len(header) == header_len:
            break
        header_len = len(header)

    buf = bytearray(_PREFIX.pack(MAGIC, VERSION, len(header)))
    buf += header
    for name in names:
        off = entries[name]["offset"]
        buf += b"\0" * (off - len(buf))
        buf += arrays[name].tobytes(order="C")
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(bytes(buf))
        os.replace(tmp, path)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def read_container(path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    if len(blob) < _PREFIX.size:
        raise FormatError(f"{path}: truncated before header")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    end = _PREFIX.size + header_len
    if end > len(blob):
        raise FormatError(f"{path}: truncated inside header")
    try:
        header = json.loads(blob[_PREFIX.size : end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header is not an object")

    out = {}
    for name in sorted(header):
        meta = header[name]
        try:
            shape = tuple(int(d) for d in meta["shape"])
            offset = int(meta["offset"])
            dtype = meta["dtype"]
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"{path}: malformed entry {name!r}") from None
        if dtype != "f32":
            raise FormatError(f"{path}: entry {name!r} has unsupported dtype {dtype!r}")
        if offset % ALIGN or offset < end:
            raise FormatError(f"{path}: entry {name!r} has misaligned offset {offset}")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(blob):
            raise FormatError(f"{path}: truncated payload for {name!r}")
        out[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape).astype(np.float32)
    return out


def save_weights(model: Model, path) -> None:
    write_container(path, model.registry())


def load_weights(path, config: ModelConfig) -> Model:
    """Build a model for ``config`` and fill it from a weight container.

    Names and shapes must match the config's registry exactly.
    """
    stored = read_container(path)
    model = build(config, seed=0, dtype=np.float32)
    reg = model.registry()
    for name in reg:
        if name not in stored:
            raise FormatError(f"{path}: missing entry {name}")
        if stored[name].shape != reg[name].shape:
            raise FormatError(
                f"{path}: entry {name} has shape {list(stored[name].shape)}, config expects {list(reg[name].shape)}"
            )
    extra = sorted(set(stored) - set(reg))
    if extra:
        raise FormatError(f"{path}: unexpected entry {extra[0]}")
    model.assign({n: Tensor(stored[n], requires_grad=n not in model.buffers) for n in reg})
    return model


def export_feature_pairs(path, records) -> None:
    """Write ``(F1, F2, label)`` records as entries ``f1/<i>``, ``f2/<i>``, ``label/<i>``."""
    entries = {}
    for i, (f1, f2, label) in enumerate(records):
        entries[f"f1/{i}"] = f1.data if isinstance(f1, Tensor) else f1
        entries[f"f2/{i}"] = f2.data if isinstance(f2, Tensor) else f2
        entries[f"label/{i}"] = np.array([label], dtype=np.float32)
    write_container(path, entries)


def import_feature_pairs(path) -> list[tuple[Tensor, Tensor, int]]:
    stored = read_container(path)
    ids = sorted({int(k.split("/", 1)[1]) for k in stored if k.startswith("f1/")})
    records = []
    for i in ids:
        try:
            f1, f2, lab = stored[f"f1/{i}"], stored[f"f2/{i}"], stored[f"label/{i}"]
        except KeyError as exc:
            raise FormatError(f"{path}: record {i} is incomplete (missing {exc.args[0]})") from None
        if records and (f1.shape != records[0][0].shape or f2.shape != records[0][1].shape):
            raise FormatError(f"{path}: record {i} shapes differ from record {ids[0]}")
        if lab.size != 1 or lab[0] != int(lab[0]):
            raise FormatError(f"{path}: record {i} label is not an integer")
        records.append((Tensor(f1), Tensor(f2), int(lab[0])))
    return records
