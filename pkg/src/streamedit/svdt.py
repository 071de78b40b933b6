"""SVDT binary tensor containers and the named-tensor checkpoint layout.

A single record is: magic b"SVDT", version u32, rank u32, dims u32[rank],
payload of little-endian float32 in row-major order. Checkpoints and bank
snapshots are a u32-length-prefixed JSON index (name -> offset/shape/
trainable) followed by the concatenated records; offsets are relative to
the blob start. Everything round-trips bit-exactly.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"SVDT"
VERSION = 1


class MalformedFileError(ValueError):
    """Corrupt or truncated container; message carries the byte offset."""


def tensor_to_bytes(arr):
    arr = np.asarray(arr, dtype=np.float32)
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + arr.astype("<f4", order="C").tobytes()


def tensor_from_bytes(buf, offset=0):
    """Decode one record at ``offset``; returns (array, next_offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise MalformedFileError(f"bad magic at offset {offset}")
    pos = offset + 4
    if len(buf) < pos + 8:
        raise MalformedFileError(f"truncated header at offset {pos}")
    version, rank = struct.unpack_from("<II", buf, pos)
    if version != VERSION:
        raise MalformedFileError(f"unsupported version {version} at offset {pos}")
    pos += 8
    if len(buf) < pos + 4 * rank:
        raise MalformedFileError(f"truncated dims at offset {pos}")
    dims = struct.unpack_from(f"<{rank}I", buf, pos) if rank else ()
    pos += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    nbytes = 4 * count
    if len(buf) < pos + nbytes:
        raise MalformedFileError(f"truncated payload at offset {pos}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims)
    return arr.astype(np.float32), pos + nbytes


def write_tensor(path, arr):
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(arr))


def read_tensor(path):
    with open(path, "rb") as f:
        buf = f.read()
    arr, end = tensor_from_bytes(buf, 0)
    if end != len(buf):
        raise MalformedFileError(f"trailing bytes at offset {end}")
    return arr


def write_named_tensors(path, tensors, trainable=None, header_extra=None):
    """Write an ordered name->array mapping with a JSON index header.

    ``trainable`` optionally maps names to bools (default True);
    ``header_extra`` is merged into the JSON header under "meta".
    """
    blob = bytearray()
    index = {}
    for name, arr in tensors.items():
        rec = tensor_to_bytes(arr)
        index[name] = {
            "offset": len(blob),
            "shape": list(np.asarray(arr).shape),
            "trainable": bool(trainable.get(name, True)) if trainable else True,
        }
        blob.extend(rec)
    header = {"format": "svdt-index", "version": VERSION, "index": index}
    if header_extra:
        header["meta"] = header_extra
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        f.write(bytes(blob))


def read_named_tensors(path):
    """Returns (ordered name->array dict, header dict)."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 4:
        raise MalformedFileError("truncated length prefix at offset 0")
    (hlen,) = struct.unpack_from("<I", buf, 0)
    if len(buf) < 4 + hlen:
        raise MalformedFileError("truncated header at offset 4")
    try:
        header = json.loads(buf[4:4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedFileError(f"bad JSON header: {e}") from e
    if header.get("format") != "svdt-index":
        raise MalformedFileError("missing svdt-index format marker")
    base = 4 + hlen
    out = {}
    items = sorted(header["index"].items(), key=lambda kv: kv[1]["offset"])
    for name, entry in items:
        arr, _ = tensor_from_bytes(buf, base + entry["offset"])
        if list(arr.shape) != list(entry["shape"]):
            raise MalformedFileError(
                f"shape mismatch for {name} at offset {base + entry['offset']}")
        out[name] = arr
    return out, header
