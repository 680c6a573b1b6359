"""Versioned binary weight container.

Layout, all integers little-endian::

    magic      8 bytes  b"HRFAWTS\\0"
    version    uint32
    meta_len   uint32, followed by that many bytes of UTF-8 JSON
    count      uint32
    count records of:
        path_len uint16, path (UTF-8)
        dtype    uint8   (see DTYPE_TAGS)
        rank     uint8
        extents  rank x uint32
        payload  prod(extents) little-endian values

The JSON metadata carries the network kind and constructor config so a
file can be loaded without knowing what it holds.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from hrfa.autodiff import Tensor

MAGIC = b"HRFAWTS\0"
FORMAT_VERSION = 1
DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAG_OF = {v: k for k, v in DTYPE_TAGS.items()}


class WeightFormatError(ValueError):
    pass


def encode(tensors, meta=None):
    """Serialise a name -> array mapping (insertion order kept) to bytes."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(struct.pack("<II", FORMAT_VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for path, arr in tensors.items():
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _TAG_OF:
            raise WeightFormatError(f"unsupported dtype {arr.dtype} for {path}")
        name = path.encode()
        buf.write(struct.pack("<H", len(name)))
        buf.write(name)
        buf.write(struct.pack("<BB", _TAG_OF[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


def decode(blob):
    """Inverse of :func:`encode`; returns ``(tensors, meta)``."""
    view = memoryview(blob)
    if bytes(view[:8]) != MAGIC:
        raise WeightFormatError("not a weight file (bad magic)")
    version, meta_len = struct.unpack_from("<II", view, 8)
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"unsupported format version {version}")
    pos = 16
    meta = json.loads(bytes(view[pos:pos + meta_len]).decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + name_len]).decode()
        pos += name_len
        tag, rank = struct.unpack_from("<BB", view, pos)
        pos += 2
        if tag not in DTYPE_TAGS:
            raise WeightFormatError(f"unknown dtype tag {tag} for {name}")
        shape = struct.unpack_from(f"<{rank}I", view, pos)
        pos += 4 * rank
        dt = DTYPE_TAGS[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(view):
            raise WeightFormatError(f"truncated payload for {name}")
        tensors[name] = np.frombuffer(view[pos:pos + nbytes], dtype=dt).reshape(shape).copy()
        pos += nbytes
    if pos != len(view):
        raise WeightFormatError("trailing bytes after last record")
    return tensors, meta


def save_network(net, path, extra=None):
    meta = {"kind": net.kind, "config": net.config}
    if extra:
        meta["extra"] = extra
    Path(path).write_bytes(encode(net.params, meta))


def load_network(path):
    """Rebuild a network from its weight file; returns ``(net, extra_meta)``."""
    from hrfa.models.networks import NETWORKS

    tensors, meta = decode(Path(path).read_bytes())
    kind = meta.get("kind")
    if kind not in NETWORKS:
        raise WeightFormatError(f"{path}: unknown network kind {kind!r}")
    net = NETWORKS[kind](**meta["config"])
    if set(tensors) != set(net.params):
        raise WeightFormatError(f"{path}: parameter names do not match a {kind}")
    for name, arr in tensors.items():
        if arr.shape != net.params[name].shape:
            raise WeightFormatError(f"{path}: {name} has shape {arr.shape}, "
                                    f"expected {net.params[name].shape}")
        net.params[name] = Tensor(arr)
    return net, meta.get("extra", {})
