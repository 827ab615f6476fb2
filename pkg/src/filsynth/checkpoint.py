"""Binary tensor container used for checkpoints, feature-net weights and caches.

Layout (all integers little-endian uint32)::

    b"FSTC" | version | header_len | header (UTF-8 JSON) | count |
    count x (name_len | name | rank | dims... | float32 LE data, row-major)

The JSON header carries the format version, a config echo and the RNG
stream position. Serialization is byte-deterministic for equal inputs.
"""

import json
import os
import struct

import numpy as np

MAGIC = b"FSTC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors, header=None):
    head = dict(header or {})
    head["format_version"] = VERSION
    hbytes = json.dumps(head, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(hbytes)), hbytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would make 0-d arrays 1-d
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf):
    """Return ``(header, tensors)``; raises :class:`CheckpointError` on corrupt input."""
    try:
        if buf[:4] != MAGIC:
            raise CheckpointError("not a tensor container (bad magic)")
        version, hlen = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported container version {version}")
        pos = 12
        header = json.loads(buf[pos:pos + hlen].decode())
        pos += hlen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode()
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            shape = struct.unpack_from(f"<{rank}I", buf, pos + 4)
            pos += 4 + 4 * rank
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * n > len(buf):
                raise CheckpointError(f"truncated data for tensor {name!r}")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).astype(np.float32).reshape(shape)
            pos += 4 * n
        if pos != len(buf):
            raise CheckpointError("trailing bytes after last tensor")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt container: {exc}") from exc
    return header, tensors


def save(path, tensors, header=None):
    data = dumps(tensors, header)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    return loads(buf)
