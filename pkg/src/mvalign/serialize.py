"""Named float64 array containers.

Binary layout, all little-endian::

    b"MVAW"  u32 version  u32 entry_count
    per entry:
        u32 name_len  name bytes (utf-8)  u32 rank  u64 dims[rank]  f64 payload (row-major)

The JSON mirror holds the same entries as ``{"name", "shape", "data"}``
objects and is meant for inspection, not speed.
"""
import json
import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"MVAW"
VERSION = 1


class FormatError(ValueError):
    pass


def dumps(entries):
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf):
    if buf[:4] != MAGIC:
        raise FormatError("not an MVAW container")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported MVAW version {version}")
    off = 12
    out = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = bytes(buf[off:off + nlen]).decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            n = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 8 * n
            out[name] = arr
    except (struct.error, ValueError) as exc:
        raise FormatError("truncated MVAW container") from exc
    if off != len(buf):
        raise FormatError("trailing bytes after last entry")
    return out


def save(path, entries):
    with open(path, "wb") as fh:
        fh.write(dumps(entries))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def save_json(path, entries):
    doc = {
        "format": "MVAW",
        "version": VERSION,
        "entries": [
            {"name": k, "shape": list(np.shape(v)), "data": np.asarray(v, dtype=np.float64).ravel().tolist()}
            for k, v in entries.items()
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_json(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "MVAW":
        raise FormatError("not an MVAW json mirror")
    return OrderedDict((e["name"], np.array(e["data"], dtype=np.float64).reshape(e["shape"])) for e in doc["entries"])


def save_heatmaps(path, maps):
    """Dump a (N, H, W) stack as entries ``heatmap/<index>``."""
    save(path, OrderedDict((f"heatmap/{i}", m) for i, m in enumerate(np.asarray(maps))))


def load_heatmaps(path):
    entries = load(path)
    idx = sorted(int(k.split("/", 1)[1]) for k in entries if k.startswith("heatmap/"))
    return np.stack([entries[f"heatmap/{i}"] for i in idx]) if idx else np.zeros((0, 0, 0))
