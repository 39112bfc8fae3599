"""HJRS binary files for value functions, key=value sidecars and content-hashed names.

Layout (little-endian):
    magic "HJRS", version u32, dim_count u32,
    per dim {min f64, max f64, node_count u32, periodic u8},
    frame_count u32, per frame {time f64, data f64 x N (row-major)}.
A static ValueFunction is one frame at time 0.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from reachguard.grid import Grid, TimeIndexedValueFunction, ValueFunction

MAGIC = b"HJRS"
VERSION = 1


class CacheFormatError(ValueError):
    pass


def encode(tv: TimeIndexedValueFunction | ValueFunction) -> bytes:
    if isinstance(tv, ValueFunction):
        tv = TimeIndexedValueFunction.constant(tv)
    g = tv.grid
    parts = [MAGIC, struct.pack("<II", VERSION, g.ndim)]
    for lo, hi, n, per in zip(g.mins, g.maxs, g.node_counts, g.periodic):
        parts.append(struct.pack("<ddIB", lo, hi, n, int(per)))
    parts.append(struct.pack("<I", len(tv)))
    for t, frame in zip(tv.times, tv.data):
        parts.append(struct.pack("<d", float(t)))
        parts.append(np.ascontiguousarray(frame, dtype="<f8").tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> TimeIndexedValueFunction:
    try:
        return _decode(buf)
    except (struct.error, ValueError) as err:
        if isinstance(err, CacheFormatError):
            raise
        raise CacheFormatError(f"malformed file: {err}") from err


def _decode(buf: bytes) -> TimeIndexedValueFunction:
    if buf[:4] != MAGIC:
        raise CacheFormatError("bad magic")
    version, ndim = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CacheFormatError(f"unsupported version {version}")
    off = 12
    mins, maxs, counts, periodic = [], [], [], []
    for _ in range(ndim):
        lo, hi, n, per = struct.unpack_from("<ddIB", buf, off)
        off += struct.calcsize("<ddIB")
        mins.append(lo)
        maxs.append(hi)
        counts.append(n)
        periodic.append(bool(per))
    grid = Grid(tuple(mins), tuple(maxs), tuple(counts), tuple(periodic))
    (frames,) = struct.unpack_from("<I", buf, off)
    off += 4
    times, data = [], []
    for _ in range(frames):
        (t,) = struct.unpack_from("<d", buf, off)
        off += 8
        arr = np.frombuffer(buf, dtype="<f8", count=grid.size, offset=off)
        off += 8 * grid.size
        times.append(t)
        data.append(arr.reshape(grid.shape))
    if off != len(buf):
        raise CacheFormatError(f"{len(buf) - off} trailing bytes")
    return TimeIndexedValueFunction(grid, np.array(times), np.stack(data).astype(float))


def write(path, tv, meta: dict | None = None) -> Path:
    """Write an HJRS file atomically, plus ``<path>.meta`` when ``meta`` is given."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(tv))
    tmp.replace(path)
    if meta is not None:
        lines = "".join(f"{k}={meta[k]}\n" for k in sorted(meta))
        Path(str(path) + ".meta").write_text(lines)
    return path


def read(path) -> TimeIndexedValueFunction:
    return decode(Path(path).read_bytes())


def read_meta(path) -> dict:
    meta = {}
    for line in Path(str(path) + ".meta").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k] = v
    return meta


def content_key(**parts) -> str:
    """Short stable hash of JSON-serialisable build inputs."""
    blob = json.dumps(parts, sort_keys=True, default=_jsonable)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _jsonable(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return {k: getattr(obj, k) for k in obj.__dataclass_fields__ if not k.startswith("_")}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if callable(obj):
        return getattr(obj, "__name__", repr(obj))
    raise TypeError(f"cannot hash {type(obj).__name__}")
