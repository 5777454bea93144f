"""Attribution maps: normalization, the PIBM map file format, and PGM
heatmap rendering."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .synthdata import MagicMismatch, TruncatedPayload, VersionMismatch

MAP_MAGIC = b"PIBM"
MAP_VERSION = 1


def normalize_map(values):
    """Min-max normalize to [0,1]; a flat map becomes all 0.5."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.full(values.shape, 0.5)
    return (values - lo) / (hi - lo)


@dataclass
class AttributionMap:
    values: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    @classmethod
    def from_raw(cls, raw, **provenance):
        return cls(normalize_map(raw), dict(provenance))


def write_map(amap, path):
    vals = np.ascontiguousarray(amap.values, dtype="<f4")
    prov = json.dumps(amap.provenance, sort_keys=True).encode()
    parts = [MAP_MAGIC, struct.pack("<H", MAP_VERSION),
             struct.pack("<I", vals.ndim),
             struct.pack(f"<{vals.ndim}I", *vals.shape),
             vals.tobytes(),
             struct.pack("<I", len(prov)), prov]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_map(path, validate_range=True):
    with open(path, "rb") as fh:
        buf = fh.read()

    def take(off, k):
        if off + k > len(buf):
            raise TruncatedPayload("map file truncated")
        return buf[off:off + k], off + k

    raw, off = take(0, 4)
    if raw != MAP_MAGIC:
        raise MagicMismatch(f"bad magic {raw!r}")
    raw, off = take(off, 2)
    if struct.unpack("<H", raw)[0] != MAP_VERSION:
        raise VersionMismatch("unsupported map version")
    raw, off = take(off, 4)
    rank = struct.unpack("<I", raw)[0]
    raw, off = take(off, 4 * rank)
    shape = struct.unpack(f"<{rank}I", raw)
    count = int(np.prod(shape)) if rank else 1
    raw, off = take(off, 4 * count)
    values = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    raw, off = take(off, 4)
    plen = struct.unpack("<I", raw)[0]
    raw, off = take(off, plen)
    provenance = json.loads(raw.decode())
    if validate_range and (values.min() < 0.0 or values.max() > 1.0):
        raise ValueError("map values outside the normalized [0,1] range")
    return AttributionMap(values, provenance)


def render_heatmap(amap, path, scale=1):
    """Write a binary PGM (P5) grayscale heatmap, nearest-neighbor upscaled."""
    values = amap.values if isinstance(amap, AttributionMap) else np.asarray(amap)
    if values.ndim != 2:
        raise ValueError("heatmap rendering requires a 2-D map")
    pix = np.round(255.0 * values).clip(0, 255).astype(np.uint8)
    pix = np.repeat(np.repeat(pix, scale, axis=0), scale, axis=1)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(pix.tobytes())
