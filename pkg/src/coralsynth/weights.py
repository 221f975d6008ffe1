"""Binary weight container: writer, strict loader, and seeded random init.

File layout (all integers little-endian):

    magic            4 bytes, b"DGCW"
    version          uint32 (this module reads exactly version 1)
    preproc means    3 x float64
    entry count      uint32
    per entry:
        name length  uint16
        name         utf-8 bytes
        ndim         uint8
        dims         uint32 each
        dtype code   uint8 (0 = float32)
        payload      row-major little-endian values

Entries are written in network layer order, kernel ("<layer>.w") before bias
("<layer>.b"), so write(load(f)) reproduces f byte for byte.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .net import NetworkSpec

__all__ = [
    "MAGIC",
    "VERSION",
    "WeightFormatError",
    "write_weights",
    "load_weights",
    "random_weights",
]

MAGIC = b"DGCW"
VERSION = 1
DTYPE_F32 = 0


class WeightFormatError(Exception):
    """The file does not follow the weight container layout."""


def write_weights(net: NetworkSpec, path) -> None:
    """Serialize a network's conv parameters in canonical entry order."""
    if net.weights is None:
        raise ValueError("network has no weights attached")
    means = net.preproc_means if net.preproc_means is not None else (0.0, 0.0, 0.0)
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    buf += struct.pack("<3d", *means)
    plan = net.channel_plan()
    buf += struct.pack("<I", 2 * len(plan))
    for name, _, _ in plan:
        kernel, bias = net.weights[name]
        for suffix, arr in ((".w", kernel), (".b", bias)):
            encoded = (name + suffix).encode("utf-8")
            arr32 = np.ascontiguousarray(arr, dtype="<f4")
            buf += struct.pack("<H", len(encoded))
            buf += encoded
            buf += struct.pack("<B", arr32.ndim)
            buf += struct.pack(f"<{arr32.ndim}I", *arr32.shape)
            buf += struct.pack("<B", DTYPE_F32)
            buf += arr32.tobytes()
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightFormatError(f"truncated file while reading {what}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_weights(path, spec: NetworkSpec) -> NetworkSpec:
    """Read a weight file and attach it to the given architecture.

    Validation is strict: bad magic, an unexpected version, a missing,
    duplicate, extra or mis-shaped entry, or trailing bytes all raise
    WeightFormatError naming the problem. No partially loaded network is
    ever returned.
    """
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise WeightFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise WeightFormatError(f"unsupported version {version}, expected {VERSION}")
    means = r.unpack("<3d", "preproc means")
    (count,) = r.unpack("<I", "entry count")

    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "entry name length")
        raw = r.take(name_len, "entry name")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise WeightFormatError(f"entry name {raw!r} is not valid utf-8") from None
        (ndim,) = r.unpack("<B", f"dims of {name!r}")
        dims = r.unpack(f"<{ndim}I", f"dims of {name!r}") if ndim else ()
        (dtype_code,) = r.unpack("<B", f"dtype of {name!r}")
        if dtype_code != DTYPE_F32:
            raise WeightFormatError(f"entry {name!r} has unknown dtype code {dtype_code}")
        n_values = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = r.take(4 * n_values, f"payload of {name!r}")
        if name in entries:
            raise WeightFormatError(f"duplicate entry {name!r}")
        entries[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if r.pos != len(r.data):
        raise WeightFormatError(f"{len(r.data) - r.pos} trailing bytes after last entry")

    weights: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for name, cin, cout in spec.channel_plan():
        pair = []
        for suffix, want in ((".w", (cout, cin, 3, 3)), (".b", (cout,))):
            key = name + suffix
            if key not in entries:
                raise WeightFormatError(f"missing entry {key!r}")
            arr = entries.pop(key)
            if arr.shape != want:
                raise WeightFormatError(
                    f"entry {key!r} has dims {arr.shape}, expected {want}"
                )
            pair.append(arr)
        weights[name] = (pair[0], pair[1])
    if entries:
        raise WeightFormatError(f"unexpected entry {sorted(entries)[0]!r}")
    return spec.with_weights(weights, preproc_means=means)


def random_weights(spec: NetworkSpec, seed: int = 0, rule: str = "fan-in") -> NetworkSpec:
    """Seeded random conv parameters for testing.

    Kernels are drawn N(0, 2 / (in_channels * 9)) (fan-in scaling, so
    activation magnitudes stay stable with depth); biases are zero.
    """
    if rule != "fan-in":
        raise ValueError(f"unknown scale rule {rule!r}")
    rng = np.random.default_rng(seed)
    weights = {}
    for name, cin, cout in spec.channel_plan():
        std = np.sqrt(2.0 / (cin * 9))
        kernel = rng.normal(0.0, std, size=(cout, cin, 3, 3)).astype(np.float32)
        bias = np.zeros(cout, dtype=np.float32)
        weights[name] = (kernel, bias)
    return spec.with_weights(weights, preproc_means=(0.0, 0.0, 0.0))
