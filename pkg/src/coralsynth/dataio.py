"""Image I/O, pixel preprocessing, and the labeled dataset manifest.

Images travel through the engine as (1, 3, h, w) float tensors in RGB order
on the 0-255 scale. Preprocessing subtracts per-channel means (recorded in
the weight file, so the engine and its weights never disagree) and applies
an optional global scale. The manifest is a line-delimited JSON file mapping
each generated image back to its content source, style source, label, and
the run parameters that produced it.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "PreprocSpec",
    "ManifestRecord",
    "ManifestError",
    "ManifestWriter",
    "load_image",
    "save_image",
    "preprocess",
    "deprocess",
    "write_manifest",
    "read_manifest",
]

CHANNEL_ORDERS = ("rgb", "bgr")


@dataclass(frozen=True)
class PreprocSpec:
    """Per-channel mean subtraction, channel order, and a global scale.

    Means are expressed in the declared channel order on the 0-255 scale.
    The no-op spec (zero means, rgb, scale 1) suits random weights.
    """

    channel_means: tuple[float, float, float] = (0.0, 0.0, 0.0)
    channel_order: str = "rgb"
    scale: float = 1.0

    def __post_init__(self):
        if self.channel_order not in CHANNEL_ORDERS:
            raise ValueError(f"unknown channel_order {self.channel_order!r}")
        if len(self.channel_means) != 3:
            raise ValueError("channel_means needs exactly 3 values")
        if self.scale == 0:
            raise ValueError("scale must be nonzero")


def load_image(path) -> np.ndarray:
    """Decode an RGB image file to a (1, 3, h, w) float32 tensor in 0..255.

    Raises OSError for unreadable or undecodable files and ValueError for
    images that are not 3-channel RGB.
    """
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise ValueError(f"{path}: expected 3-channel RGB, got mode {im.mode!r}")
        arr = np.asarray(im, dtype=np.float32)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))[None]


def save_image(tensor: np.ndarray, path) -> None:
    """Write a (1, 3, h, w) tensor as an 8-bit RGB image file.

    Values are clamped to [0, 255] and rounded half-away-from-zero. Use a
    lossless container (PNG) when byte-exact reload matters.
    """
    if tensor.ndim != 4 or tensor.shape[0] != 1 or tensor.shape[1] != 3:
        raise ValueError(f"expected image dims (1, 3, h, w), got {tensor.shape}")
    clipped = np.clip(tensor[0].astype(np.float64), 0.0, 255.0)
    pixels = np.floor(clipped + 0.5).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(pixels, mode="RGB").save(path)


def _ordered(image: np.ndarray, order: str) -> np.ndarray:
    # loader output is rgb; flip to the declared order when they differ
    return image if order == "rgb" else image[:, ::-1]


def preprocess(image: np.ndarray, spec: PreprocSpec) -> np.ndarray:
    """Map a loaded 0..255 RGB tensor to network input space."""
    means = np.asarray(spec.channel_means, dtype=np.float64).reshape(1, 3, 1, 1)
    out = (_ordered(image, spec.channel_order).astype(np.float64) - means) * spec.scale
    return out.astype(np.float32)


def deprocess(image: np.ndarray, spec: PreprocSpec) -> np.ndarray:
    """Inverse of preprocess: back to a 0..255 RGB tensor (unclamped)."""
    means = np.asarray(spec.channel_means, dtype=np.float64).reshape(1, 3, 1, 1)
    out = image.astype(np.float64) / spec.scale + means
    return _ordered(out, spec.channel_order).astype(np.float32)


class ManifestError(Exception):
    """Malformed manifest content; the message carries the line number."""


@dataclass(frozen=True)
class ManifestRecord:
    """One generated image: where it came from and how it was made.

    The label is inherited from the content image, never the style. The
    layer maps are optional and recorded by the CLI for reproducibility.
    """

    output_path: str
    content_path: str
    style_path: str
    label: str
    lam: float
    seed: int
    iterations: int
    final_feat: float
    final_coral: float
    feat_layers: dict[str, float] | None = None
    coral_layers: dict[str, float] | None = None


_CORE_FIELDS = {
    "output_path": str,
    "content_path": str,
    "style_path": str,
    "label": str,
    "lambda": (int, float),
    "seed": int,
    "iterations": int,
    "final_feat": (int, float),
    "final_coral": (int, float),
}
_LAYER_FIELDS = ("feat_layers", "coral_layers")


def _record_to_obj(record: ManifestRecord) -> dict:
    obj = {
        "output_path": record.output_path,
        "content_path": record.content_path,
        "style_path": record.style_path,
        "label": record.label,
        "lambda": record.lam,
        "seed": record.seed,
        "iterations": record.iterations,
        "final_feat": record.final_feat,
        "final_coral": record.final_coral,
    }
    if record.feat_layers is not None:
        obj["feat_layers"] = record.feat_layers
    if record.coral_layers is not None:
        obj["coral_layers"] = record.coral_layers
    return obj


def _obj_to_record(obj: dict, lineno: int) -> ManifestRecord:
    if not isinstance(obj, dict):
        raise ManifestError(f"line {lineno}: expected an object, got {type(obj).__name__}")
    unknown = set(obj) - set(_CORE_FIELDS) - set(_LAYER_FIELDS)
    if unknown:
        raise ManifestError(f"line {lineno}: unknown field {sorted(unknown)[0]!r}")
    kwargs = {}
    for key, types in _CORE_FIELDS.items():
        if key not in obj:
            raise ManifestError(f"line {lineno}: missing field {key!r}")
        value = obj[key]
        if not isinstance(value, types) or isinstance(value, bool):
            raise ManifestError(f"line {lineno}: field {key!r} has wrong type")
        kwargs["lam" if key == "lambda" else key] = value
    for key in _LAYER_FIELDS:
        value = obj.get(key)
        if value is not None and (
            not isinstance(value, dict)
            or any(
                not isinstance(k, str) or isinstance(v, bool)
                or not isinstance(v, (int, float))
                for k, v in value.items()
            )
        ):
            raise ManifestError(f"line {lineno}: field {key!r} has wrong type")
        kwargs[key] = value
    kwargs["lam"] = float(kwargs["lam"])
    kwargs["final_feat"] = float(kwargs["final_feat"])
    kwargs["final_coral"] = float(kwargs["final_coral"])
    return ManifestRecord(**kwargs)


def _record_line(record: ManifestRecord) -> str:
    return json.dumps(_record_to_obj(record), sort_keys=True)


def write_manifest(records, path) -> None:
    """Write records as one JSON object per line, replacing the file."""
    lines = [_record_line(r) for r in records]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_manifest(path) -> list[ManifestRecord]:
    """Parse a manifest file; malformed lines report their line number."""
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"line {lineno}: invalid JSON ({e.msg})") from None
            records.append(_obj_to_record(obj, lineno))
    return records


class ManifestWriter:
    """Serialized appender for concurrent batch runs.

    Appends verify that every path the record references exists, keeping the
    manifest's exists-at-write-time guarantee.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, record: ManifestRecord, verify: bool = True) -> None:
        if verify:
            for p in (record.output_path, record.content_path, record.style_path):
                if not Path(p).exists():
                    raise FileNotFoundError(f"manifest record references missing path {p!r}")
        line = _record_line(record)
        with self._lock, open(self.path, "a") as f:
            f.write(line + "\n")
