"""Export pretrained VGG-16 conv parameters into the engine's weight container.

The container stores 13 kernel/bias pairs plus three per-channel input means.
The zoo model normalizes inputs as (x/255 - mean) / std per channel; the
container has no per-channel scale slot, so the 1/(255*std) factor is folded
into the first conv's kernels, which computes the identical function:

    sum_c W[o,c] * ((x_c/255 - m_c) / s_c)  ==  sum_c (W[o,c] / (255 s_c)) * (x_c - 255 m_c)

All deeper layers are written untouched. The zoo's (out, in, kh, kw) row-major
kernel layout already matches the container's, so no axis conversion happens.
"""

from __future__ import annotations

import argparse
import hashlib
import struct
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

__all__ = ["ExportEntry", "ExportReport", "ExportError", "export", "main"]

MAGIC = b"DGCW"
VERSION = 1
DTYPE_F32 = 0

LAYER_NAMES = (
    "conv1_1", "conv1_2",
    "conv2_1", "conv2_2",
    "conv3_1", "conv3_2", "conv3_3",
    "conv4_1", "conv4_2", "conv4_3",
    "conv5_1", "conv5_2", "conv5_3",
)
FEATURE_INDICES = (0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28)
CHANNELS = (64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512)

ZOO_MEAN = (0.485, 0.456, 0.406)
ZOO_STD = (0.229, 0.224, 0.225)


class ExportError(Exception):
    """Zoo unavailable, unreadable checkpoint, or wrong architecture."""


@dataclass(frozen=True)
class ExportEntry:
    name: str
    dims: tuple[int, ...]
    sha256: str


@dataclass(frozen=True)
class ExportReport:
    entries: tuple[ExportEntry, ...]
    total_bytes: int
    means: tuple[float, float, float]


def _zoo_state_dict(variant: str) -> dict:
    if variant != "vgg16":
        raise ExportError(f"unsupported zoo variant {variant!r}")
    from torchvision.models import VGG16_Weights, vgg16

    try:
        model = vgg16(weights=VGG16_Weights.IMAGENET1K_V1)
    except Exception as e:
        raise ExportError(f"download failure: {e}") from e
    return model.state_dict()


def _checkpoint_state_dict(path) -> dict:
    try:
        state = torch.load(path, map_location="cpu")
    except Exception as e:
        raise ExportError(f"unreadable checkpoint {path}: {e}") from e
    if not isinstance(state, dict):
        raise ExportError(f"checkpoint {path} does not hold a state dict")
    return state


def _conv_arrays(state: dict) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """The 13 (name, kernel, bias) conv parameter triples, validated."""
    out = []
    in_c = 3
    for name, idx, out_c in zip(LAYER_NAMES, FEATURE_INDICES, CHANNELS):
        triple = []
        for kind, want in (("weight", (out_c, in_c, 3, 3)), ("bias", (out_c,))):
            key = f"features.{idx}.{kind}"
            if key not in state:
                raise ExportError(
                    f"unexpected architecture variant: missing parameter {key}"
                )
            tensor = state[key]
            if tuple(tensor.shape) != want:
                raise ExportError(
                    f"unexpected architecture variant: {key} has shape "
                    f"{tuple(tensor.shape)}, expected {want}"
                )
            triple.append(tensor.detach().cpu().numpy().astype(np.float32))
        out.append((name, triple[0], triple[1]))
        in_c = out_c
    return out


def _fold_input_normalization(kernel: np.ndarray) -> np.ndarray:
    scale = 1.0 / (255.0 * np.asarray(ZOO_STD, dtype=np.float64))
    folded = kernel.astype(np.float64) * scale[None, :, None, None]
    return folded.astype(np.float32)


def _pack_entry(name: str, arr: np.ndarray) -> tuple[bytes, ExportEntry]:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    payload = arr.tobytes()
    encoded = name.encode("utf-8")
    blob = struct.pack("<H", len(encoded)) + encoded
    blob += struct.pack("<B", arr.ndim)
    blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
    blob += struct.pack("<B", DTYPE_F32)
    blob += payload
    entry = ExportEntry(name, tuple(arr.shape), hashlib.sha256(payload).hexdigest())
    return blob, entry


def export(dest, variant: str = "vgg16", checkpoint=None) -> ExportReport:
    """Write the container to dest and report every entry written.

    Parameters come from a local checkpoint file when one is given, otherwise
    from the public zoo (network access required). Re-exporting the same
    parameters produces a byte-identical file.
    """
    if checkpoint is not None:
        state = _checkpoint_state_dict(checkpoint)
    else:
        state = _zoo_state_dict(variant)

    convs = _conv_arrays(state)
    means = tuple(255.0 * m for m in ZOO_MEAN)

    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    buf += struct.pack("<3d", *means)
    buf += struct.pack("<I", 2 * len(convs))
    entries = []
    for i, (name, kernel, bias) in enumerate(convs):
        if i == 0:
            kernel = _fold_input_normalization(kernel)
        for suffix, arr in ((".w", kernel), (".b", bias)):
            blob, entry = _pack_entry(name + suffix, arr)
            buf += blob
            entries.append(entry)

    data = bytes(buf)
    Path(dest).write_bytes(data)
    return ExportReport(tuple(entries), len(data), means)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="vggexport",
        description="export pretrained VGG-16 conv parameters to a weight container",
    )
    parser.add_argument("dest", help="output file path")
    parser.add_argument("--variant", default="vgg16", help="zoo variant identifier")
    parser.add_argument(
        "--checkpoint",
        help="local .pth state dict to export instead of downloading",
    )
    args = parser.parse_args(argv)
    try:
        report = export(args.dest, variant=args.variant, checkpoint=args.checkpoint)
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    for entry in report.entries:
        dims = "x".join(str(d) for d in entry.dims)
        print(f"{entry.name:<12} {dims:<12} sha256:{entry.sha256[:16]}")
    means = ", ".join(f"{m:.3f}" for m in report.means)
    print(f"{len(report.entries)} entries, {report.total_bytes} bytes, means [{means}]")
    return 0


if __name__ == "__main__":
    sys.exit(main())
