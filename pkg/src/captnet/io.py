"""Checkpoint, PPM image and CSV report formats.

Checkpoint layout (all integers little-endian)::

    b"CAPTCKPT"  u32 version  u32 count
    count x { u16 name_len, name (utf-8), u8 rank, u32 x rank dims, f32 x prod(dims) }

Entries are sorted by name; trailing bytes are rejected.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .degrade import Label

MAGIC = b"CAPTCKPT"
VERSION = 1


class FormatError(ValueError):
    pass


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

def checkpoint_bytes(params: dict) -> bytes:
    names = sorted(params)
    parts = [MAGIC, struct.pack("<II", VERSION, len(names))]
    for name in names:
        arr = np.asarray(getattr(params[name], "data", params[name]))
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def parse_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    """Decode checkpoint bytes to ``{name: float32 array}``."""
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated checkpoint while reading {what}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(8, "magic")) != MAGIC:
        raise FormatError("bad checkpoint magic")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(nlen, "name")).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        size = int(np.prod(dims, dtype=np.int64))
        payload = take(4 * size, f"payload of {name}")
        if name in out:
            raise FormatError(f"duplicate entry {name}")
        out[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after checkpoint")
    return out


def load_into(model, entries: dict[str, np.ndarray]):
    """Copy decoded entries into ``model``'s parameters; names and shapes must match exactly."""
    params = model.named_parameters()
    for name in sorted(set(params) | set(entries)):
        if name not in entries:
            raise FormatError(f"checkpoint is missing parameter {name}")
        if name not in params:
            raise FormatError(f"checkpoint has unexpected parameter {name}")
        if entries[name].shape != params[name].shape:
            raise FormatError(
                f"shape mismatch for {name}: checkpoint {entries[name].shape}, model {params[name].shape}"
            )
    for name, p in params.items():
        p.data = entries[name].astype(p.data.dtype)
    return model


def save_checkpoint(model, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model.named_parameters()))


def load_checkpoint(path: str | Path, model):
    return load_into(model, parse_checkpoint(Path(path).read_bytes()))


# ----------------------------------------------------------------------------
# PPM (P6, maxval 255)
# ----------------------------------------------------------------------------

def encode_ppm(image: np.ndarray) -> bytes:
    """``[3, H, W]`` floats in [0, 1] to binary PPM, rounding half up."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a [3, H, W] image, got {img.shape}")
    _, h, w = img.shape
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.transpose(1, 2, 0).tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    tokens: list[bytes] = []
    pos = 0
    n = len(buf)
    while len(tokens) < 4:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("malformed PPM header")
        tokens.append(buf[start:pos])
    if tokens[0] != b"P6":
        raise FormatError(f"unsupported PPM magic {tokens[0]!r}; only binary P6 is accepted")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("malformed PPM header") from None
    if maxval != 255:
        raise FormatError(f"PPM maxval must be 255, got {maxval}")
    if w < 1 or h < 1:
        raise FormatError("PPM dimensions must be positive")
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise FormatError("malformed PPM header")
    pos += 1
    need = w * h * 3
    payload = buf[pos:]
    if len(payload) < need:
        raise FormatError(f"truncated PPM payload: expected {need} bytes, got {len(payload)}")
    if len(payload) > need:
        raise FormatError(f"PPM size mismatch: {len(payload) - need} extra bytes")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return (arr.astype(np.float32) / np.float32(255.0))


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def read_ppm(path: str | Path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


# ----------------------------------------------------------------------------
# manifests and CSV reports
# ----------------------------------------------------------------------------

MANIFEST_FIELDS = ("sample_id", "label", "seed", "clean_path", "degraded_path")
LOSS_FIELDS = ("iter", "lr", "loss_db")
METRIC_FIELDS = ("image_id", "label", "psnr_db", "ssim")
FLOP_FIELDS = ("H", "W", "C", "analytic_sa", "analytic_mrap", "measured_core")
CLUSTER_FIELDS = ("silhouette_encoder", "silhouette_output", "n")


@dataclass
class ManifestRow:
    sample_id: str
    label: Label
    seed: int
    clean_path: Path
    degraded_path: Path


def write_csv(path: str | Path, fields: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow(row)


def read_manifest(path: str | Path) -> list[ManifestRow]:
    """Parse a manifest; relative image paths resolve against the manifest's directory."""
    path = Path(path)
    base = path.parent
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise FormatError(f"manifest header must be {','.join(MANIFEST_FIELDS)}")
        for rec in reader:
            rows.append(ManifestRow(
                rec["sample_id"], Label(rec["label"]), int(rec["seed"]),
                base / rec["clean_path"], base / rec["degraded_path"],
            ))
    return rows


def fmt(x: float) -> str:
    """Shortest round-trip float text, so reruns write identical bytes."""
    return repr(float(x))
