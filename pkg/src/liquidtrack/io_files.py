"""File formats: mask images, sequence manifests, particle snapshots.

Masks are 8-bit binary PGM images (0 = not-liquid, 255 = liquid) with a
JSON manifest listing the frame files in order; round trips are bit
exact. Particle snapshots are little-endian binary records of
(id: u32, position: 3 x f64, velocity: 3 x f64).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .particles import ParticleSet, ValidationError

__all__ = [
    "content_hash",
    "read_mask",
    "read_mask_sequence",
    "read_snapshot",
    "write_mask",
    "write_mask_sequence",
    "write_metrics_csv",
    "write_snapshot",
]

SNAPSHOT_DTYPE = np.dtype(
    [("id", "<u4"), ("position", "<f8", 3), ("velocity", "<f8", 3)]
)


def write_mask(path, mask: np.ndarray):
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.dtype != bool:
        raise ValidationError("mask must be a 2D boolean array")
    h, w = mask.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write((mask.astype(np.uint8) * 255).tobytes())


def read_mask(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise ValidationError(f"{path}: not a binary PGM file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while data[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValidationError(f"{path}: expected 8-bit PGM")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return (pixels.reshape(h, w) > 127)


def write_mask_sequence(directory, masks, meta: dict | None = None) -> Path:
    """Write masks as frame files plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for k, mask in enumerate(masks):
        name = f"mask_{k:06d}.pgm"
        write_mask(directory / name, mask)
        names.append(name)
    first = np.asarray(masks[0]) if len(masks) else np.zeros((0, 0), bool)
    manifest = {
        "schema_version": 1,
        "frames": names,
        "width": int(first.shape[1]) if first.ndim == 2 else 0,
        "height": int(first.shape[0]) if first.ndim == 2 else 0,
    }
    manifest.update(meta or {})
    path = directory / "frames.json"
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return path


def read_mask_sequence(directory):
    """Masks plus manifest metadata from a sequence directory."""
    directory = Path(directory)
    manifest_path = directory / "frames.json"
    if not manifest_path.exists():
        raise ValidationError(f"no mask manifest at {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    masks = [read_mask(directory / name) for name in manifest["frames"]]
    return masks, manifest


def write_snapshot(path, particles: ParticleSet):
    rec = np.empty(particles.n, dtype=SNAPSHOT_DTYPE)
    rec["id"] = particles.ids
    rec["position"] = particles.positions
    rec["velocity"] = particles.velocities
    with open(path, "wb") as f:
        f.write(rec.tobytes())


def read_snapshot(path) -> ParticleSet:
    rec = np.fromfile(path, dtype=SNAPSHOT_DTYPE)
    return ParticleSet.from_positions(
        rec["position"].astype(np.float64),
        velocities=rec["velocity"].astype(np.float64),
        ids=rec["id"],
    )


def write_metrics_csv(path, rows, header):
    """Delimited metrics table; one row per frame."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join("" if v is None else repr(v) for v in row))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def content_hash(data) -> str:
    """Stable content hash of JSON-serializable data."""
    blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
