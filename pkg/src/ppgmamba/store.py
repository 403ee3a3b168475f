"""On-disk segment store.

A store is a directory holding

``segments.ppgs``
    little-endian binary: magic ``PPGS``, version u32, fs f32, count u32, then
    per segment 750 f32 clean, 750 f32 noisy, f32 bpm_label, u8 split tag.
``manifest.json``
    version, fs, counts per split, seeds, and per-segment subject/window/split.

Writing is deterministic: identical inputs give byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import FS, SEG_LEN, SPLITS, Segment

MAGIC = b"PPGS"
VERSION = 1
BIN_NAME = "segments.ppgs"
MANIFEST_NAME = "manifest.json"

_HEADER = struct.Struct("<4sIfI")
_RECORD = np.dtype([("clean", "<f4", SEG_LEN), ("noisy", "<f4", SEG_LEN), ("bpm", "<f4"), ("split", "u1")])


class StoreError(ValueError):
    pass


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_store(path, segments: list[Segment], fs: float = FS, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    rec = np.zeros(len(segments), dtype=_RECORD)
    for i, s in enumerate(segments):
        rec[i]["clean"] = s.samples
        rec[i]["noisy"] = s.samples if s.noisy is None else s.noisy
        rec[i]["bpm"] = s.bpm_label
        rec[i]["split"] = SPLITS.index(s.split)
    with open(path / BIN_NAME, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, fs, len(segments)))
        fh.write(rec.tobytes())
    manifest = {
        "version": VERSION,
        "fs": fs,
        "counts": {k: sum(s.split == k for s in segments) for k in SPLITS},
        "segments": [[s.subject_id, int(s.window_index), s.split] for s in segments],
    }
    manifest.update(extra or {})
    write_json(path / MANIFEST_NAME, manifest)
    return path


def read_manifest(path) -> dict:
    p = Path(path) / MANIFEST_NAME
    if not p.exists():
        raise StoreError(f"{path}: missing {MANIFEST_NAME}")
    return json.loads(p.read_text())


def read_store(path) -> tuple[list[Segment], dict]:
    """Load all segments (float64) and the manifest."""
    path = Path(path)
    manifest = read_manifest(path)
    try:
        raw = (path / BIN_NAME).read_bytes()
    except FileNotFoundError:
        raise StoreError(f"{path}: missing {BIN_NAME}") from None
    if len(raw) < _HEADER.size:
        raise StoreError(f"{path}: truncated header")
    magic, version, fs, n = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise StoreError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise StoreError(f"{path}: unsupported store version {version}")
    if len(raw) != _HEADER.size + n * _RECORD.itemsize:
        raise StoreError(f"{path}: expected {n} segments, file size does not match")
    rec = np.frombuffer(raw, dtype=_RECORD, count=n, offset=_HEADER.size)
    meta = manifest.get("segments", [])
    if len(meta) != n:
        raise StoreError(f"{path}: manifest lists {len(meta)} segments, binary has {n}")
    segs = []
    for r, (sid, wi, split) in zip(rec, meta):
        if r["split"] >= len(SPLITS) or SPLITS[r["split"]] != split:
            raise StoreError(f"{path}: split tag disagrees with manifest for {sid}/{wi}")
        segs.append(Segment(r["clean"].astype(float), float(r["bpm"]), sid, int(wi), split,
                            r["noisy"].astype(float)))
    return segs, manifest


def arrays(segments: list[Segment], split: str | None = None):
    """Stack (clean, noisy, bpm) for one split (or all segments)."""
    sel = [s for s in segments if split is None or s.split == split]
    if not sel:
        return np.zeros((0, SEG_LEN)), np.zeros((0, SEG_LEN)), np.zeros(0)
    clean = np.stack([s.samples for s in sel])
    noisy = np.stack([s.samples if s.noisy is None else s.noisy for s in sel])
    return clean, noisy, np.array([s.bpm_label for s in sel])
