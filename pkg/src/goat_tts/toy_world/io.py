"""On-disk formats for frames, codebooks and line-delimited records.

Frames/codebook file: 8-byte header of two little-endian uint32 (rows, dims)
followed by rows*dims little-endian float32 values in row-major order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from ..errors import FormatError


def frames_to_bytes(frames: np.ndarray) -> bytes:
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 2:
        raise FormatError(f"frames must be 2-d, got shape {frames.shape}")
    return struct.pack("<II", *frames.shape) + frames.astype("<f4").tobytes()


def frames_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 8:
        raise FormatError("frames blob shorter than its 8-byte header")
    rows, dims = struct.unpack_from("<II", blob, 0)
    if len(blob) != 8 + 4 * rows * dims:
        raise FormatError(f"frames blob length {len(blob)} does not match header ({rows}, {dims})")
    return np.frombuffer(blob, dtype="<f4", offset=8).astype(np.float32).reshape(rows, dims)


def write_frames(path: str | Path, frames: np.ndarray) -> None:
    Path(path).write_bytes(frames_to_bytes(frames))


def read_frames(path: str | Path) -> np.ndarray:
    return frames_from_bytes(Path(path).read_bytes())


def write_jsonl(path: str | Path, records: Iterable[dict]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
            n += 1
    return n


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
