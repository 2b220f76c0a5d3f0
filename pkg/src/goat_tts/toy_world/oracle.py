"""Exact transcriber: inverts the renderer by nearest render center."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .codec import phoneme_margin
from .render import all_centers
from .world import WorldConfig

FAILED = -1


@dataclass
class Transcript:
    text: list[int]
    speaker: int | None
    dialect: int | None
    emotion: int | None
    frame_labels: np.ndarray = field(repr=False, default_factory=lambda: np.zeros((0, 5), np.int64))

    @property
    def failed(self) -> bool:
        return FAILED in self.text


@lru_cache(maxsize=4)
def _decision_radius(world: WorldConfig) -> float:
    return phoneme_margin(world) / 2.0


def _majority(values: np.ndarray) -> int | None:
    values = values[values >= 0]
    if values.size == 0:
        return None
    return int(np.argmax(np.bincount(values)))


def label_frames(frames: np.ndarray, world: WorldConfig) -> np.ndarray:
    """Per-frame (phoneme, slot, speaker, dialect, emotion); -1 rows outside every decision region."""
    centers, labels = all_centers(world)
    frames = np.asarray(frames, dtype=np.float64)
    out = np.full((len(frames), 5), FAILED, dtype=np.int64)
    c2 = np.einsum("ij,ij->i", centers, centers)
    radius = _decision_radius(world)
    for i in range(0, len(frames), 256):
        chunk = frames[i:i + 256]
        d2 = c2[None, :] - 2.0 * chunk @ centers.T + np.einsum("ij,ij->i", chunk, chunk)[:, None]
        best = np.argmin(d2, axis=1)
        dist = np.sqrt(np.maximum(d2[np.arange(len(chunk)), best], 0.0))
        ok = dist < radius
        out[i:i + 256][ok] = labels[best[ok]]
    return out


def oracle_transcribe(frames: np.ndarray, world: WorldConfig | None = None) -> Transcript:
    """Text tokens plus majority-vote (speaker, dialect, emotion).

    Frames are grouped into text tokens by slot index: a group starts at slot
    0, at a phoneme change, or when it is full. A frame outside every decision
    region yields a FAILED token for its group.
    """
    world = world or WorldConfig()
    frames = np.asarray(frames)
    if frames.size == 0:
        return Transcript([], None, None, None)
    lab = label_frames(frames, world)
    R = world.frames_per_token
    text: list[int] = []
    run = 0
    prev = None
    for p, slot in lab[:, :2]:
        p, slot = int(p), int(slot)
        new = prev is None or run == R or p != prev or (p != FAILED and slot == 0)
        if new:
            text.append(p)
            run = 0
        run += 1
        prev = p
    ok = lab[:, 0] != FAILED
    return Transcript(text, _majority(lab[ok, 2]), _majority(lab[ok, 3]), _majority(lab[ok, 4]), lab)
