"""Deterministic text -> frame synthesis.

A frame for text position i, slot k (of ``frames_per_token``) is

    clamp(Q_d (g_e * AMP * c_p) + slot[k] + dialect[d] + speaker[s] + jitter(i, k))

where c_p is a +-1 codeword (first-order Reed-Muller when A <= 32, so distinct
phonemes differ in >= 8 of 16 coordinates), Q_d a fixed orthogonal mixing per
dialect, g_e an emotion gain and jitter a bounded hash-derived perturbation.
"""
from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .corpus import ToyUtterance
from .world import WorldConfig

CLAMP = 4.0
AMP = 1.3
SLOT_SCALE = 0.45
DIALECT_SCALE = 0.5
SPEAKER_SCALE = 0.1
JITTER = 0.04          # per-coordinate bound
DIALECT_MIX = 0.02     # rotation strength of the dialect mixing
EMOTION_GAINS = (1.0, 0.92, 1.08)
RENDER_SEED = 7013     # fixes offsets and mixing matrices; part of the codebook version


def reed_muller_codewords(F: int) -> np.ndarray:
    """+-1 codewords of RM(1, log2 F): 2F words, pairwise Hamming distance >= F/2."""
    m = int(np.log2(F))
    if 2 ** m != F:
        raise ValueError("F must be a power of two for the Reed-Muller templates")
    xs = np.array(list(itertools.product([0, 1], repeat=m)))  # [F, m]
    words = []
    for bias in (0, 1):
        for a in itertools.product([0, 1], repeat=m):
            bits = (xs @ np.array(a) + bias) % 2
            words.append(1.0 - 2.0 * bits)
    return np.array(words)


@dataclass(frozen=True)
class RenderParams:
    templates: np.ndarray   # [A, F] unit-amplitude phoneme codewords
    slots: np.ndarray       # [R, F]
    dialect_off: np.ndarray  # [D, F]
    dialect_mix: np.ndarray  # [D, F, F] orthogonal
    speaker_off: np.ndarray  # [S, F]
    gains: np.ndarray       # [E]


def _cayley(rng: np.random.Generator, F: int, strength: float) -> np.ndarray:
    a = rng.normal(0.0, strength, (F, F))
    skew = (a - a.T) / 2.0
    eye = np.eye(F)
    return np.linalg.solve(eye - skew, eye + skew)


def _spread_signs(rng: np.random.Generator, n: int, F: int, min_hamming: int) -> np.ndarray:
    """n random +-1 vectors with pairwise Hamming distance >= min_hamming."""
    out: list[np.ndarray] = []
    while len(out) < n:
        cand = rng.choice([-1.0, 1.0], size=F)
        if all(np.sum(cand != o) >= min_hamming for o in out):
            out.append(cand)
    return np.array(out)


@lru_cache(maxsize=8)
def render_params(world: WorldConfig) -> RenderParams:
    rng = np.random.default_rng(RENDER_SEED)
    F = world.F
    try:
        words = reed_muller_codewords(F)
    except ValueError:
        words = None
    if words is not None and len(words) >= world.A:
        # rows of a Hadamard matrix and their negations: distinct phonemes are
        # orthogonal or opposite
        rows = words[:F]
        templates = np.concatenate([rows, -rows])[: world.A]
        # offsets ride along Hadamard rows (from the high end), so they add to a
        # template's own axis or an orthogonal one, never a skewed direction
        slot_dir = rows[F - 1]
        dialect_dirs = [rows[F - 2 - (d % (F - 2))] for d in range(world.D)]
    else:
        templates = rng.choice([-1.0, 1.0], size=(world.A, F))
        slot_dir = rng.choice([-1.0, 1.0], size=F)
        dialect_dirs = list(rng.choice([-1.0, 1.0], size=(world.D, F)))
    slots = np.stack([SLOT_SCALE * slot_dir * (1 if k % 2 == 0 else -1) * (1 + k // 2)
                      for k in range(world.frames_per_token)])
    dialect_off = np.stack([np.zeros(F) if d == 0 else DIALECT_SCALE * dialect_dirs[d - 1]
                            for d in range(world.D)])
    dialect_mix = np.stack([np.eye(F) if d == 0 else _cayley(rng, F, DIALECT_MIX) for d in range(world.D)])
    speaker_off = SPEAKER_SCALE * _spread_signs(rng, world.S, F, min_hamming=min(5, F // 3))
    if world.E <= len(EMOTION_GAINS):
        gains = np.array(EMOTION_GAINS[: world.E])
    else:
        gains = np.linspace(0.92, 1.08, world.E)
    return RenderParams(templates, slots, dialect_off, dialect_mix, speaker_off, gains)


def clean_frame(world: WorldConfig, p: int, slot: int, speaker: int, dialect: int, emotion: int) -> np.ndarray:
    rp = render_params(world)
    core = rp.dialect_mix[dialect] @ (rp.gains[emotion] * AMP * rp.templates[p])
    return core + rp.slots[slot] + rp.dialect_off[dialect] + rp.speaker_off[speaker]


@lru_cache(maxsize=8)
def all_centers(world: WorldConfig) -> tuple[np.ndarray, np.ndarray]:
    """Every jitter-free frame the renderer can produce.

    Returns (centers [N, F] float64, labels [N, 5] = phoneme, slot, speaker, dialect, emotion).
    """
    rp = render_params(world)
    R = world.frames_per_token
    core = np.einsum("dij,eaj->deai", rp.dialect_mix,
                     rp.gains[:, None, None] * AMP * rp.templates[None])  # [D, E, A, F]
    centers = (core[:, :, :, None, None, :]
               + rp.slots[None, None, None, :, None, :]
               + rp.dialect_off[:, None, None, None, None, :]
               + rp.speaker_off[None, None, None, None, :, :])  # [D, E, A, R, S, F]
    grid = np.stack(np.meshgrid(np.arange(world.D), np.arange(world.E), np.arange(world.A),
                                np.arange(R), np.arange(world.S), indexing="ij"), axis=-1)
    labels = grid.reshape(-1, 5)[:, [2, 3, 4, 0, 1]]  # -> p, slot, s, d, e
    return centers.reshape(-1, world.F), labels


def _jitter(u: ToyUtterance, n_frames: int, F: int) -> np.ndarray:
    key = f"{u.text}|{u.speaker}|{u.dialect}|{u.emotion}".encode()
    out = np.empty((n_frames, F))
    for i in range(n_frames):
        digest = hashlib.blake2b(key + i.to_bytes(4, "little"), digest_size=2 * F).digest()
        raw = np.frombuffer(digest, dtype="<u2").astype(np.float64)
        out[i] = (raw / 65535.0 * 2.0 - 1.0) * JITTER
    return out


def render_speech(u: ToyUtterance, world: WorldConfig | None = None) -> np.ndarray:
    """Frames [len(text) * frames_per_token, F] as float32, values in [-4, 4]."""
    world = world or WorldConfig()
    rp = render_params(world)
    text = np.asarray(u.text, dtype=np.int64)
    core = rp.dialect_mix[u.dialect] @ (rp.gains[u.emotion] * AMP * rp.templates[text]).T  # [F, n]
    frames = (core.T[:, None, :] + rp.slots[None, :, :]).reshape(-1, world.F)
    frames = frames + rp.dialect_off[u.dialect] + rp.speaker_off[u.speaker]
    frames = frames + _jitter(u, len(frames), world.F)
    return np.clip(frames, -CLAMP, CLAMP).astype(np.float32)


def max_jitter_norm(world: WorldConfig) -> float:
    return JITTER * float(np.sqrt(world.F))
