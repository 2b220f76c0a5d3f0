from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .world import WorldConfig, grammar_for


@dataclass(frozen=True)
class ToyUtterance:
    uid: int
    text: tuple[int, ...]
    speaker: int
    dialect: int
    emotion: int

    def to_record(self) -> dict:
        return {"uid": self.uid, "text": list(self.text), "speaker": self.speaker,
                "dialect": self.dialect, "emotion": self.emotion}

    @classmethod
    def from_record(cls, rec: dict) -> "ToyUtterance":
        return cls(int(rec["uid"]), tuple(int(t) for t in rec["text"]), int(rec["speaker"]),
                   int(rec["dialect"]), int(rec["emotion"]))


def _weights(w, n: int) -> np.ndarray:
    if w is None:
        return np.full(n, 1.0 / n)
    arr = np.asarray(w, dtype=np.float64)
    if arr.shape != (n,) or np.any(arr < 0) or arr.sum() <= 0:
        raise ValueError(f"bad weights {w!r} for {n} classes")
    return arr / arr.sum()


def gen_corpus(seed: int, world: WorldConfig, count: int) -> list[ToyUtterance]:
    """Deterministic grammar-constrained utterances with drawn descriptors."""
    if count < 1:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)
    grammar = grammar_for(world)
    dw = _weights(world.dialect_weights, world.D)
    ew = _weights(world.emotion_weights, world.E)
    out = []
    for uid in range(count):
        length = int(rng.integers(1, world.L_max + 1))
        text = tuple(grammar.sample(rng, length))
        speaker = int(rng.integers(world.S))
        dialect = int(rng.choice(world.D, p=dw))
        emotion = int(rng.choice(world.E, p=ew))
        out.append(ToyUtterance(uid, text, speaker, dialect, emotion))
    return out


def heldout_split(corpus: list[ToyUtterance], seed: int, heldout_fraction: float = 0.1):
    """90/10 split by a seeded hash of the utterance id."""
    train, held = [], []
    cut = int(round(heldout_fraction * 1000))
    for u in corpus:
        h = hashlib.blake2b(f"{seed}:{u.uid}".encode(), digest_size=8).digest()
        (held if int.from_bytes(h, "little") % 1000 < cut else train).append(u)
    return train, held
