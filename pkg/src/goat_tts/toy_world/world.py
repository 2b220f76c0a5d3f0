"""World configuration, text vocabulary layout, and the fixed bigram grammar."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

GRAMMAR_SEED = 20250409  # grammar version 1
GRAMMAR_VERSION = 1


@dataclass(frozen=True)
class WorldConfig:
    A: int = 32           # phoneme alphabet
    S: int = 16           # speakers
    D: int = 4            # dialects
    E: int = 3            # emotions
    F: int = 16           # frame dims
    frames_per_token: int = 2
    V_s: int = 257        # 256 centroids + EOS
    L_max: int = 24
    C: int = 8            # continuation length
    dialect_weights: tuple[float, ...] | None = None
    emotion_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        for k in ("A", "S", "D", "E", "F", "frames_per_token", "V_s", "L_max", "C"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")

    @property
    def eos(self) -> int:
        return self.V_s - 1

    @property
    def n_centroids(self) -> int:
        return self.V_s - 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TextVocab:
    """Phonemes first, then dialect and emotion descriptors, then specials."""

    A: int
    D: int
    E: int

    def dialect_token(self, d: int) -> int:
        return self.A + d

    def emotion_token(self, e: int) -> int:
        return self.A + self.D + e

    @property
    def cont(self) -> int:       # start-of-continuation marker
        return self.A + self.D + self.E

    @property
    def query_end(self) -> int:
        return self.cont + 1

    @property
    def eot(self) -> int:        # end of streamed text
        return self.cont + 2

    @property
    def pad(self) -> int:
        return self.cont + 3

    @property
    def size(self) -> int:
        return self.cont + 4

    def is_phoneme(self, tok: int) -> bool:
        return 0 <= tok < self.A

    def is_descriptor(self, tok: int) -> bool:
        return self.A <= tok < self.A + self.D + self.E

    def decode_descriptors(self, prefix) -> tuple[int | None, int | None]:
        dialect = emotion = None
        for t in prefix:
            if self.A <= t < self.A + self.D:
                dialect = t - self.A
            elif self.A + self.D <= t < self.A + self.D + self.E:
                emotion = t - self.A - self.D
        return dialect, emotion


def text_vocab(world: WorldConfig) -> TextVocab:
    return TextVocab(world.A, world.D, world.E)


_WEIGHTS = (0.4, 0.3, 0.2, 0.1)


@dataclass
class BigramGrammar:
    """Each phoneme has a small successor set with fixed weights.

    The greedy successor (largest weight) is the designated successor. Terminal
    phonemes (the top eighth of the alphabet) always hand over to phoneme 0.
    """

    A: int
    table: np.ndarray = field(init=False)  # [A, A] transition probabilities

    def __post_init__(self):
        rng = np.random.default_rng(GRAMMAR_SEED + self.A)
        n_succ = min(len(_WEIGHTS), self.A)
        w = np.array(_WEIGHTS[:n_succ])
        w = w / w.sum()
        table = np.zeros((self.A, self.A))
        for a in range(self.A):
            succ = rng.choice(self.A, size=n_succ, replace=False)
            if self.is_terminal(a):
                # designated successor first so it takes the top weight
                succ = np.concatenate([[0], [s for s in succ if s != 0]])[:n_succ]
            table[a, succ] = w
        self.table = table

    def is_terminal(self, a: int) -> bool:
        return a >= self.A - max(1, self.A // 8)

    @cached_property
    def designated(self) -> np.ndarray:
        # argmax returns the lowest id among ties
        return np.argmax(self.table, axis=1)

    def successor(self, a: int) -> int:
        return int(self.designated[a])

    def prob(self, a: int, b: int) -> float:
        return float(self.table[a, b])

    def sample(self, rng: np.random.Generator, length: int) -> list[int]:
        tok = int(rng.integers(self.A))
        out = [tok]
        for _ in range(length - 1):
            tok = int(rng.choice(self.A, p=self.table[tok]))
            out.append(tok)
        return out


_GRAMMARS: dict[int, BigramGrammar] = {}


def grammar_for(world: WorldConfig) -> BigramGrammar:
    if world.A not in _GRAMMARS:
        _GRAMMARS[world.A] = BigramGrammar(world.A)
    return _GRAMMARS[world.A]


def toy_lm_continue(prefix, world: WorldConfig | None = None) -> list[int]:
    """Greedy continuation of length C under the frozen bigram grammar.

    Descriptor and special tokens in the prefix are skipped; the last phoneme
    drives the continuation.
    """
    world = world or WorldConfig()
    prefix = list(prefix)
    if not prefix:
        raise ValueError("toy_lm_continue needs a nonempty prefix")
    phonemes = [t for t in prefix if 0 <= t < world.A]
    g = grammar_for(world)
    tok = phonemes[-1] if phonemes else 0
    out = []
    for _ in range(world.C):
        tok = g.successor(tok)
        out.append(tok)
    return out
