"""Continuation pairs and conversational quadruples built from a corpus."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .codec import Codec, load_codec
from .corpus import ToyUtterance
from .render import render_speech
from .world import WorldConfig, text_vocab, toy_lm_continue

STRATEGIES = ("transcript", "tts")


@dataclass
class AlignmentPair:
    uid: int
    strategy: str
    prompt_frames: np.ndarray
    descriptor_prefix: list[int]
    continuation: list[int]
    transcript: list[int]        # kept for auditing; never a model input
    speaker: int
    dialect: int
    emotion: int

    def to_record(self) -> dict:
        return {"uid": self.uid, "strategy": self.strategy, "descriptor_prefix": self.descriptor_prefix,
                "continuation": self.continuation, "transcript": self.transcript,
                "speaker": self.speaker, "dialect": self.dialect, "emotion": self.emotion}

    @classmethod
    def from_record(cls, rec: dict, world: WorldConfig) -> "AlignmentPair":
        """Rebuild a pair; the prompt is re-rendered from the voiced transcript."""
        u = ToyUtterance(int(rec["uid"]), tuple(rec["transcript"]), int(rec["speaker"]),
                         int(rec["dialect"]), int(rec["emotion"]))
        return cls(uid=u.uid, strategy=rec["strategy"], prompt_frames=render_speech(u, world),
                   descriptor_prefix=[int(t) for t in rec["descriptor_prefix"]],
                   continuation=[int(t) for t in rec["continuation"]], transcript=list(u.text),
                   speaker=u.speaker, dialect=u.dialect, emotion=u.emotion)


@dataclass
class Quadruple:
    uid: int                     # query utterance id
    response_uid: int
    text_query: list[int]
    speech_query: np.ndarray
    text_response: list[int]
    speech_response: np.ndarray  # codec tokens incl. EOS
    speaker: int
    dialect: int
    emotion: int

    def to_record(self) -> dict:
        return {"uid": self.uid, "response_uid": self.response_uid, "text_query": self.text_query,
                "text_response": self.text_response,
                "speech_response": [int(t) for t in self.speech_response],
                "speaker": self.speaker, "dialect": self.dialect, "emotion": self.emotion}

    @classmethod
    def from_record(cls, rec: dict, world: WorldConfig) -> "Quadruple":
        q = ToyUtterance(int(rec["uid"]), tuple(rec["text_query"]), int(rec["speaker"]),
                         int(rec["dialect"]), int(rec["emotion"]))
        return cls(uid=q.uid, response_uid=int(rec["response_uid"]), text_query=list(q.text),
                   speech_query=render_speech(q, world), text_response=[int(t) for t in rec["text_response"]],
                   speech_response=np.asarray(rec["speech_response"], dtype=np.int64),
                   speaker=q.speaker, dialect=q.dialect, emotion=q.emotion)


@dataclass
class QuadrupleReport:
    groups: int = 0
    quadruples: int = 0
    skipped_groups: int = 0
    skipped_utterances: int = 0
    per_dialect: dict = field(default_factory=dict)


def descriptor_prefix(world: WorldConfig, dialect: int, emotion: int) -> list[int]:
    vocab = text_vocab(world)
    return [vocab.dialect_token(dialect), vocab.emotion_token(emotion)]


def build_alignment_pairs(corpus: list[ToyUtterance], strategy: str, world: WorldConfig | None = None,
                          seed: int = 0) -> list[AlignmentPair]:
    """Speech prompt -> frozen-LM continuation of (descriptors + transcript).

    ``transcript``: the utterance's own rendering and transcript.
    ``tts``: each sentence is voiced afresh by the renderer with a seeded voice
    (speaker/emotion drawn, dialect cycled for balance), standing in for TTS.
    """
    world = world or WorldConfig()
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}")
    if not corpus:
        raise ValueError("empty corpus")
    rng = np.random.default_rng(seed)
    out = []
    for i, u in enumerate(corpus):
        if strategy == "tts":
            u = ToyUtterance(u.uid, u.text, int(rng.integers(world.S)), i % world.D,
                             int(rng.integers(world.E)))
        prefix = descriptor_prefix(world, u.dialect, u.emotion)
        out.append(AlignmentPair(
            uid=u.uid, strategy=strategy, prompt_frames=render_speech(u, world),
            descriptor_prefix=prefix, continuation=toy_lm_continue(prefix + list(u.text), world),
            transcript=list(u.text), speaker=u.speaker, dialect=u.dialect, emotion=u.emotion,
        ))
    return out


def build_quadruples(corpus: list[ToyUtterance], world: WorldConfig | None = None,
                     codec: Codec | None = None) -> tuple[list[Quadruple], QuadrupleReport]:
    """Pair consecutive utterances sharing (speaker, dialect, emotion) as query/response.

    Groups with fewer than two utterances are skipped and counted; an odd
    trailing utterance in a group is dropped.
    """
    world = world or WorldConfig()
    codec = codec or load_codec(world)
    groups: OrderedDict[tuple, list[ToyUtterance]] = OrderedDict()
    for u in corpus:
        groups.setdefault((u.speaker, u.dialect, u.emotion), []).append(u)
    report = QuadrupleReport(groups=len(groups))
    quads = []
    for (spk, dia, emo), members in groups.items():
        if len(members) < 2:
            report.skipped_groups += 1
            report.skipped_utterances += len(members)
            continue
        report.skipped_utterances += len(members) % 2
        for q, r in zip(members[0::2], members[1::2]):
            quads.append(Quadruple(
                uid=q.uid, response_uid=r.uid, text_query=list(q.text),
                speech_query=render_speech(q, world), text_response=list(r.text),
                speech_response=codec.encode(render_speech(r, world)),
                speaker=spk, dialect=dia, emotion=emo,
            ))
            report.per_dialect[dia] = report.per_dialect.get(dia, 0) + 1
    quads.sort(key=lambda x: x.uid)
    report.quadruples = len(quads)
    return quads, report
