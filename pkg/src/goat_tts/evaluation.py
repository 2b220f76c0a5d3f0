"""Token error rate against the exact oracle.

TER = Levenshtein(reference tokens, oracle transcript of synthesized frames) /
reference length. It is a toy-world stand-in for CER/WER and is not
comparable with error rates measured by a real ASR system.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError
from .flow_matching import CFMModel, euler_sample
from .model.network import DualBranchModel
from .streaming import synthesize_offline
from .toy_world.codec import Codec
from .toy_world.corpus import ToyUtterance
from .toy_world.oracle import oracle_transcribe
from .toy_world.render import render_speech
from .toy_world.world import TextVocab, WorldConfig


def levenshtein(a, b) -> int:
    """Edit distance with unit insert/delete/substitute costs (two-row DP)."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def token_error_rate(reference, hypothesis) -> float:
    if len(reference) == 0:
        raise ArgumentError("TER needs a nonempty reference")
    return levenshtein(reference, hypothesis) / len(reference)


@dataclass
class EvalItem:
    uid: int
    prompt_uid: int
    dialect: int
    ter: float | None            # None when the oracle failed on some frame
    hypothesis: list[int]
    speaker_match: bool
    dialect_match: bool
    emotion_match: bool
    tokens: int
    truncated: bool
    failed: bool

    def to_record(self) -> dict:
        return {"uid": self.uid, "prompt_uid": self.prompt_uid, "dialect": self.dialect,
                "ter": None if self.ter is None else round(self.ter, 6), "hypothesis": self.hypothesis,
                "speaker_match": self.speaker_match, "dialect_match": self.dialect_match,
                "emotion_match": self.emotion_match, "tokens": self.tokens,
                "truncated": self.truncated, "oracle_failed": self.failed}


@dataclass
class EvalReport:
    items: list[EvalItem] = field(default_factory=list)

    def _scored(self, dialect: int | None = None):
        return [i for i in self.items if not i.failed and (dialect is None or i.dialect == dialect)]

    @property
    def mean_ter(self) -> float | None:
        s = self._scored()
        return float(np.mean([i.ter for i in s])) if s else None

    def rate(self, attr: str) -> float | None:
        return float(np.mean([getattr(i, attr) for i in self.items])) if self.items else None

    @property
    def failed(self) -> int:
        return sum(i.failed for i in self.items)

    def per_dialect(self) -> dict[int, dict]:
        out = {}
        for d in sorted({i.dialect for i in self.items}):
            items = [i for i in self.items if i.dialect == d]
            scored = self._scored(d)
            out[d] = {"items": len(items), "scored": len(scored),
                      "mean_ter": float(np.mean([i.ter for i in scored])) if scored else None,
                      "dialect_match": float(np.mean([i.dialect_match for i in items]))}
        return out

    def to_records(self) -> list[dict]:
        return [i.to_record() for i in self.items]

    def summary(self) -> dict:
        return {"items": len(self.items), "scored": len(self._scored()), "oracle_failed": self.failed,
                "mean_ter": self.mean_ter, "dialect_match": self.rate("dialect_match"),
                "speaker_match": self.rate("speaker_match"), "emotion_match": self.rate("emotion_match"),
                "truncated": sum(i.truncated for i in self.items),
                "per_dialect": {str(k): v for k, v in self.per_dialect().items()}}


def prompt_partners(utts: list[ToyUtterance]) -> dict[int, ToyUtterance]:
    """For each utterance, the next utterance (by uid, cyclically) of the same dialect.

    The prompt therefore carries the target dialect but never the target text.
    Singleton dialects fall back to the utterance itself.
    """
    by_d: dict[int, list[ToyUtterance]] = {}
    for u in sorted(utts, key=lambda x: x.uid):
        by_d.setdefault(u.dialect, []).append(u)
    out = {}
    for members in by_d.values():
        for i, u in enumerate(members):
            out[u.uid] = members[(i + 1) % len(members)]
    return out


def vocode(tokens, codec: Codec, cfm: CFMModel | None, steps: int = 16, seed: int = 0) -> np.ndarray:
    """Frames for generated tokens: the flow-matching decoder if given, else codebook lookup."""
    toks = [int(t) for t in tokens if int(t) != codec.eos]
    if cfm is not None:
        return euler_sample(cfm, toks, steps, seed)
    return codec.decode(toks + [codec.eos])


def evaluate_ter(model: DualBranchModel, utts: list[ToyUtterance], world: WorldConfig, vocab: TextVocab,
                 codec: Codec, cfm: CFMModel | None = None, steps: int = 16, seed: int = 0) -> EvalReport:
    """Synthesize every utterance's text from a same-dialect prompt and score it with the oracle."""
    partners = prompt_partners(utts)
    report = EvalReport()
    for u in sorted(utts, key=lambda x: x.uid):
        prompt = partners[u.uid]
        out = synthesize_offline(model, render_speech(prompt, world), u.text, vocab)
        frames = vocode(out.tokens, codec, cfm, steps, seed + u.uid)
        tr = oracle_transcribe(frames, world)
        failed = tr.failed or len(frames) == 0
        report.items.append(EvalItem(
            uid=u.uid, prompt_uid=prompt.uid, dialect=u.dialect,
            ter=None if failed else token_error_rate(u.text, tr.text),
            hypothesis=[int(t) for t in tr.text],
            speaker_match=tr.speaker == prompt.speaker, dialect_match=tr.dialect == u.dialect,
            emotion_match=tr.emotion == prompt.emotion, tokens=int(len(out.tokens)),
            truncated=out.truncated, failed=failed,
        ))
    return report
