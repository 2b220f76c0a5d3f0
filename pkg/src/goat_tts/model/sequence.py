"""Training-sequence layouts.

A sequence is a *query* (text tokens and/or speech-prompt frames) right-aligned
to end at absolute position ``query_capacity``, followed by a *stream* that
starts exactly there. Three layouts exist:

* pretrain:  query = descriptors + transcript tokens,   stream = CONT + descriptors + continuation
* align:     query = speech prompt,                     stream = CONT + descriptors + continuation
* generate:  query = (speech query | text query) + QEND, stream = text items and
  speech groups interleaved by :func:`text_needed`

In the generate layout the text items are the response tokens followed by EOT.
Speech group j is predicted from the hidden state of the last stream position
before it; at that point the first ``text_needed(j)`` text items are present.
The streaming session replays exactly this schedule.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ArgumentError
from ..toy_world.builders import AlignmentPair, Quadruple
from ..toy_world.world import TextVocab
from .config import ModelConfig

IGNORE = -100
TEXT, SPEECH = 0, 1


class SequenceTooLong(ArgumentError):
    pass


def text_needed(j: int, n_items: int, cfg: ModelConfig) -> int:
    """Text items (response tokens + EOT) that must precede speech group j."""
    return min(cfg.lookahead + (j * cfg.G) // cfg.speech_per_text, n_items)


@dataclass
class TrainingSequence:
    mode: str
    query: list[tuple[int, object]]          # (TEXT, token id) or (SPEECH, frames array)
    stream: list[tuple[int, int]]            # (TEXT|SPEECH, id)
    text_targets: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))   # per stream pos
    group_pos: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))      # stream index per group
    group_targets: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), np.int64))
    group_prev: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), np.int64))
    # generate layout only: index of each text item (-1 on speech positions) and the
    # response cursor (speech tokens so far // speech_per_text) at every position
    item_ids: np.ndarray | None = None
    cursor_ids: np.ndarray | None = None
    uid: int = -1
    dialect: int = -1
    # projected prompt embeddings by query index; valid only while encoder/projector are fixed
    prompt_cache: dict = field(default_factory=dict)

    @property
    def loss_mask(self) -> np.ndarray:
        if self.mode == "generate":
            return self.group_targets != IGNORE
        return self.text_targets != IGNORE

    def has_speech_query(self) -> bool:
        return any(kind == SPEECH for kind, _ in self.query)


def projected_length(n_frames: int, cfg: ModelConfig) -> int:
    latent = -(-n_frames // cfg.enc_stride)
    return -(-latent // 2)


def query_length(query, cfg: ModelConfig) -> int:
    n = 0
    for kind, val in query:
        n += projected_length(len(val), cfg) if kind == SPEECH else 1
    return n


def interleave(text_items: list[int], speech: list[int], cfg: ModelConfig):
    """Interleaved stream for a full (teacher-forced) speech response."""
    G = cfg.G
    n_groups = -(-len(speech) // G)
    stream: list[tuple[int, int]] = []
    group_pos, targets, prev = [], [], []
    ptr = 0
    last = cfg.V_s  # speech BOS row
    for j in range(n_groups):
        need = text_needed(j, len(text_items), cfg)
        stream.extend((TEXT, t) for t in text_items[ptr:need])
        ptr = max(ptr, need)
        group_pos.append(len(stream) - 1)
        grp = list(speech[j * G:(j + 1) * G])
        targets.append(grp + [IGNORE] * (G - len(grp)))
        prev.append([last] + grp[:-1] + [last] * (G - len(grp)))
        if j < n_groups - 1:
            stream.extend((SPEECH, t) for t in grp)
        last = grp[-1]
    return stream, np.array(group_pos), np.array(targets), np.array(prev)


def alignment_ids(stream: list[tuple[int, int]], cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-position text-item index and response cursor for a generate stream.

    The cursor at a position is the number of speech tokens up to and including
    it, divided by the speech tokens per text token: the index of the text item
    whose speech comes next. Matching it against item indices turns "which text
    token am I voicing" into a content lookup.
    """
    items, cursor = [], []
    n_text = n_speech = 0
    for kind, _ in stream:
        if kind == TEXT:
            items.append(n_text)
            n_text += 1
        else:
            items.append(-1)
            n_speech += 1
        cursor.append(n_speech // cfg.speech_per_text)
    return np.array(items, np.int64), np.array(cursor, np.int64)


def assemble_training_sequence(item, mode: str, cfg: ModelConfig, vocab: TextVocab,
                               query_kind: str = "speech") -> TrainingSequence:
    """Build one sequence; raises SequenceTooLong if it does not fit the context."""
    if mode in ("pretrain", "align"):
        if not isinstance(item, AlignmentPair):
            raise ArgumentError(f"{mode} mode takes an AlignmentPair")
        if mode == "pretrain":
            query = [(TEXT, t) for t in list(item.descriptor_prefix) + list(item.transcript)]
        else:
            query = [(SPEECH, item.prompt_frames)]
        # the LLM's reply restates the descriptors it was given, so in align mode
        # the projected speech alone has to carry dialect and emotion
        targets = list(item.descriptor_prefix) + list(item.continuation)
        stream = [(TEXT, vocab.cont)] + [(TEXT, t) for t in targets[:-1]]
        seq = TrainingSequence(mode, query, stream, text_targets=np.array(targets, dtype=np.int64),
                               uid=item.uid, dialect=item.dialect)
    elif mode == "generate":
        if not isinstance(item, Quadruple):
            raise ArgumentError("generate mode takes a Quadruple")
        if query_kind == "speech":
            query = [(SPEECH, item.speech_query)]
        elif query_kind == "text":
            query = [(TEXT, t) for t in item.text_query]
        else:
            raise ArgumentError(f"query_kind must be 'speech' or 'text', got {query_kind!r}")
        query.append((TEXT, vocab.query_end))
        text_items = list(item.text_response) + [vocab.eot]
        stream, gpos, gtgt, gprev = interleave(text_items, [int(t) for t in item.speech_response], cfg)
        items, cursor = alignment_ids(stream, cfg)
        seq = TrainingSequence(mode, query, stream, text_targets=np.full(len(stream), IGNORE, np.int64),
                               group_pos=gpos, group_targets=gtgt, group_prev=gprev,
                               item_ids=items, cursor_ids=cursor, uid=item.uid, dialect=item.dialect)
    else:
        raise ArgumentError(f"unknown mode {mode!r}")
    qlen = query_length(seq.query, cfg)
    if qlen > cfg.query_capacity or cfg.query_capacity + len(seq.stream) > cfg.context:
        raise SequenceTooLong(f"item {seq.uid}: query {qlen} / stream {len(seq.stream)} exceeds context")
    return seq
