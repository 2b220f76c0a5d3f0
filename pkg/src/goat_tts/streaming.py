"""Streaming inference.

A session encodes the speech prompt once, then accepts response text in chunks
and emits speech tokens in groups of G, one group per backbone extension.

Emission schedule (shared with the training layout): group j is predicted once
``text_needed(j)`` text items are in the context, where the items are the
response tokens followed by EOT. Before finalize the EOT is not yet known, so a
group waits until W + j*G/R text tokens have arrived (W = lookahead, R = speech
tokens per text token). Every context position is fed on its own, so the
arithmetic is identical however the text was chunked.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, StateError
from .flow_matching import CFMModel, euler_sample
from .model.network import DualBranchModel, IncrementalState
from .model.sequence import SPEECH, TEXT, text_needed
from .numerics.tensor import no_grad
from .toy_world.world import TextVocab

TOKEN_GROUP = "token_group"
END_OF_SPEECH = "end_of_speech"


@dataclass
class StreamEvent:
    kind: str
    tokens: list[int]
    step: int                 # backbone extensions so far
    timestamp: float          # seconds since the session opened
    truncated: bool = False

    def to_record(self, with_time: bool = True) -> dict:
        rec = {"kind": self.kind, "tokens": self.tokens, "step": self.step}
        if self.kind == END_OF_SPEECH:
            rec["truncated"] = self.truncated
        if with_time:
            rec["timestamp"] = round(self.timestamp, 6)
        return rec


def max_output_tokens(n_text: int, model: DualBranchModel) -> int:
    return 4 * model.cfg.speech_per_text * n_text + 16


class _Decoder:
    """Prompt-conditioned incremental decoder used by both drivers."""

    def __init__(self, model: DualBranchModel, prompt_frames, vocab: TextVocab, decode: str, seed: int):
        if decode not in ("greedy", "sampled"):
            raise ArgumentError(f"decode must be 'greedy' or 'sampled', got {decode!r}")
        frames = np.asarray(prompt_frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[0] == 0 or frames.shape[1] != model.cfg.F:
            raise ArgumentError("prompt must be a nonempty [T_f, F] frame matrix")
        self.model = model
        self.cfg = model.cfg
        self.vocab = vocab
        self.greedy = decode == "greedy"
        self.rng = np.random.default_rng(seed)
        self.state: IncrementalState = model.incremental("speech")
        p = self.state.p
        with no_grad():
            self.prompt_embedding = model.embed_prompt(p, frames).data
        query = np.concatenate([self.prompt_embedding, self.state.text_rows([vocab.query_end])])
        if query.shape[0] > self.cfg.query_capacity:
            raise ArgumentError(f"prompt too long: {query.shape[0]} query positions > {self.cfg.query_capacity}")
        self.hidden = self.state.extend(query, self.cfg.query_capacity - query.shape[0])
        self.stream_len = 0
        self.text_fed = 0
        self.speech_fed = 0
        self.prev = self.cfg.V_s          # BOS row for the first group
        self.groups = 0
        self.emitted: list[int] = []

    def _feed(self, row: np.ndarray) -> bool:
        pos = self.cfg.query_capacity + self.stream_len
        if pos >= self.cfg.context:
            return False
        self.hidden = self.state.extend(row[None], pos)
        self.stream_len += 1
        return True

    def feed_text(self, tok: int) -> bool:
        row = self.state.stream_row(TEXT, tok, self.text_fed, self.speech_fed // self.cfg.speech_per_text)
        self.text_fed += 1
        return self._feed(row)

    def next_group(self, limit: int) -> list[int]:
        toks = self.model.mtp_step(self.state.p, self.hidden, self.prev, self.greedy, self.rng)[:limit]
        self.groups += 1
        self.emitted.extend(toks)
        return toks

    def feed_group(self, toks: list[int]) -> bool:
        for t in toks:
            self.speech_fed += 1
            row = self.state.stream_row(SPEECH, t, -1, self.speech_fed // self.cfg.speech_per_text)
            if not self._feed(row):
                return False
        self.prev = toks[-1]
        return True


@dataclass
class OfflineResult:
    tokens: np.ndarray
    extensions: int
    truncated: bool


def _check_text(text_tokens, vocab: TextVocab) -> list[int]:
    out = []
    for t in text_tokens:
        t = int(t)
        if not vocab.is_phoneme(t):
            raise ArgumentError(f"text token {t} is not a phoneme id")
        out.append(t)
    return out


def synthesize_offline(model: DualBranchModel, prompt_frames, text_tokens, vocab: TextVocab,
                       decode: str = "greedy", seed: int = 0) -> OfflineResult:
    """Single-shot generation with the whole text known up front."""
    items = _check_text(text_tokens, vocab) + [vocab.eot]
    dec = _Decoder(model, prompt_frames, vocab, decode, seed)
    eos = model.cfg.V_s - 1
    guard = max_output_tokens(len(items) - 1, model)
    fed = 0
    while True:
        need = text_needed(dec.groups, len(items), model.cfg)
        ok = True
        while fed < need and ok:
            ok = dec.feed_text(items[fed])
            fed += 1
        if not ok:
            return OfflineResult(np.array(dec.emitted, np.int64), dec.groups, True)
        toks = dec.next_group(guard - len(dec.emitted))
        if toks[-1] == eos:
            return OfflineResult(np.array(dec.emitted, np.int64), dec.groups, False)
        if len(dec.emitted) >= guard or not dec.feed_group(toks):
            return OfflineResult(np.array(dec.emitted, np.int64), dec.groups, True)


@dataclass
class Session:
    decoder: _Decoder
    vocab: TextVocab
    status: str = "open"                      # open | finalizing | done
    ended: bool = False                       # end_of_speech already emitted
    text: list[int] = field(default_factory=list)
    fed: int = 0
    events: list[StreamEvent] = field(default_factory=list)
    text_at_first_event: int | None = None
    opened_at: float = field(default_factory=time.perf_counter)

    @property
    def prompt_embedding(self) -> np.ndarray:
        return self.decoder.prompt_embedding

    @property
    def extensions(self) -> int:
        return self.decoder.groups

    @property
    def tokens(self) -> list[int]:
        return list(self.decoder.emitted)


def open_session(model: DualBranchModel, prompt_frames, vocab: TextVocab, decode: str = "greedy",
                 seed: int = 0) -> Session:
    """Encode the prompt once; the session never takes a transcript of it."""
    return Session(_Decoder(model, prompt_frames, vocab, decode, seed), vocab)


def _event(s: Session, kind: str, tokens: list[int], truncated: bool = False) -> StreamEvent:
    ev = StreamEvent(kind, tokens, s.decoder.groups, time.perf_counter() - s.opened_at, truncated)
    s.events.append(ev)
    if s.text_at_first_event is None:
        s.text_at_first_event = min(s.fed, len(s.text))
    return ev


def _pump(s: Session, final: bool) -> list[StreamEvent]:
    dec, cfg = s.decoder, s.decoder.cfg
    eos = cfg.V_s - 1
    items = s.text + [s.vocab.eot] if final else s.text
    guard = max_output_tokens(len(s.text), dec.model)
    out: list[StreamEvent] = []
    while not s.ended:
        raw = cfg.lookahead + (dec.groups * cfg.G) // cfg.speech_per_text
        need = text_needed(dec.groups, len(items), cfg) if final else raw
        if need > len(items):
            break
        ok = True
        while s.fed < need and ok:
            ok = dec.feed_text(items[s.fed])
            s.fed += 1
        truncated = not ok
        if ok:
            toks = dec.next_group(guard - len(dec.emitted))
            out.append(_event(s, TOKEN_GROUP, toks))
            if toks[-1] == eos:
                s.ended = True
                out.append(_event(s, END_OF_SPEECH, []))
                break
            truncated = len(dec.emitted) >= guard or not dec.feed_group(toks)
        if truncated:
            s.ended = True
            out.append(_event(s, END_OF_SPEECH, [], truncated=True))
    return out


def push_text(session: Session, text_tokens) -> list[StreamEvent]:
    """Append a text chunk and return the groups it unlocks.

    Once the model has ended the speech (EOS or guard), further text is
    recorded but produces no events.
    """
    if session.status != "open":
        raise StateError(f"push_text on a session that is {session.status}")
    toks = _check_text(text_tokens, session.vocab)
    if not toks:
        return []
    session.text.extend(toks)
    return _pump(session, final=False)


def finalize(session: Session) -> list[StreamEvent]:
    """Mark the text complete and generate until EOS or the length guard."""
    if session.status != "open":
        raise StateError(f"finalize on a session that is {session.status}")
    session.status = "finalizing"
    events = _pump(session, final=True)
    session.status = "done"
    return events


def stream_tokens(events: list[StreamEvent]) -> list[int]:
    return [t for ev in events if ev.kind == TOKEN_GROUP for t in ev.tokens]


def _validate_events(events: list[StreamEvent]) -> None:
    if not events or events[-1].kind != END_OF_SPEECH:
        raise StateError("event stream must end with end_of_speech")
    for ev in events[:-1]:
        if ev.kind != TOKEN_GROUP or not ev.tokens:
            raise StateError("only nonempty token groups may precede end_of_speech")


def chunked_vocode(cfm: CFMModel, events: list[StreamEvent], chunk: int, steps: int = 16,
                   seed: int = 0) -> list[np.ndarray]:
    """Decode ``chunk`` token groups at a time, each chunk seeing one neighbour token per side.

    Returns the per-chunk frame blocks; their concatenation equals
    ``euler_sample`` on the whole token sequence.
    """
    if chunk < 1:
        raise ArgumentError("chunk must be >= 1")
    _validate_events(events)
    eos = cfm.cfg.V_s - 1
    groups = [[t for t in ev.tokens if t != eos] for ev in events[:-1]]
    groups = [g for g in groups if g]
    flat = [t for g in groups for t in g]
    out, start = [], 0
    for c in range(0, len(groups), chunk):
        toks = [t for g in groups[c:c + chunk] for t in g]
        end = start + len(toks)
        left = flat[start - 1] if start > 0 else None
        right = flat[end] if end < len(flat) else None
        out.append(euler_sample(cfm, toks, steps, seed, start=start, context=(left, right)))
        start = end
    return out


@dataclass
class LatencyReport:
    first_event_step: int
    first_event_text_tokens: int
    tokens_per_extension: list[int]
    extensions: int
    tokens: int
    truncated: bool
    first_event_seconds: float
    total_seconds: float

    def to_record(self) -> dict:
        """Deterministic part; wall-clock figures go to :meth:`timing`."""
        full = self.tokens_per_extension[:-1]
        return {"first_event_step": self.first_event_step,
                "first_event_text_tokens": self.first_event_text_tokens,
                "extensions": self.extensions, "tokens": self.tokens,
                "tokens_per_extension_before_eos": (sum(full) / len(full)) if full else None,
                "tokens_per_extension": self.tokens_per_extension, "truncated": self.truncated}

    def timing(self) -> dict:
        rate = self.tokens / self.total_seconds if self.total_seconds > 0 else None
        return {"first_event_seconds": self.first_event_seconds, "total_seconds": self.total_seconds,
                "tokens_per_second": rate}


def latency_report(session: Session) -> LatencyReport:
    if session.status != "done":
        raise StateError("latency_report needs a finished session")
    groups = [ev for ev in session.events if ev.kind == TOKEN_GROUP]
    first = session.events[0]
    return LatencyReport(
        first_event_step=first.step,
        first_event_text_tokens=session.text_at_first_event or 0,
        tokens_per_extension=[len(ev.tokens) for ev in groups],
        extensions=session.extensions,
        tokens=sum(len(ev.tokens) for ev in groups),
        truncated=session.events[-1].truncated,
        first_event_seconds=first.timestamp,
        total_seconds=session.events[-1].timestamp,
    )
