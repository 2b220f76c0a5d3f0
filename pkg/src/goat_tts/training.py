"""Staged training: text pretraining, modality alignment, speech generation, and
the full-finetune comparison arm.

Every step declares which parameter groups it may touch. The step freezes all
other parameters, trains, then proves by per-parameter checksums that nothing
outside its trainable set changed.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DataError
from .model.config import ModelConfig
from .model.network import DualBranchModel, copy_text_to_speech, param_group
from .model.sequence import SequenceTooLong, TrainingSequence, assemble_training_sequence
from .numerics.params import AdamHyper, adam_step
from .numerics.tensor import backward, no_grad
from .toy_world.builders import AlignmentPair, Quadruple
from .toy_world.world import TextVocab

# trainable parameter groups per (stage, step)
SCHEDULE: dict[tuple[str, int], frozenset[str]] = {
    ("pretrain", 0): frozenset({"llm_embed", "bottom", "text_branch"}),
    ("align", 1): frozenset({"projector"}),
    ("align", 2): frozenset({"encoder", "projector"}),
    ("generate", 1): frozenset({"speech_branch", "mtp"}),
    ("generate", 2): frozenset({"speech_branch", "mtp"}),
    ("baseline", 0): frozenset({"llm_embed", "bottom", "text_branch", "speech_branch", "mtp"}),
}

DEFAULT_EPOCHS = {"pretrain": 20, "align": 20, "generate": 40, "baseline": 40}


@dataclass
class StageSpec:
    stage: str
    step: int
    epochs: int = 0           # 0 = stage default
    batch_size: int = 16
    lr: float = 2e-3
    seed: int = 0
    clip: float = 1.0

    def __post_init__(self):
        if (self.stage, self.step) not in SCHEDULE:
            raise ArgumentError(f"no schedule for stage {self.stage!r} step {self.step}")
        if self.epochs == 0:
            self.epochs = DEFAULT_EPOCHS[self.stage]
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ArgumentError("epochs, batch_size and lr must be positive")

    @property
    def trainable_groups(self) -> frozenset[str]:
        return SCHEDULE[(self.stage, self.step)]

    def is_frozen(self, name: str) -> bool:
        return param_group(name) not in self.trainable_groups


@dataclass
class TrainReport:
    stage: str
    step: int
    epoch_loss: list[float] = field(default_factory=list)
    items: int = 0
    skipped: dict[str, int] = field(default_factory=dict)
    data_mix: dict[str, dict[int, int]] = field(default_factory=dict)
    frozen_before: str = ""
    frozen_after: str = ""
    changed: list[str] = field(default_factory=list)
    unfrozen: list[str] = field(default_factory=list)
    wall_time: float = 0.0    # kept out of to_record so reports stay byte-stable

    @property
    def freeze_ok(self) -> bool:
        return self.frozen_before == self.frozen_after and set(self.changed) <= set(self.unfrozen)

    def to_record(self) -> dict:
        return {
            "stage": self.stage, "step": self.step, "items": self.items,
            "epoch_loss": [round(x, 6) for x in self.epoch_loss],
            "skipped": self.skipped,
            "data_mix": {k: {str(a): b for a, b in sorted(v.items())} for k, v in self.data_mix.items()},
            "frozen_checksum_before": self.frozen_before, "frozen_checksum_after": self.frozen_after,
            "changed_params": len(self.changed), "unfrozen_params": len(self.unfrozen),
            "freeze_ok": self.freeze_ok,
        }


def _count(values) -> dict[int, int]:
    out: dict[int, int] = {}
    for v in values:
        out[int(v)] = out.get(int(v), 0) + 1
    return out


def assemble_all(items, mode: str, cfg: ModelConfig, vocab: TextVocab, query_kinds=None):
    """Assemble sequences, skipping (and counting) the ones that overflow the context."""
    seqs, skipped = [], 0
    for i, item in enumerate(items):
        kind = "speech" if query_kinds is None else query_kinds[i]
        try:
            seqs.append(assemble_training_sequence(item, mode, cfg, vocab, kind))
        except SequenceTooLong:
            skipped += 1
    return seqs, skipped


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if total <= max_norm or total == 0.0:
        return grads
    scale = np.float32(max_norm / total)
    return {n: g * scale for n, g in grads.items()}


def batch_order(lengths: list[int], batch_size: int, rng: np.random.Generator, window: int = 8) -> list[np.ndarray]:
    """Seeded minibatches of similar length.

    A random permutation is cut into windows of ``window`` batches; each window
    is sorted by length and split into batches, and the batch order is then
    shuffled. Every item appears exactly once per epoch.
    """
    perm = rng.permutation(len(lengths))
    span = batch_size * window
    batches = []
    for w in range(0, len(perm), span):
        chunk = perm[w:w + span]
        chunk = chunk[np.argsort([lengths[i] for i in chunk], kind="stable")]
        batches.extend(chunk[b:b + batch_size] for b in range(0, len(chunk), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def _loss_fn(model: DualBranchModel, mode: str):
    if mode == "generate":
        return model.speech_loss
    return model.text_loss


def run_step(model: DualBranchModel, seqs: list[TrainingSequence], mode: str, spec: StageSpec,
             report: TrainReport) -> TrainReport:
    """Generic loop: freeze per spec, seeded-permutation minibatches, Adam, checksums."""
    if not seqs:
        raise ArgumentError(f"{spec.stage} step {spec.step}: no usable training items")
    store = model.params
    store.set_frozen(spec.is_frozen)
    for n in store.params:
        store.reset_state(n)
    frozen = [n for n in store.params if store.frozen[n]]
    report.unfrozen = store.trainable()
    before = store.per_param_checksums()
    report.frozen_before = store.checksum(frozen)
    report.items = len(seqs)
    for sq in seqs:
        sq.prompt_cache.clear()
    if not ({"encoder", "projector"} & spec.trainable_groups):
        model.cache_prompts(seqs)
    hyper = AdamHyper(lr=spec.lr)
    rng = np.random.default_rng(spec.seed)
    loss_fn = _loss_fn(model, mode)
    t0 = time.perf_counter()
    lengths = [len(sq.stream) for sq in seqs]
    for _ in range(spec.epochs):
        total, count = 0.0, 0
        for idx in batch_order(lengths, spec.batch_size, rng):
            batch = model.make_batch([seqs[i] for i in idx])
            loss = loss_fn(model.leaves(), batch)
            grads = backward(loss)
            adam_step(store, _clip({n: g for n, g in grads.items() if not store.frozen[n]}, spec.clip), hyper)
            total += float(loss.data) * len(batch.seqs)
            count += len(batch.seqs)
        report.epoch_loss.append(total / count)
    report.wall_time = time.perf_counter() - t0
    report.frozen_after = store.checksum(frozen)
    after = store.per_param_checksums()
    report.changed = [n for n in store.params if before[n] != after[n]]
    return report


def _require_pairs(pairs):
    if not pairs:
        raise ArgumentError("empty training data")
    for p in pairs:
        if not isinstance(p, AlignmentPair):
            raise ArgumentError("expected AlignmentPair items")


def _require_quads(quads):
    if not quads:
        raise ArgumentError("empty training data")
    for q in quads:
        if not isinstance(q, Quadruple):
            raise ArgumentError("expected Quadruple items")


def pretrain_text(model: DualBranchModel, pairs: list[AlignmentPair], vocab: TextVocab,
                  spec: StageSpec | None = None) -> TrainReport:
    """Teach the LLM the toy language from transcripts, then fork the speech branch from it."""
    spec = spec or StageSpec("pretrain", 0)
    _require_pairs(pairs)
    seqs, skipped = assemble_all(pairs, "pretrain", model.cfg, vocab)
    report = TrainReport("pretrain", 0, skipped={"too_long": skipped})
    run_step(model, seqs, "pretrain", spec, report)
    if not model.tied:
        copy_text_to_speech(model.params, model.cfg)
    return report


def _align(model, pairs, vocab, spec, step):
    _require_pairs(pairs)
    seqs, skipped = assemble_all(pairs, "align", model.cfg, vocab)
    report = TrainReport("align", step, skipped={"too_long": skipped})
    report.data_mix = {"dialect": _count(p.dialect for p in pairs), "emotion": _count(p.emotion for p in pairs)}
    return run_step(model, seqs, "align", spec, report)


def train_align_step1(model, pairs, vocab, spec: StageSpec | None = None) -> TrainReport:
    """Projector only, on base-dialect (id 0) pairs; the LLM and encoder stay fixed."""
    return _align(model, pairs, vocab, spec or StageSpec("align", 1), 1)


def train_align_step2(model, pairs, vocab, spec: StageSpec | None = None) -> TrainReport:
    """Encoder and projector on a dialect/emotion-balanced mix."""
    return _align(model, pairs, vocab, spec or StageSpec("align", 2), 2)


def train_generate_step1(model, quads: list[Quadruple], vocab, spec: StageSpec | None = None,
                         base_dialect: int = 0) -> TrainReport:
    """Cold start: base-dialect items use text queries, other dialects speech queries."""
    spec = spec or StageSpec("generate", 1)
    _require_quads(quads)
    kinds = ["text" if q.dialect == base_dialect else "speech" for q in quads]
    seqs, skipped = assemble_all(quads, "generate", model.cfg, vocab, kinds)
    report = TrainReport("generate", 1, skipped={"too_long": skipped})
    report.data_mix = {"dialect": _count(q.dialect for q in quads),
                       "text_query": _count(q.dialect for q, k in zip(quads, kinds) if k == "text")}
    return run_step(model, seqs, "generate", spec, report)


def train_generate_step2(model, quads: list[Quadruple], vocab, spec: StageSpec | None = None,
                         query_kinds: list[str] | None = None) -> TrainReport:
    """Prompt-driven generation: every item must carry a speech query.

    ``query_kinds`` lets a caller hand over items already tagged with their query
    modality; any item tagged "text" is rejected and counted.
    """
    spec = spec or StageSpec("generate", 2)
    _require_quads(quads)
    kinds = query_kinds or ["speech"] * len(quads)
    if len(kinds) != len(quads):
        raise ArgumentError("query_kinds must match the item count")
    keep, rejected = [], 0
    for q, k in zip(quads, kinds):
        if k != "speech" or q.speech_query is None or len(q.speech_query) == 0:
            rejected += 1
        else:
            keep.append(q)
    if not keep:
        raise DataError("no items with speech queries")
    seqs, skipped = assemble_all(keep, "generate", model.cfg, vocab)
    report = TrainReport("generate", 2, skipped={"too_long": skipped, "no_speech_query": rejected})
    report.data_mix = {"dialect": _count(q.dialect for q in keep)}
    return run_step(model, seqs, "generate", spec, report)


def full_finetune_baseline(model: DualBranchModel, quads: list[Quadruple], vocab,
                           spec: StageSpec | None = None) -> TrainReport:
    """Single-branch arm: every transformer layer trains on speech; only encoder and projector stay frozen."""
    if not model.tied:
        raise ArgumentError("the baseline arm needs a tied (single-branch) model")
    spec = spec or StageSpec("baseline", 0)
    _require_quads(quads)
    seqs, skipped = assemble_all(quads, "generate", model.cfg, vocab)
    report = TrainReport("baseline", 0, skipped={"too_long": skipped})
    report.data_mix = {"dialect": _count(q.dialect for q in quads)}
    return run_step(model, seqs, "generate", spec, report)


# ---------------------------------------------------------------- probes

def text_probe_logits(model: DualBranchModel, seqs: list[TrainingSequence]) -> np.ndarray:
    """Text-branch logits over a fixed probe batch (no graph)."""
    with no_grad():
        p = model.consts()
        batch = model.make_batch(seqs)
        return model.forward_text_branch(p, model.embed_batch(p, batch), batch.key_mask).data


def text_perplexity(model: DualBranchModel, seqs: list[TrainingSequence], batch_size: int = 32) -> float:
    """exp(mean next-token cross-entropy) of the text path on pretrain-layout sequences."""
    total, count = 0.0, 0
    with no_grad():
        p = model.consts()
        for s in range(0, len(seqs), batch_size):
            chunk = seqs[s:s + batch_size]
            n = sum(int((c.text_targets >= 0).sum()) for c in chunk)
            total += float(model.text_loss(p, model.make_batch(chunk)).data) * n
            count += n
    return float(np.exp(total / count))


def speech_token_accuracy(model: DualBranchModel, seqs: list[TrainingSequence], batch_size: int = 32) -> float:
    """Teacher-forced accuracy of the MTP heads on speech-response tokens."""
    hit, count = 0, 0
    with no_grad():
        p = model.consts()
        for s in range(0, len(seqs), batch_size):
            _, logits, tg = model.speech_loss(p, model.make_batch(seqs[s:s + batch_size]), return_logits=True)
            mask = tg >= 0
            hit += int((logits.data.argmax(-1) == tg)[mask].sum())
            count += int(mask.sum())
    return hit / max(count, 1)


def mean_loss(model: DualBranchModel, seqs: list[TrainingSequence], mode: str, batch_size: int = 32) -> float:
    total, count = 0.0, 0
    fn = _loss_fn(model, mode)
    with no_grad():
        p = model.consts()
        for s in range(0, len(seqs), batch_size):
            chunk = seqs[s:s + batch_size]
            total += float(fn(p, model.make_batch(chunk)).data) * len(chunk)
            count += len(chunk)
    return total / max(count, 1)
