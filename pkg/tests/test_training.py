import numpy as np
import pytest

from conftest import small_config
from goat_tts.errors import ArgumentError, DataError
from goat_tts.model.network import DualBranchModel, param_group
from goat_tts.model.sequence import IGNORE, assemble_training_sequence
from goat_tts.numerics.tensor import no_grad
from goat_tts.toy_world import build_alignment_pairs, build_quadruples, gen_corpus
from goat_tts.training import (SCHEDULE, StageSpec, assemble_all, batch_order, full_finetune_baseline,
                               pretrain_text, text_perplexity, text_probe_logits, train_align_step1,
                               train_align_step2, train_generate_step1, train_generate_step2)


@pytest.fixture(scope="module")
def data(world):
    corpus = gen_corpus(0, world, 260)
    pairs = build_alignment_pairs(corpus[:40], "transcript", world)
    tts = build_alignment_pairs(corpus[:40], "tts", world, seed=1)
    quads, _ = build_quadruples(corpus, world)
    return pairs, tts, quads[:24]


def _spec(stage, step, **kw):
    return StageSpec(stage, step, epochs=kw.pop("epochs", 2), batch_size=8, **kw)


def _changed_groups(report):
    return {param_group(n) for n in report.changed}


def test_schedule_freeze_sets():
    assert SCHEDULE[("align", 1)] == {"projector"}
    assert SCHEDULE[("align", 2)] == {"encoder", "projector"}
    assert SCHEDULE[("generate", 1)] == SCHEDULE[("generate", 2)] == {"speech_branch", "mtp"}
    assert not ({"encoder", "projector"} & SCHEDULE[("baseline", 0)])
    with pytest.raises(ArgumentError):
        StageSpec("align", 3)
    with pytest.raises(ArgumentError):
        StageSpec("align", 1, epochs=-1)


def test_batch_order_covers_each_item_once():
    rng = np.random.default_rng(0)
    lengths = list(rng.integers(1, 50, size=101))
    batches = batch_order(lengths, 8, np.random.default_rng(1))
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(101))
    again = batch_order(lengths, 8, np.random.default_rng(1))
    assert all(np.array_equal(a, b) for a, b in zip(batches, again))


def test_full_schedule_freeze_conformance(data, vocab):
    pairs, tts, quads = data
    m = DualBranchModel(small_config())
    reports = [
        pretrain_text(m, pairs, vocab, _spec("pretrain", 0)),
        train_align_step1(m, [p for p in pairs if p.dialect == 0], vocab, _spec("align", 1)),
        train_align_step2(m, tts, vocab, _spec("align", 2)),
        train_generate_step1(m, quads, vocab, _spec("generate", 1)),
        train_generate_step2(m, quads, vocab, _spec("generate", 2)),
    ]
    for r in reports:
        assert r.freeze_ok, r.stage
        spec_groups = SCHEDULE[(r.stage, r.step)]
        assert _changed_groups(r) <= spec_groups
        assert _changed_groups(r), "every step should move something"
    assert _changed_groups(reports[1]) == {"projector"}
    assert reports[2].data_mix["dialect"].keys() == {0, 1, 2, 3}
    assert "text_query" in reports[3].data_mix


def test_pretrain_forks_speech_branch(data, vocab):
    pairs, _, _ = data
    m = DualBranchModel(small_config())
    pretrain_text(m, pairs, vocab, _spec("pretrain", 0))
    for n in m.params.params:
        if n.startswith("speech.") and not n.startswith("speech.head"):
            assert np.array_equal(m.params[n], m.params["text." + n[7:]])


def test_stage_two_leaves_text_branch_bitwise(data, vocab):
    pairs, _, quads = data
    m = DualBranchModel(small_config())
    probe, _ = assemble_all(pairs[:8], "pretrain", m.cfg, vocab)
    before = text_probe_logits(m, probe)
    train_generate_step1(m, quads, vocab, _spec("generate", 1, epochs=1))
    train_generate_step2(m, quads, vocab, _spec("generate", 2, epochs=1))
    assert np.array_equal(before, text_probe_logits(m, probe))


def test_baseline_moves_bottom_layers(data, vocab):
    _, _, quads = data
    m = DualBranchModel(small_config(), tied=True)
    r = full_finetune_baseline(m, quads, vocab, _spec("baseline", 0, epochs=1))
    assert r.freeze_ok
    assert "bottom" in _changed_groups(r)
    assert not ({"encoder", "projector"} & _changed_groups(r))
    with pytest.raises(ArgumentError):
        full_finetune_baseline(DualBranchModel(small_config()), quads, vocab)


def test_losses_decrease(data, vocab):
    pairs, _, quads = data
    m = DualBranchModel(small_config())
    r = pretrain_text(m, pairs, vocab, _spec("pretrain", 0, epochs=4, lr=3e-3))
    assert r.epoch_loss[-1] < r.epoch_loss[0]
    r = train_generate_step1(m, quads, vocab, _spec("generate", 1, epochs=4, lr=3e-3))
    assert r.epoch_loss[-1] < r.epoch_loss[0]


def test_training_is_reproducible(data, vocab):
    pairs, _, quads = data

    def run():
        m = DualBranchModel(small_config())
        pretrain_text(m, pairs[:16], vocab, _spec("pretrain", 0, epochs=1))
        train_generate_step1(m, quads[:8], vocab, _spec("generate", 1, epochs=1))
        return m.params.checksum()

    assert run() == run()


def test_identical_items_identical_losses(data, vocab):
    pairs, _, _ = data
    m = DualBranchModel(small_config())
    seqs = [assemble_training_sequence(pairs[0], "align", m.cfg, vocab) for _ in range(3)]
    with no_grad():
        losses = m.text_loss(m.consts(), m.make_batch(seqs), per_item=True)
    assert losses[0] == losses[1] == losses[2]


def test_loss_ignores_non_target_positions(data, vocab):
    _, _, quads = data
    m = DualBranchModel(small_config())
    seq = assemble_training_sequence(quads[0], "generate", m.cfg, vocab)
    with no_grad():
        base = float(m.speech_loss(m.consts(), m.make_batch([seq])).data)
        # text targets are unused in generate mode; rewriting them changes nothing
        seq.text_targets = np.full_like(seq.text_targets, 3)
        assert float(m.speech_loss(m.consts(), m.make_batch([seq])).data) == base
        # padding slots of a short final group are ignored whatever they hold
        pad = seq.group_targets == IGNORE
        if pad.any():
            seq.group_prev = np.where(pad, 7, seq.group_prev)
            assert float(m.speech_loss(m.consts(), m.make_batch([seq])).data) == pytest.approx(base, abs=0)


def test_generate_step2_rejects_text_queries(data, vocab):
    _, _, quads = data
    m = DualBranchModel(small_config())
    kinds = ["text"] * 3 + ["speech"] * (len(quads) - 3)
    r = train_generate_step2(m, quads, vocab, _spec("generate", 2, epochs=1), query_kinds=kinds)
    assert r.skipped["no_speech_query"] == 3 and r.items == len(quads) - 3
    with pytest.raises(DataError):
        train_generate_step2(m, quads[:2], vocab, _spec("generate", 2, epochs=1), query_kinds=["text", "text"])


@pytest.mark.parametrize("fn", [train_align_step1, train_align_step2, train_generate_step1, train_generate_step2,
                                pretrain_text])
def test_empty_data_is_an_argument_error(fn, vocab):
    with pytest.raises(ArgumentError):
        fn(DualBranchModel(small_config()), [], vocab)


def test_text_perplexity_is_finite(data, vocab):
    pairs, _, _ = data
    m = DualBranchModel(small_config())
    seqs, _ = assemble_all(pairs[:8], "pretrain", m.cfg, vocab)
    ppl = text_perplexity(m, seqs)
    assert 1.0 < ppl < 10 * vocab.size
