import numpy as np
import pytest

from goat_tts.errors import FormatError
from goat_tts.toy_world import (FAILED, ToyUtterance, WorldConfig, build_alignment_pairs, build_quadruples,
                                gen_corpus, grammar_for, heldout_split, load_codec, margin_report,
                                oracle_transcribe, render_speech, text_vocab, toy_lm_continue)
from goat_tts.toy_world.io import frames_from_bytes, frames_to_bytes, read_jsonl, write_jsonl
from goat_tts.toy_world.render import all_centers, max_jitter_norm

W = WorldConfig()


def test_corpus_deterministic_and_in_range():
    a = gen_corpus(3, W, 50)
    b = gen_corpus(3, W, 50)
    assert [u.to_record() for u in a] == [u.to_record() for u in b]
    assert len(a) == 50
    for u in a:
        assert 1 <= len(u.text) <= W.L_max
        assert all(0 <= t < W.A for t in u.text)
        assert 0 <= u.speaker < W.S and 0 <= u.dialect < W.D and 0 <= u.emotion < W.E
    assert [u.to_record() for u in gen_corpus(4, W, 50)] != [u.to_record() for u in a]


def test_corpus_follows_grammar():
    g = grammar_for(W)
    for u in gen_corpus(1, W, 100):
        for x, y in zip(u.text, u.text[1:]):
            assert g.prob(x, y) > 0


def test_record_roundtrip():
    u = gen_corpus(0, W, 1)[0]
    assert ToyUtterance.from_record(u.to_record()) == u


def test_heldout_split_is_disjoint_and_stable():
    corpus = gen_corpus(0, W, 2000)
    train, held = heldout_split(corpus, 0)
    assert not {u.uid for u in train} & {u.uid for u in held}
    assert len(train) + len(held) == 2000
    assert 0.07 < len(held) / 2000 < 0.13
    assert [u.uid for u in heldout_split(corpus, 0)[1]] == [u.uid for u in held]


def test_lm_continuation_is_greedy_successor_chain():
    g = grammar_for(W)
    vocab = text_vocab(W)
    prefix = [vocab.dialect_token(1), vocab.emotion_token(0), 5, 9]
    cont = toy_lm_continue(prefix, W)
    assert len(cont) == W.C
    prev = 9
    for t in cont:
        assert t == g.successor(prev)
        prev = t
    # descriptors never change the continuation
    assert toy_lm_continue([5, 9], W) == cont


def test_render_shape_dtype_and_determinism():
    u = gen_corpus(0, W, 1)[0]
    f = render_speech(u, W)
    assert f.shape == (W.frames_per_token * len(u.text), W.F) and f.dtype == np.float32
    assert np.array_equal(f, render_speech(u, W))
    assert np.abs(f).max() <= 4.0


def test_jitter_bound():
    centers, labels = all_centers(W)
    lookup = {tuple(l): c for l, c in zip(labels.tolist(), centers)}
    bound = max_jitter_norm(W)
    for u in gen_corpus(5, W, 30):
        f = render_speech(u, W)
        for i, frame in enumerate(f):
            c = lookup[(u.text[i // 2], i % 2, u.speaker, u.dialect, u.emotion)]
            assert np.linalg.norm(frame - c) <= bound + 1e-5


def test_frames_io_roundtrip(tmp_path):
    f = np.random.default_rng(0).normal(size=(7, 16)).astype(np.float32)
    assert np.array_equal(frames_from_bytes(frames_to_bytes(f)), f)
    with pytest.raises(FormatError):
        frames_from_bytes(frames_to_bytes(f)[:-1])
    write_jsonl(tmp_path / "x.jsonl", [{"b": 1, "a": [1, 2]}])
    assert list(read_jsonl(tmp_path / "x.jsonl")) == [{"a": [1, 2], "b": 1}]
    (tmp_path / "bad.jsonl").write_text("{nope\n")
    with pytest.raises(FormatError):
        list(read_jsonl(tmp_path / "bad.jsonl"))


# ---------------------------------------------------------------- codec

def test_codec_margin_property():
    codec = load_codec(W)
    rep = margin_report(codec, W)
    assert rep["margin_gt_2r"] and rep["margin_gt_2r_plus_jitter"]
    assert codec.vocab_size == W.V_s and codec.eos == W.V_s - 1


def test_codec_decode_errors():
    codec = load_codec(W)
    with pytest.raises(FormatError):
        codec.decode([1, 2])              # no EOS
    with pytest.raises(FormatError):
        codec.decode([codec.eos, 1, codec.eos])
    with pytest.raises(FormatError):
        codec.decode([-1, codec.eos])
    assert codec.decode([codec.eos]).shape == (0, W.F)


def test_codec_roundtrip_idempotent_random_sequences():
    codec = load_codec(W)
    rng = np.random.default_rng(0)
    for _ in range(200):
        toks = np.append(rng.integers(0, codec.eos, size=rng.integers(0, 40)), codec.eos)
        assert np.array_equal(codec.encode(codec.decode(toks)), toks)


def test_codec_keeps_phoneme_and_dialect():
    codec = load_codec(W)
    for u in gen_corpus(11, W, 60):
        tr = oracle_transcribe(codec.decode(codec.encode(render_speech(u, W))), W)
        assert tr.text == list(u.text) and tr.dialect == u.dialect


# ---------------------------------------------------------------- oracle

def test_oracle_inverts_renderer():
    for u in gen_corpus(2, W, 100):
        tr = oracle_transcribe(render_speech(u, W), W)
        assert (tr.text, tr.speaker, tr.dialect, tr.emotion) == (list(u.text), u.speaker, u.dialect, u.emotion)


def test_oracle_flags_far_frames_and_empty_input():
    u = gen_corpus(0, W, 1)[0]
    f = render_speech(u, W).copy()
    f[0] = 50.0
    tr = oracle_transcribe(f, W)
    assert tr.failed and tr.text[0] == FAILED
    empty = oracle_transcribe(np.zeros((0, W.F), np.float32), W)
    assert empty.text == [] and empty.dialect is None


def test_oracle_repeated_phoneme_split_by_slot():
    u = ToyUtterance(0, (4, 4, 4), 0, 1, 2)
    assert oracle_transcribe(render_speech(u, W), W).text == [4, 4, 4]


# ---------------------------------------------------------------- builders

def test_alignment_pairs_transcript_strategy():
    corpus = gen_corpus(0, W, 20)
    pairs = build_alignment_pairs(corpus, "transcript", W)
    vocab = text_vocab(W)
    for p, u in zip(pairs, corpus):
        assert p.transcript == list(u.text)
        assert p.descriptor_prefix == [vocab.dialect_token(u.dialect), vocab.emotion_token(u.emotion)]
        assert p.continuation == toy_lm_continue(p.descriptor_prefix + list(u.text), W)
        assert np.array_equal(p.prompt_frames, render_speech(u, W))


def test_alignment_pairs_tts_strategy_balances_dialects():
    pairs = build_alignment_pairs(gen_corpus(0, W, 40), "tts", W, seed=3)
    counts = np.bincount([p.dialect for p in pairs], minlength=W.D)
    assert counts.min() == counts.max() == 10
    with pytest.raises(ValueError):
        build_alignment_pairs(gen_corpus(0, W, 2), "nope", W)
    with pytest.raises(ValueError):
        build_alignment_pairs([], "tts", W)


def test_quadruples_share_voice_and_count_skips():
    corpus = gen_corpus(0, W, 300)
    quads, rep = build_quadruples(corpus, W)
    by_uid = {u.uid: u for u in corpus}
    codec = load_codec(W)
    for q in quads:
        a, b = by_uid[q.uid], by_uid[q.response_uid]
        assert (a.speaker, a.dialect, a.emotion) == (b.speaker, b.dialect, b.emotion) == (q.speaker, q.dialect, q.emotion)
        assert q.text_query == list(a.text) and q.text_response == list(b.text)
        assert q.speech_response[-1] == codec.eos
        assert len(q.speech_response) == W.frames_per_token * len(b.text) + 1
    assert 2 * rep.quadruples + rep.skipped_utterances == len(corpus)
    assert sum(rep.per_dialect.values()) == rep.quadruples
