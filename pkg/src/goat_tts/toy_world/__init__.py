from .builders import (AlignmentPair, Quadruple, QuadrupleReport, build_alignment_pairs,
                       build_quadruples, descriptor_prefix)
from .codec import Codec, load_codec, margin_report
from .corpus import ToyUtterance, gen_corpus, heldout_split
from .oracle import FAILED, Transcript, oracle_transcribe
from .render import render_speech
from .world import BigramGrammar, TextVocab, WorldConfig, grammar_for, text_vocab, toy_lm_continue

__all__ = [
    "AlignmentPair", "BigramGrammar", "Codec", "FAILED", "Quadruple", "QuadrupleReport",
    "TextVocab", "ToyUtterance", "Transcript", "WorldConfig", "build_alignment_pairs",
    "build_quadruples", "descriptor_prefix", "gen_corpus", "grammar_for", "heldout_split",
    "load_codec", "margin_report", "oracle_transcribe", "render_speech", "text_vocab",
    "toy_lm_continue",
]
