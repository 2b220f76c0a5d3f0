"""Finite-difference gradient cases shared by the unit tests and the acceptance run.

Every case is a function of a seed returning the max relative error between
analytic and numeric gradients, computed in float64.
"""
import numpy as np

from conftest import tiny_config
from goat_tts.flow_matching import CFMConfig, CFMModel, init_cfm
from goat_tts.model.network import DualBranchModel, param_group
from goat_tts.model.sequence import IGNORE, assemble_training_sequence
from goat_tts.numerics import ParamStore, check_gradients, nn
from goat_tts.numerics import tensor as T
from goat_tts.numerics.tensor import Tensor
from goat_tts.toy_world import WorldConfig, build_quadruples, gen_corpus, text_vocab

SEEDS = range(5)


def _rand(rng, *shape):
    return rng.normal(size=shape)


# Each case: (builder over named leaves, input factory(rng), frozen names)
def _cases():
    def weighted(t, rng_shape_seed=99):
        w = np.random.default_rng(rng_shape_seed).normal(size=t.shape)
        return T.tsum(T.mul(t, w))

    return {
        "add_broadcast": (lambda v: weighted(T.add(v["a"], v["b"])),
                          lambda r: {"a": _rand(r, 3, 4), "b": _rand(r, 4)}, ()),
        "sub": (lambda v: weighted(T.sub(v["a"], v["b"])),
                lambda r: {"a": _rand(r, 2, 3), "b": _rand(r, 2, 1)}, ()),
        "mul": (lambda v: weighted(T.mul(v["a"], v["b"])),
                lambda r: {"a": _rand(r, 2, 3), "b": _rand(r, 1, 3)}, ()),
        "gelu": (lambda v: weighted(T.gelu(v["a"])), lambda r: {"a": _rand(r, 4, 5)}, ()),
        "tanh": (lambda v: weighted(T.tanh(v["a"])), lambda r: {"a": _rand(r, 4, 5)}, ()),
        "reshape_transpose": (lambda v: weighted(T.transpose(T.reshape(v["a"], (3, 2, 2)), (2, 0, 1))),
                              lambda r: {"a": _rand(r, 6, 2)}, ()),
        "getitem": (lambda v: weighted(T.getitem(v["a"], (slice(1, 3), [0, 2, 2]))),
                    lambda r: {"a": _rand(r, 4, 3)}, ()),
        "concat": (lambda v: weighted(T.concat([v["a"], v["b"]], axis=1)),
                   lambda r: {"a": _rand(r, 2, 3), "b": _rand(r, 2, 2)}, ()),
        "gather_scatter": (lambda v: weighted(T.scatter_rows(T.gather_rows(v["a"], [0, 1, 1], [2, 0, 2]),
                                                             [1, 0, 1], [0, 1, 2], (2, 3, 4))),
                           lambda r: {"a": _rand(r, 2, 3, 4)}, ()),
        "sum_mean": (lambda v: T.add(weighted(T.tsum(v["a"], axis=1)), T.mean(T.mul(v["a"], v["a"]))),
                     lambda r: {"a": _rand(r, 3, 4)}, ()),
        "matmul_batched": (lambda v: weighted(T.matmul(v["a"], v["b"])),
                           lambda r: {"a": _rand(r, 2, 3, 4), "b": _rand(r, 2, 4, 5)}, ()),
        "matmul_shared_weight": (lambda v: weighted(T.matmul(v["a"], v["b"])),
                                 lambda r: {"a": _rand(r, 2, 3, 4), "b": _rand(r, 4, 5)}, ()),
        "embedding": (lambda v: weighted(T.embedding(v["t"], np.array([[0, 2], [2, 3]]))),
                      lambda r: {"t": _rand(r, 5, 3)}, ()),
        "conv1d_stride2": (lambda v: weighted(T.conv1d(v["x"], v["w"], v["b"], stride=2, padding=1)),
                           lambda r: {"x": _rand(r, 2, 7, 3), "w": _rand(r, 4, 3, 3), "b": _rand(r, 4)}, ()),
        "layer_norm": (lambda v: weighted(T.layer_norm(v["x"], v["g"], v["b"])),
                       lambda r: {"x": _rand(r, 3, 6), "g": _rand(r, 6), "b": _rand(r, 6)}, ()),
        "softmax": (lambda v: weighted(T.softmax(v["x"], axis=-1)), lambda r: {"x": _rand(r, 3, 5)}, ()),
        "log_softmax": (lambda v: weighted(T.log_softmax(v["x"], axis=0)), lambda r: {"x": _rand(r, 4, 3)}, ()),
        "cross_entropy_ignore": (lambda v: T.cross_entropy(v["x"], np.array([1, -100, 4, 0])),
                                 lambda r: {"x": _rand(r, 4, 6)}, ()),
        "attention_masked": (
            lambda v: weighted(nn.multi_head_attention(v["x"], v, "a", 2, True,
                                                       np.array([[True, True, False, True]] * 2))),
            lambda r: {"x": _rand(r, 2, 4, 4), **{f"a.{k}": 0.5 * _rand(r, 4, 4) for k in ("wq", "wk", "wv", "wo")},
                       **{f"a.{k}": 0.1 * _rand(r, 4) for k in ("bq", "bk", "bv", "bo")}}, ()),
    }


def primitive_error(name: str, seed: int) -> float:
    builder, make, frozen = _cases()[name]
    return check_gradients(builder, make(np.random.default_rng(seed)), frozen)


PRIMITIVES = sorted(_cases())


# ---------------------------------------------------------------- sub-networks

def _f64(model):
    return {n: Tensor(a.astype(np.float64), name=n) for n, a in model.params.params.items()}


def _weighted(t, seed=7):
    return T.tsum(T.mul(t, np.random.default_rng(seed).normal(size=t.shape)))


def _subset(p, prefixes):
    return {n: v.data for n, v in p.items() if n.startswith(prefixes)}


def transformer_block(seed):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    nn.init_block(store, "blk", 8, rng, std=0.3)
    inputs = {n: a.astype(np.float64) for n, a in store.params.items()}
    inputs["x"] = rng.normal(size=(2, 5, 8))

    def build(v):
        return _weighted(nn.transformer_block(v["x"], v, "blk", 2), seed + 1)

    return check_gradients(build, inputs, sample=12, seed=seed)


def encoder(seed):
    m = DualBranchModel(tiny_config(seed))
    inputs = _subset(_f64(m), ("enc.",))
    inputs["frames"] = np.random.default_rng(seed).normal(size=(6, 16))
    return check_gradients(lambda v: _weighted(m.encode_speech(v, v["frames"])), inputs,
                           frozen=("enc.pos",), sample=4, seed=seed)


def projector(seed):
    m = DualBranchModel(tiny_config(seed))
    inputs = _subset(_f64(m), ("proj.",))
    inputs["latent"] = np.random.default_rng(seed).normal(size=(5, m.cfg.enc_channels))
    return check_gradients(lambda v: _weighted(m.project(v, v["latent"])), inputs, sample=6, seed=seed)


def _branch_inputs(m, seed, prefixes):
    inputs = _subset(_f64(m), prefixes)
    inputs["x"] = np.random.default_rng(seed).normal(size=(2, 5, m.cfg.d_model))
    return inputs


def text_branch(seed):
    m = DualBranchModel(tiny_config(seed))
    inputs = _branch_inputs(m, seed, ("bottom.", "text."))
    mask = np.ones((2, 5), bool)
    mask[1, 2] = False

    def build(v):
        return T.cross_entropy(T.reshape(m.forward_text_branch(v, v["x"], mask), (10, -1))[2:],
                               np.arange(8) * 3)

    return check_gradients(build, inputs, sample=4, seed=seed)


def speech_branch(seed):
    m = DualBranchModel(tiny_config(seed))
    inputs = _branch_inputs(m, seed, ("bottom.", "speech."))
    inputs = {k: v for k, v in inputs.items() if not k.startswith("speech.head")}
    return check_gradients(lambda v: _weighted(m.forward_speech_branch(v, v["x"])), inputs, sample=4, seed=seed)


def mtp_head(seed):
    m = DualBranchModel(tiny_config(seed))
    inputs = _subset(_f64(m), ("mtp.", "speech.head", "emb.speech"))
    rng = np.random.default_rng(seed)
    inputs["h"] = rng.normal(size=(3, m.cfg.d_model))
    prev = rng.integers(0, m.cfg.V_s + 1, size=(3, m.cfg.G))
    tg = rng.integers(0, m.cfg.V_s, size=(3, m.cfg.G))
    tg[0, 2:] = IGNORE
    return check_gradients(lambda v: T.cross_entropy(m.mtp_logits(v, v["h"], prev), tg), inputs, sample=5, seed=seed)


def full_speech_loss(seed):
    """End to end through prompt encoder, projector, every embedding table and the MTP head."""
    world = WorldConfig()
    vocab = text_vocab(world)
    cfg = tiny_config(seed)
    m = DualBranchModel(cfg)
    quads, _ = build_quadruples(gen_corpus(seed, world, 120), world)
    seqs = [assemble_training_sequence(q, "generate", cfg, vocab) for q in quads if len(q.text_response) < 5][:2]
    batch = m.make_batch(seqs)
    inputs = {n: a.data for n, a in _f64(m).items()}
    frozen = [n for n in inputs if param_group(n) not in ("projector", "speech_branch", "mtp")]
    return check_gradients(lambda v: m.speech_loss(v, batch), inputs, frozen=frozen, sample=2, seed=seed)


def cfm_field(seed):
    cfg = CFMConfig(F=4, V_s=7, emb=3, hidden=6, seed=seed)
    store = init_cfm(cfg)
    rng = np.random.default_rng(seed)
    inputs = {n: a.astype(np.float64) + 0.3 * rng.normal(size=a.shape) for n, a in store.params.items()}
    inputs["x"] = rng.normal(size=(5, 4))
    model = CFMModel(cfg)
    cond, phase = model.frame_conditions(rng.integers(0, 7, size=5))
    t = rng.random(5).astype(np.float32)
    w = rng.normal(size=(5, 4))
    # float64 forward, so a small step keeps truncation error out of the comparison
    return check_gradients(lambda v: T.tsum(T.mul(model.field(v, v["x"], t, cond, phase), w)), inputs, h=1e-5)


SUBNETWORKS = {f.__name__: f for f in (transformer_block, encoder, projector, text_branch, speech_branch,
                                       mtp_head, full_speech_loss, cfm_field)}
