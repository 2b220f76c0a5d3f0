"""The dual-branch network.

Parameter groups (name prefixes):

    enc.*            speech encoder (2 convs + 2 bidirectional blocks)
    proj.*           projector (3 convs, middle one stride 2, + linear)
    emb.text emb.pos LLM token / position tables
    bottom.{i}.*     shared foundational layers, i < N
    text.*           text branch: top-K blocks, final norm, text head
    speech.*         speech branch: top-K blocks, final norm, speech head
    emb.speech       speech-token input table (row V_s is the group BOS)
    emb.item         text-item index table (generate streams only)
    emb.cursor       response-cursor table (generate streams only)
    mtp.*            multi-token prediction sub-heads
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ArgumentError
from ..numerics import nn
from ..numerics import tensor as T
from ..numerics.params import ParamStore
from ..numerics.tensor import Tensor
from .config import ModelConfig
from .sequence import IGNORE, SPEECH, TEXT, TrainingSequence, projected_length

GROUPS = ("encoder", "projector", "llm_embed", "bottom", "text_branch", "speech_branch", "mtp")


def param_group(name: str) -> str:
    if name.startswith("enc."):
        return "encoder"
    if name.startswith("proj."):
        return "projector"
    if name in ("emb.text", "emb.pos"):
        return "llm_embed"
    if name.startswith("bottom."):
        return "bottom"
    if name.startswith("text."):
        return "text_branch"
    if name.startswith("speech.") or name in ("emb.speech", "emb.item", "emb.cursor"):
        return "speech_branch"
    if name.startswith("mtp."):
        return "mtp"
    raise KeyError(name)


def _sinusoid(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    ang = pos / (10000.0 ** (2 * i / d))
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def projector_param_count(cfg: ModelConfig) -> int:
    c_in, c, k, d = cfg.enc_channels, cfg.proj_channels, cfg.proj_kernel, cfg.d_model
    return (c * c_in * k + c) + 2 * (c * c * k + c) + (c * d + d)


def init_params(cfg: ModelConfig) -> ParamStore:
    """Fresh parameters; the speech branch starts as a bitwise copy of the text branch."""
    rng = np.random.default_rng(cfg.seed)
    s = ParamStore()
    std, d, F = cfg.init_std, cfg.d_model, cfg.F
    ce, cp, k = cfg.enc_channels, cfg.proj_channels, cfg.proj_kernel

    def conv(name, c_out, c_in, kk):
        s.add(f"{name}.w", rng.normal(0.0, 1.0 / np.sqrt(c_in * kk), (c_out, c_in, kk)))
        s.add(f"{name}.b", np.zeros(c_out))

    conv("enc.conv1", ce, F, 3)
    conv("enc.conv2", ce, ce, 3)
    s.add("enc.pos", 0.1 * _sinusoid(cfg.enc_max_len, ce))
    for i in range(cfg.enc_layers):
        nn.init_block(s, f"enc.layer{i}", ce, rng, std=1.0 / np.sqrt(ce))
    s.add("enc.ln_f.g", np.ones(ce))
    s.add("enc.ln_f.b", np.zeros(ce))

    conv("proj.conv1", cp, ce, k)
    conv("proj.conv2", cp, cp, k)
    conv("proj.conv3", cp, cp, k)
    s.add("proj.out.w", rng.normal(0.0, 1.0 / np.sqrt(cp), (cp, d)))
    s.add("proj.out.b", np.zeros(d))

    s.add("emb.text", rng.normal(0.0, 1.0, (cfg.V_t, d)))
    # learned absolute positions, sinusoidally initialised
    s.add("emb.pos", 0.5 * _sinusoid(cfg.context, d))
    for i in range(cfg.N):
        nn.init_block(s, f"bottom.{i}", d, rng, std=std)
    for i in range(cfg.K):
        nn.init_block(s, f"text.{i}", d, rng, std=std)
    s.add("text.ln_f.g", np.ones(d))
    s.add("text.ln_f.b", np.zeros(d))
    s.add("text.head.w", rng.normal(0.0, std, (d, cfg.V_t)))
    copy_text_to_speech(s, cfg)
    s.add("speech.head.w", rng.normal(0.0, cfg.head_std, (d, cfg.V_s)))
    s.add("speech.head.b", np.zeros(cfg.V_s))
    s.add("emb.speech", rng.normal(0.0, 1.0, (cfg.V_s + 1, d)))
    # item and cursor tables start equal, so index i of one matches index i of the
    # other; a random rotation keeps them off the position table's directions
    rot, _ = np.linalg.qr(rng.normal(size=(d, d)))
    s.add("emb.item", 0.5 * _sinusoid(cfg.context, d) @ rot)
    s.add("emb.cursor", 0.5 * _sinusoid(cfg.context, d) @ rot)
    s.add("mtp.prev.w", rng.normal(0.0, cfg.head_std, (d, d)))
    for i in range(cfg.G):
        s.add(f"mtp.sub{i}.w", rng.normal(0.0, cfg.head_std, (2 * d, d)))
        s.add(f"mtp.sub{i}.b", np.zeros(d))
    return s


def copy_text_to_speech(store: ParamStore, cfg: ModelConfig) -> None:
    """(Re)create the speech top-K blocks and final norm as copies of the text branch."""
    for name in list(store.params):
        if name.startswith("text.") and not name.startswith("text.head"):
            target = "speech." + name[len("text."):]
            if target in store.params:
                store.params[target][...] = store.params[name]
                store.reset_state(target)
            else:
                store.add(target, store.params[name].copy(), frozen=store.frozen[name])


@dataclass
class Batch:
    """Padded batch: query right-aligned to a shared column, stream left-aligned after it."""
    text_ids: np.ndarray      # [B, T]
    speech_ids: np.ndarray    # [B, T]
    is_text: np.ndarray       # [B, T, 1] float
    is_speech: np.ndarray     # [B, T, 1] float
    pos_ids: np.ndarray       # [B, T]
    item_ids: np.ndarray      # [B, T], 0 where unused
    cursor_ids: np.ndarray    # [B, T], 0 where unused
    has_item: np.ndarray      # [B, T, 1] float
    has_cursor: np.ndarray    # [B, T, 1] float
    key_mask: np.ndarray      # [B, T] bool
    prompt_rows: list         # (b, start column, frames or cached embedding, is_cached)
    stream_start: int         # column of stream position 0
    seqs: list


class DualBranchModel:
    def __init__(self, cfg: ModelConfig, params: ParamStore | None = None, tied: bool = False):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)
        # tied=True: single-branch baseline, the speech path runs through text.* blocks
        self.tied = tied

    # ------------------------------------------------------------ plumbing
    def leaves(self, dtype=np.float32) -> dict[str, Tensor]:
        return self.params.leaf_tensors(dtype)

    def consts(self) -> dict[str, Tensor]:
        return {n: Tensor(a, name=n) for n, a in self.params.params.items()}

    def speech_prefix(self) -> str:
        return "text" if self.tied else "speech"

    # ------------------------------------------------------------ sub-networks
    def encode_speech(self, p, frames) -> Tensor:
        """[T_f, F] frames -> [ceil(T_f / stride), enc_channels] latents."""
        cfg = self.cfg
        x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=p["enc.conv1.w"].dtype))
        if x.ndim != 2 or x.shape[0] < 1:
            raise ArgumentError("encode_speech needs a nonempty [T_f, F] frame matrix")
        if x.shape[0] > cfg.enc_max_len * cfg.enc_stride:
            raise ArgumentError("prompt longer than the encoder position table")
        h = T.reshape(x, (1,) + x.shape)
        h = T.gelu(T.conv1d(h, p["enc.conv1.w"], p["enc.conv1.b"], stride=1, padding=1))
        h = T.gelu(T.conv1d(h, p["enc.conv2.w"], p["enc.conv2.b"], stride=cfg.enc_stride, padding=1))
        L = h.shape[1]
        h = T.add(h, p["enc.pos"][:L])
        for i in range(cfg.enc_layers):
            h = nn.transformer_block(h, p, f"enc.layer{i}", cfg.enc_heads, causal=False)
        h = T.layer_norm(h, p["enc.ln_f.g"], p["enc.ln_f.b"])
        return T.reshape(h, (L, cfg.enc_channels))

    def project(self, p, latent: Tensor) -> Tensor:
        """Three 1-D convs (middle stride 2) then a linear map to d_model."""
        if latent.ndim != 2 or latent.shape[0] < 1:
            raise ArgumentError("project needs a nonempty latent sequence")
        k = self.cfg.proj_kernel
        h = T.reshape(latent, (1,) + latent.shape)
        h = T.gelu(T.conv1d(h, p["proj.conv1.w"], p["proj.conv1.b"], stride=1, padding=k // 2))
        h = T.gelu(T.conv1d(h, p["proj.conv2.w"], p["proj.conv2.b"], stride=2, padding=k // 2))
        h = T.gelu(T.conv1d(h, p["proj.conv3.w"], p["proj.conv3.b"], stride=1, padding=k // 2))
        h = nn.linear(h, p["proj.out.w"], p["proj.out.b"])
        return T.reshape(h, (h.shape[1], self.cfg.d_model))

    def embed_prompt(self, p, frames) -> Tensor:
        return self.project(p, self.encode_speech(p, frames))

    def cache_prompts(self, seqs: list[TrainingSequence]) -> None:
        """Store projected prompt embeddings on each sequence (call only while encoder and projector are frozen)."""
        p = self.consts()
        with T.no_grad():
            for s in seqs:
                for qi, (kind, val) in enumerate(s.query):
                    if kind == SPEECH:
                        s.prompt_cache[qi] = self.embed_prompt(p, val).data

    def _check_context(self, x: Tensor):
        if x.shape[1] > self.cfg.context:
            raise ArgumentError(f"sequence length {x.shape[1]} exceeds context {self.cfg.context}")

    def backbone(self, p, x: Tensor, key_mask=None) -> Tensor:
        self._check_context(x)
        for i in range(self.cfg.N):
            x = nn.transformer_block(x, p, f"bottom.{i}", self.cfg.n_heads, True, key_mask)
        return x

    def top(self, p, x: Tensor, prefix: str, key_mask=None) -> Tensor:
        for i in range(self.cfg.K):
            x = nn.transformer_block(x, p, f"{prefix}.{i}", self.cfg.n_heads, True, key_mask)
        return T.layer_norm(x, p[f"{prefix}.ln_f.g"], p[f"{prefix}.ln_f.b"])

    def forward_text_branch(self, p, emb: Tensor, key_mask=None) -> Tensor:
        """Embeddings [B, T, d] -> text logits [B, T, V_t] (bottom-N, text top-K, text head)."""
        h = self.top(p, self.backbone(p, emb, key_mask), "text", key_mask)
        return T.matmul(h, p["text.head.w"])

    def text_hidden(self, p, emb: Tensor, key_mask=None) -> Tensor:
        return self.top(p, self.backbone(p, emb, key_mask), "text", key_mask)

    def forward_speech_branch(self, p, emb: Tensor, key_mask=None) -> Tensor:
        """Embeddings [B, T, d] -> speech-branch hidden states [B, T, d]."""
        return self.top(p, self.backbone(p, emb, key_mask), self.speech_prefix(), key_mask)

    def mtp_logits(self, p, hidden: Tensor, prev: np.ndarray) -> Tensor:
        """hidden [n, d], prev [n, G] teacher-forced previous tokens -> logits [n, G, V_s]."""
        n, G = prev.shape
        pe = T.matmul(T.embedding(p["emb.speech"], prev), p["mtp.prev.w"])  # [n, G, d]
        outs = []
        for i in range(G):
            z = T.concat([hidden, pe[:, i, :]], axis=-1)
            z = T.gelu(nn.linear(z, p[f"mtp.sub{i}.w"], p[f"mtp.sub{i}.b"]))
            outs.append(T.reshape(nn.linear(z, p["speech.head.w"], p["speech.head.b"]), (n, 1, self.cfg.V_s)))
        return T.concat(outs, axis=1)

    def mtp_sub_logits(self, p, hidden: np.ndarray, prev_token: int, i: int) -> np.ndarray:
        """Logits of sub-head i for one hidden vector (inference, no graph)."""
        pe = p["emb.speech"].data[prev_token] @ p["mtp.prev.w"].data
        z = np.concatenate([hidden, pe])[None, :]
        z = T.gelu(Tensor(z @ p[f"mtp.sub{i}.w"].data + p[f"mtp.sub{i}.b"].data)).data
        return (z @ p["speech.head.w"].data + p["speech.head.b"].data)[0]

    # ------------------------------------------------------------ batching
    def make_batch(self, seqs: list[TrainingSequence]) -> Batch:
        cfg = self.cfg
        qlens = [sum(projected_length(len(v), cfg) if k == SPEECH else 1 for k, v in s.query) for s in seqs]
        qmax = max(qlens)
        width = qmax + max(len(s.stream) for s in seqs)
        B = len(seqs)
        text_ids = np.full((B, width), 0, np.int64)
        speech_ids = np.full((B, width), 0, np.int64)
        is_text = np.zeros((B, width, 1), np.float32)
        is_speech = np.zeros((B, width, 1), np.float32)
        pos_ids = np.zeros((B, width), np.int64)
        item_ids = np.zeros((B, width), np.int64)
        cursor_ids = np.zeros((B, width), np.int64)
        has_item = np.zeros((B, width, 1), np.float32)
        has_cursor = np.zeros((B, width, 1), np.float32)
        key_mask = np.zeros((B, width), bool)
        prompt_rows = []
        for b, (s, ql) in enumerate(zip(seqs, qlens)):
            col = qmax - ql
            for qi, (kind, val) in enumerate(s.query):
                if kind == SPEECH:
                    n = projected_length(len(val), cfg)
                    prompt_rows.append((b, col, s.prompt_cache.get(qi, val), qi in s.prompt_cache))
                    key_mask[b, col:col + n] = True
                    col += n
                else:
                    text_ids[b, col] = val
                    is_text[b, col] = 1.0
                    key_mask[b, col] = True
                    col += 1
            for j, (kind, tok) in enumerate(s.stream):
                c = qmax + j
                key_mask[b, c] = True
                if kind == TEXT:
                    text_ids[b, c] = tok
                    is_text[b, c] = 1.0
                else:
                    speech_ids[b, c] = tok
                    is_speech[b, c] = 1.0
            if s.cursor_ids is not None:
                cols = slice(qmax, qmax + len(s.stream))
                item_ids[b, cols] = np.maximum(s.item_ids, 0)
                has_item[b, cols, 0] = s.item_ids >= 0
                cursor_ids[b, cols] = s.cursor_ids
                has_cursor[b, cols, 0] = 1.0
            span = np.arange(qmax - ql, qmax + len(s.stream))
            pos_ids[b, span] = cfg.query_capacity - qmax + span
        return Batch(text_ids, speech_ids, is_text, is_speech, pos_ids, item_ids, cursor_ids, has_item,
                     has_cursor, key_mask, prompt_rows, qmax, seqs)

    def embed_batch(self, p, batch: Batch) -> Tensor:
        x = T.mul(T.embedding(p["emb.text"], batch.text_ids), batch.is_text)
        x = T.add(x, T.mul(T.embedding(p["emb.speech"], batch.speech_ids), batch.is_speech))
        x = T.add(x, T.embedding(p["emb.pos"], batch.pos_ids))
        if batch.has_cursor.any():
            x = T.add(x, T.mul(T.embedding(p["emb.item"], batch.item_ids), batch.has_item))
            x = T.add(x, T.mul(T.embedding(p["emb.cursor"], batch.cursor_ids), batch.has_cursor))
        if batch.prompt_rows:
            pieces, bi, ti = [], [], []
            for b, col, frames, cached in batch.prompt_rows:
                e = Tensor(frames) if cached else self.embed_prompt(p, frames)
                pieces.append(e)
                bi.extend([b] * e.shape[0])
                ti.extend(range(col, col + e.shape[0]))
            x = T.add(x, T.scatter_rows(T.concat(pieces, axis=0), bi, ti, x.shape))
        return x

    # ------------------------------------------------------------ losses
    def text_loss(self, p, batch: Batch, per_item: bool = False):
        """Cross-entropy of the text branch on stream text targets."""
        x = self.embed_batch(p, batch)
        h = self.text_hidden(p, x, batch.key_mask)
        return self._text_targets_loss(p, h, batch, per_item)

    def _text_targets_loss(self, p, h, batch, per_item):
        bi, ti, tg = [], [], []
        for b, s in enumerate(batch.seqs):
            for j, t in enumerate(s.text_targets):
                if t != IGNORE:
                    bi.append(b)
                    ti.append(batch.stream_start + j)
                    tg.append(t)
        rows = T.gather_rows(h, bi, ti)
        logits = T.matmul(rows, p["text.head.w"])
        if not per_item:
            return T.cross_entropy(logits, np.array(tg))
        bi = np.array(bi)
        return [float(T.cross_entropy(Tensor(logits.data[bi == b]), np.array(tg)[bi == b]).data)
                for b in range(len(batch.seqs))]

    def speech_loss(self, p, batch: Batch, return_logits: bool = False):
        """Cross-entropy of the MTP heads on speech-response targets."""
        x = self.embed_batch(p, batch)
        h = self.forward_speech_branch(p, x, batch.key_mask)
        bi, ti, tg, pv = [], [], [], []
        for b, s in enumerate(batch.seqs):
            for j, pos in enumerate(s.group_pos):
                bi.append(b)
                ti.append(batch.stream_start + pos)
                tg.append(s.group_targets[j])
                pv.append(s.group_prev[j])
        rows = T.gather_rows(h, bi, ti)
        logits = self.mtp_logits(p, rows, np.array(pv))
        loss = T.cross_entropy(logits, np.array(tg), ignore_index=IGNORE)
        return (loss, logits, np.array(tg)) if return_logits else loss

    # ------------------------------------------------------------ inference
    def mtp_step(self, p, hidden: np.ndarray, prev_token: int, greedy: bool = True,
                 rng: np.random.Generator | None = None) -> list[int]:
        """Emit up to G speech tokens from one hidden state, stopping after EOS.

        Sub-head i sees the hidden state and the embedding of the token emitted
        just before it (``prev_token`` for i = 0). Greedy ties go to the lowest id.
        """
        if not greedy and rng is None:
            raise ArgumentError("sampled decoding needs a generator")
        eos = self.cfg.V_s - 1
        out: list[int] = []
        prev = prev_token
        for i in range(self.cfg.G):
            logits = self.mtp_sub_logits(p, hidden, prev, i)
            if greedy:
                tok = int(np.argmax(logits))
            else:
                z = logits.astype(np.float64)
                pr = np.exp(z - z.max())
                tok = int(rng.choice(len(pr), p=pr / pr.sum()))
            out.append(tok)
            if tok == eos:
                break
            prev = tok
        return out

    def incremental(self, branch: str = "speech") -> "IncrementalState":
        return IncrementalState(self, branch)


class IncrementalState:
    """KV-cached causal pass over one sequence, extended a few positions at a time."""

    def __init__(self, model: DualBranchModel, branch: str = "speech"):
        if branch not in ("speech", "text"):
            raise ArgumentError(f"unknown branch {branch!r}")
        self.model = model
        self.cfg = model.cfg
        self.p = model.consts()
        self.top = "text" if branch == "text" else model.speech_prefix()
        self.caches = [nn.KVCache() for _ in range(self.cfg.N + self.cfg.K)]
        self.length = 0          # positions processed
        self.first_pos = None    # absolute position of the first processed row
        self.extensions = 0      # calls to extend()

    def text_rows(self, ids) -> np.ndarray:
        return self.p["emb.text"].data[np.asarray(ids, np.int64)]

    def speech_rows(self, ids) -> np.ndarray:
        return self.p["emb.speech"].data[np.asarray(ids, np.int64)]

    def stream_row(self, kind: int, tok: int, item: int, cursor: int) -> np.ndarray:
        """One generate-stream input row, alignment embeddings included (item < 0 on speech)."""
        if kind == TEXT:
            row = self.p["emb.text"].data[tok] + self.p["emb.item"].data[item]
        else:
            row = self.p["emb.speech"].data[tok].copy()
        return row + self.p["emb.cursor"].data[cursor]

    def extend(self, rows: np.ndarray, start_pos: int) -> np.ndarray:
        """Append embedding rows [n, d] at absolute positions start_pos.. and
        return the top hidden state of the last new position."""
        cfg = self.cfg
        n = rows.shape[0]
        if n == 0:
            raise ArgumentError("extend needs at least one row")
        if self.first_pos is None:
            self.first_pos = start_pos
        elif start_pos != self.first_pos + self.length:
            raise ArgumentError("positions must be contiguous")
        if start_pos < 0 or start_pos + n > cfg.context:
            raise ArgumentError(f"position {start_pos + n} exceeds context {cfg.context}")
        pos = self.p["emb.pos"].data[start_pos:start_pos + n]
        with T.no_grad():
            x = Tensor((rows + pos)[None].astype(np.float32))
            for i in range(cfg.N):
                x = nn.transformer_block(x, self.p, f"bottom.{i}", cfg.n_heads, True, None, self.caches[i])
            for i in range(cfg.K):
                x = nn.transformer_block(x, self.p, f"{self.top}.{i}", cfg.n_heads, True, None,
                                         self.caches[cfg.N + i])
            x = T.layer_norm(x, self.p[f"{self.top}.ln_f.g"], self.p[f"{self.top}.ln_f.b"])
        self.length += n
        self.extensions += 1
        return x.data[0, -1]
