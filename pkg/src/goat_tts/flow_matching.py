"""Token-to-frame decoder trained by conditional flow matching.

Linear (optimal-transport) path from a standard-normal source x0 to the target
frame x1:  x_t = (1 - t) x0 + t x1,  target velocity v = x1 - x0.

The vector field is a per-frame MLP. Its condition is the frame's own speech
token, the tokens one step to either side, and the frame's position inside its
token (the codec emits one token per frame, so "token" here means the codec
token at that frame). Because each frame only sees a +-1 token window and its
source noise is seeded by (seed, absolute frame index), decoding any chunk with
one token of overlap reproduces the full-sequence decode.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DataError
from .numerics import tensor as T
from .numerics.nn import linear
from .numerics.params import AdamHyper, ParamStore, adam_step
from .numerics.tensor import Tensor, backward, no_grad

NEIGHBORHOOD = 1      # tokens of context on each side
_TIME_FREQS = 8


@dataclass(frozen=True)
class CFMConfig:
    F: int = 16
    V_s: int = 257
    emb: int = 16
    hidden: int = 128
    seed: int = 0

    def to_dict(self) -> dict:
        return {"F": self.F, "V_s": self.V_s, "emb": self.emb, "hidden": self.hidden, "seed": self.seed}


def cfm_target(x0, x1, t):
    """(x_t, v_target) on the linear path; t is a scalar or broadcastable array in [0, 1]."""
    x0 = np.asarray(x0)
    x1 = np.asarray(x1)
    t_arr = np.asarray(t, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ArgumentError(f"x0 shape {x0.shape} != x1 shape {x1.shape}")
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0) or np.any(np.isnan(t_arr)):
        raise ArgumentError("t must lie in [0, 1]")
    tt = t_arr.astype(x0.dtype) if x0.dtype.kind == "f" else t_arr
    if tt.ndim == 1 and x0.ndim == 2:
        tt = tt[:, None]
    return (1 - tt) * x0 + tt * x1, x1 - x0


def time_features(t: np.ndarray) -> np.ndarray:
    """Sinusoidal embedding of t, [n] -> [n, 2 * _TIME_FREQS]."""
    freqs = np.pi * (2.0 ** np.arange(_TIME_FREQS))
    ang = np.asarray(t, np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


def init_cfm(cfg: CFMConfig) -> ParamStore:
    rng = np.random.default_rng(cfg.seed)
    s = ParamStore()
    n_in = cfg.F + 2 * _TIME_FREQS + (2 * NEIGHBORHOOD + 1) * cfg.emb + 2
    s.add("cond.emb", rng.normal(0.0, 1.0, (cfg.V_s + 1, cfg.emb)))   # row V_s pads the edges
    s.add("field.w1", rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, cfg.hidden)))
    s.add("field.b1", np.zeros(cfg.hidden))
    s.add("field.w2", rng.normal(0.0, 1.0 / np.sqrt(cfg.hidden), (cfg.hidden, cfg.hidden)))
    s.add("field.b2", np.zeros(cfg.hidden))
    s.add("field.w3", np.zeros((cfg.hidden, cfg.F)))
    s.add("field.b3", np.zeros(cfg.F))
    return s


def condition_ids(tokens: np.ndarray, pad: int) -> np.ndarray:
    """[L] token ids -> [L, 2n+1] window of ids (own token in the middle)."""
    tokens = np.asarray(tokens, np.int64)
    padded = np.concatenate([np.full(NEIGHBORHOOD, pad), tokens, np.full(NEIGHBORHOOD, pad)])
    return np.stack([padded[i:i + len(tokens)] for i in range(2 * NEIGHBORHOOD + 1)], axis=1)


class CFMModel:
    def __init__(self, cfg: CFMConfig, params: ParamStore | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_cfm(cfg)

    def field(self, p, x: Tensor, t: np.ndarray, cond: np.ndarray, phase: np.ndarray) -> Tensor:
        """v_hat(x_t, t, cond) for rows x [n, F]; cond [n, 2n+1] ids; phase [n, 2]."""
        n = x.shape[0]
        c = T.reshape(T.embedding(p["cond.emb"], cond), (n, -1))
        h = T.concat([x, Tensor(time_features(t)), c, Tensor(phase)], axis=-1)
        h = T.gelu(linear(h, p["field.w1"], p["field.b1"]))
        h = T.gelu(linear(h, p["field.w2"], p["field.b2"]))
        return linear(h, p["field.w3"], p["field.b3"])

    def frame_conditions(self, tokens, start: int = 0):
        """Per-frame condition ids and phase features for tokens (one token per frame)."""
        cond = condition_ids(tokens, self.cfg.V_s)
        idx = np.arange(start, start + len(cond))
        phase = np.stack([idx % 2, 1 - idx % 2], axis=1).astype(np.float32)
        return cond, phase


def _strip_eos(tokens, V_s: int) -> np.ndarray:
    tokens = np.asarray(tokens, np.int64)
    if tokens.size and tokens[-1] == V_s - 1:
        tokens = tokens[:-1]
    return tokens


@dataclass
class CFMReport:
    losses: list[float] = field(default_factory=list)
    frames: int = 0

    def to_record(self) -> dict:
        return {"frames": self.frames, "first_loss": round(self.losses[0], 6) if self.losses else None,
                "final_loss": round(float(np.mean(self.losses[-50:])), 6) if self.losses else None,
                "steps": len(self.losses)}


def cfm_train(model: CFMModel, dataset, steps: int = 5000, batch: int = 256, lr: float = 2e-3,
              seed: int = 0, shuffle_conditions: bool = False) -> CFMReport:
    """Regress v_hat onto x1 - x0 over random (x0, t); dataset = [(tokens, frames)].

    Tokens may end in EOS. ``shuffle_conditions`` permutes the frame -> condition
    pairing (a control arm that should train worse).
    """
    conds, phases, targets = [], [], []
    for tokens, frames in dataset:
        toks = _strip_eos(tokens, model.cfg.V_s)
        frames = np.asarray(frames, np.float32)
        if len(toks) != len(frames):
            raise DataError(f"token count {len(toks)} != frame count {len(frames)}")
        c, ph = model.frame_conditions(toks)
        conds.append(c)
        phases.append(ph)
        targets.append(frames)
    if not targets:
        raise ArgumentError("empty flow-matching dataset")
    cond = np.concatenate(conds)
    phase = np.concatenate(phases)
    x1_all = np.concatenate(targets)
    rng = np.random.default_rng(seed)
    if shuffle_conditions:
        perm = rng.permutation(len(cond))
        cond, phase = cond[perm], phase[perm]
    report = CFMReport(frames=len(x1_all))
    hyper = AdamHyper(lr=lr)
    store = model.params
    for _ in range(steps):
        idx = rng.integers(0, len(x1_all), size=min(batch, len(x1_all)))
        x1 = x1_all[idx]
        x0 = rng.standard_normal(x1.shape).astype(np.float32)
        t = rng.random(len(idx)).astype(np.float32)
        xt, v = cfm_target(x0, x1, t)
        p = store.leaf_tensors()
        pred = model.field(p, Tensor(xt), t, cond[idx], phase[idx])
        diff = T.sub(pred, Tensor(v))
        loss = T.mean(T.mul(diff, diff))
        adam_step(store, backward(loss), hyper)
        report.losses.append(float(loss.data))
    return report


def source_noise(seed: int, start: int, n: int, F: int) -> np.ndarray:
    """Standard-normal source rows for absolute frame indices start..start+n-1."""
    out = np.empty((n, F), np.float32)
    for i in range(n):
        out[i] = np.random.default_rng([seed, start + i]).standard_normal(F)
    return out


def integrate(field_fn, x0: np.ndarray, steps: int) -> np.ndarray:
    """Forward Euler from t = 0 to 1: x <- x + (1/steps) v(x, i/steps)."""
    if steps < 1:
        raise ArgumentError("steps must be >= 1")
    x = np.array(x0, dtype=np.float32)
    dt = np.float32(1.0 / steps)
    for i in range(steps):
        x = x + dt * np.asarray(field_fn(x, np.float32(i / steps)), dtype=np.float32)
    return x


def euler_sample(model: CFMModel, tokens, steps: int = 16, seed: int = 0, start: int = 0,
                 context: tuple | None = None) -> np.ndarray:
    """Frames for ``tokens`` (trailing EOS ignored).

    ``start`` is the absolute frame index of tokens[0]; ``context`` optionally
    gives (left token or None, right token or None) neighbours outside the chunk.
    """
    toks = _strip_eos(tokens, model.cfg.V_s)
    if len(toks) == 0:
        if steps < 1:
            raise ArgumentError("steps must be >= 1")
        return np.zeros((0, model.cfg.F), np.float32)
    cond, phase = model.frame_conditions(toks, start)
    if context is not None:
        left, right = context
        if left is not None:
            cond[0, 0] = left
        if right is not None:
            cond[-1, -1] = right
    p = {n: Tensor(a) for n, a in model.params.params.items()}
    x0 = source_noise(seed, start, len(toks), model.cfg.F)

    def fn(x, t):
        with no_grad():
            return model.field(p, Tensor(x), np.full(len(x), t, np.float32), cond, phase).data

    return integrate(fn, x0, steps)
