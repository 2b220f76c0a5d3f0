"""Functional layers composed from the differentiable primitives.

Parameters are passed as a mapping of ``prefix.name`` -> Tensor so the same code
serves training graphs (leaf tensors) and inference (no_grad tensors).
"""
from __future__ import annotations

from typing import Mapping

import numpy as np

from ..errors import ArgumentError
from . import tensor as T
from .tensor import Tensor

NEG_INF = -1e9


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, w)
    return y if b is None else T.add(y, b)


def causal_mask(t_q: int, t_k: int, dtype=np.float32) -> np.ndarray:
    """Additive mask: query i (the last t_q of t_k positions) sees keys <= its own index."""
    offset = t_k - t_q
    q = np.arange(t_q)[:, None] + offset
    k = np.arange(t_k)[None, :]
    return np.where(k <= q, 0.0, NEG_INF).astype(dtype)


class KVCache:
    """Per-layer key/value history for incremental decoding (no gradients)."""

    def __init__(self):
        self.k: np.ndarray | None = None
        self.v: np.ndarray | None = None

    @property
    def length(self) -> int:
        return 0 if self.k is None else self.k.shape[2]

    def append(self, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.k is None:
            self.k, self.v = k, v
        else:
            self.k = np.concatenate([self.k, k], axis=2)
            self.v = np.concatenate([self.v, v], axis=2)
        return self.k, self.v


def multi_head_attention(x: Tensor, p: Mapping[str, Tensor], prefix: str, n_heads: int,
                         causal: bool = True, key_mask: np.ndarray | None = None,
                         cache: KVCache | None = None) -> Tensor:
    """Self-attention over x [B, T, d].

    ``key_mask`` ([B, T_k] bool, True = attendable) hides padding. With a cache,
    x holds only the new positions and keys/values are appended to the cache.
    """
    bsz, t, d = x.shape
    if d % n_heads:
        raise ArgumentError(f"d_model {d} not divisible by n_heads {n_heads}")
    dh = d // n_heads

    def heads(y: Tensor) -> Tensor:
        return T.transpose(T.reshape(y, (bsz, t, n_heads, dh)), (0, 2, 1, 3))

    q = heads(linear(x, p[f"{prefix}.wq"], p[f"{prefix}.bq"]))
    k = heads(linear(x, p[f"{prefix}.wk"], p[f"{prefix}.bk"]))
    v = heads(linear(x, p[f"{prefix}.wv"], p[f"{prefix}.bv"]))
    if cache is not None:
        kd, vd = cache.append(k.data, v.data)
        k, v = Tensor(kd), Tensor(vd)
    t_k = k.shape[2]
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    mask = np.zeros((t, t_k), dtype=scores.dtype)
    if causal:
        mask = mask + causal_mask(t, t_k, scores.dtype)
    mask = np.broadcast_to(mask, (bsz, 1, t, t_k))
    if key_mask is not None:
        mask = mask + np.where(key_mask, 0.0, NEG_INF).astype(scores.dtype)[:, None, None, :]
    scores = T.add(scores, mask)
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (bsz, t, d))
    return linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def transformer_block(x: Tensor, p: Mapping[str, Tensor], prefix: str, n_heads: int,
                      causal: bool = True, key_mask: np.ndarray | None = None,
                      cache: KVCache | None = None) -> Tensor:
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""
    h = T.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    x = T.add(x, multi_head_attention(h, p, f"{prefix}.attn", n_heads, causal, key_mask, cache))
    h = T.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    h = T.gelu(linear(h, p[f"{prefix}.mlp.w1"], p[f"{prefix}.mlp.b1"]))
    return T.add(x, linear(h, p[f"{prefix}.mlp.w2"], p[f"{prefix}.mlp.b2"]))


def init_block(store, prefix: str, d: int, rng: np.random.Generator, std: float = 0.02,
               mlp_ratio: int = 4) -> None:
    add = store.add
    add(f"{prefix}.ln1.g", np.ones(d))
    add(f"{prefix}.ln1.b", np.zeros(d))
    for name in ("q", "k", "v", "o"):
        add(f"{prefix}.attn.w{name}", rng.normal(0.0, std, (d, d)))
        add(f"{prefix}.attn.b{name}", np.zeros(d))
    add(f"{prefix}.ln2.g", np.ones(d))
    add(f"{prefix}.ln2.b", np.zeros(d))
    add(f"{prefix}.mlp.w1", rng.normal(0.0, std, (d, mlp_ratio * d)))
    add(f"{prefix}.mlp.b1", np.zeros(mlp_ratio * d))
    add(f"{prefix}.mlp.w2", rng.normal(0.0, std, (mlp_ratio * d, d)))
    add(f"{prefix}.mlp.b2", np.zeros(d))


def block_param_count(d: int, mlp_ratio: int = 4) -> int:
    return 4 * d + 4 * (d * d + d) + 2 * mlp_ratio * d * d + mlp_ratio * d + d
