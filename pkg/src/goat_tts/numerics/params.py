"""Named parameter storage, freeze masks, Adam, and the checkpoint container."""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from ..errors import ArgumentError, FormatError
from .tensor import Tensor

CKPT_MAGIC = b"GOATCKPT"
CKPT_VERSION = 1


@dataclass
class AdamHyper:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class ParamStore:
    """Ordered name -> float32 array map with a freeze flag per entry.

    Insertion order is the canonical order for checkpoints and checksums.
    """

    params: dict[str, np.ndarray] = field(default_factory=dict)
    frozen: dict[str, bool] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray, frozen: bool = False) -> np.ndarray:
        if name in self.params:
            raise ArgumentError(f"duplicate parameter {name!r}")
        arr = np.ascontiguousarray(value, dtype=np.float32)
        self.params[name] = arr
        self.frozen[name] = frozen
        self.reset_state(name)
        return arr

    def reset_state(self, name: str | None = None) -> None:
        names = [name] if name is not None else list(self.params)
        for n in names:
            self.m[n] = np.zeros_like(self.params[n])
            self.v[n] = np.zeros_like(self.params[n])
            self.steps[n] = 0

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def set_frozen(self, predicate: Callable[[str], bool]) -> None:
        """Freeze exactly the parameters whose name satisfies ``predicate``."""
        for n in self.params:
            self.frozen[n] = bool(predicate(n))

    def trainable(self) -> list[str]:
        return [n for n in self.params if not self.frozen[n]]

    def leaf_tensors(self, dtype=np.float32) -> dict[str, Tensor]:
        """Fresh graph leaves; frozen entries get requires_grad=False."""
        return {
            n: Tensor(a.astype(dtype, copy=False), requires_grad=not self.frozen[n], name=n)
            for n, a in self.params.items()
        }

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n, a in self.params.items():
            out.params[n] = a.copy()
            out.frozen[n] = self.frozen[n]
            out.m[n] = self.m[n].copy()
            out.v[n] = self.v[n].copy()
            out.steps[n] = self.steps[n]
        return out

    def checksum(self, names: Iterable[str] | None = None) -> str:
        h = hashlib.sha256()
        for n in (self.params if names is None else names):
            h.update(n.encode())
            h.update(self.params[n].tobytes())
        return h.hexdigest()

    def per_param_checksums(self) -> dict[str, str]:
        return {n: hashlib.sha256(a.tobytes()).hexdigest()[:16] for n, a in self.params.items()}

    def count(self, names: Iterable[str] | None = None) -> int:
        return int(sum(self.params[n].size for n in (self.params if names is None else names)))


def adam_step(store: ParamStore, grads: Mapping[str, np.ndarray], hyper: AdamHyper | None = None) -> ParamStore:
    """One Adam update with bias correction, in place.

    Frozen parameters and their optimizer state are left untouched; names absent
    from ``grads`` are skipped.
    """
    hp = hyper or AdamHyper()
    for name, g in grads.items():
        if name not in store.params:
            raise ArgumentError(f"gradient for unknown parameter {name!r}")
        p = store.params[name]
        if g.shape != p.shape:
            raise ArgumentError(f"gradient shape {g.shape} != parameter {name!r} shape {p.shape}")
    for name, g in grads.items():
        if store.frozen[name]:
            continue
        g = g.astype(np.float32, copy=False)
        t = store.steps[name] + 1
        m = store.m[name]
        v = store.v[name]
        m *= hp.beta1
        m += (1.0 - hp.beta1) * g
        v *= hp.beta2
        v += (1.0 - hp.beta2) * (g * g)
        mhat = m / (1.0 - hp.beta1 ** t)
        vhat = v / (1.0 - hp.beta2 ** t)
        store.params[name] -= (hp.lr * mhat / (np.sqrt(vhat) + hp.eps)).astype(np.float32)
        store.steps[name] = t
    return store


# ---------------------------------------------------------------- checkpoint
#
# Layout (all integers little-endian):
#   magic   8 bytes  b"GOATCKPT"
#   version 1 byte   (currently 1)
#   count   u32      number of records
#   record:
#     name_len u16, name utf-8 bytes
#     ndim u8, dims u32 * ndim
#     frozen u8 (0/1)
#     data  float32 little-endian, C order, product(dims) values

def dumps_checkpoint(store: ParamStore) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<B", CKPT_VERSION))
    buf.write(struct.pack("<I", len(store.params)))
    for name, arr in store.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(struct.pack("<B", 1 if store.frozen[name] else 0))
        buf.write(arr.astype("<f4").tobytes())
    return buf.getvalue()


def loads_checkpoint(blob: bytes) -> ParamStore:
    view = memoryview(blob)
    if len(blob) < 13 or bytes(view[:8]) != CKPT_MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    (version,) = struct.unpack_from("<B", view, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", view, 9)
    off = 13
    store = ParamStore()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, off)
            off += 2
            name = bytes(view[off:off + nlen]).decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", view, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", view, off)
            off += 4 * ndim
            (flag,) = struct.unpack_from("<B", view, off)
            off += 1
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(view, dtype="<f4", count=n, offset=off).astype(np.float32)
            off += 4 * n
            store.add(name, data.reshape(shape), frozen=bool(flag))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"truncated or corrupt checkpoint: {exc}") from exc
    if off != len(blob):
        raise FormatError("trailing bytes after last checkpoint record")
    return store


def save_checkpoint(store: ParamStore, path: str | Path) -> None:
    Path(path).write_bytes(dumps_checkpoint(store))


def load_checkpoint(path: str | Path) -> ParamStore:
    return loads_checkpoint(Path(path).read_bytes())
