"""Finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from .tensor import Tensor, backward

# Coordinates whose gradient magnitude is below this are judged on absolute
# error (relative error would only measure finite-difference truncation noise).
REL_FLOOR = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(builder: Callable[[Mapping[str, Tensor]], Tensor],
                    inputs: Mapping[str, np.ndarray],
                    frozen: Iterable[str] = (),
                    h: float = 1e-3,
                    dtype=np.float64,
                    sample: int | None = None,
                    seed: int = 0) -> float:
    """Max relative error between backward() and central differences.

    ``builder`` maps named leaf tensors to a scalar loss and must be
    deterministic. Inputs listed in ``frozen`` get requires_grad=False and are
    excluded from the comparison. The forward runs in ``dtype``; differences
    are always formed in float64. With ``sample`` set, at most that many
    seeded-random coordinates per input are probed.
    """
    rng = np.random.default_rng(seed)
    frozen = set(frozen)
    base = {k: np.array(v, dtype=dtype) for k, v in inputs.items()}

    def leaves():
        return {k: Tensor(v.copy(), requires_grad=k not in frozen, name=k) for k, v in base.items()}

    grads = backward(builder(leaves()))
    worst = 0.0
    for name, value in base.items():
        if name in frozen:
            continue
        analytic = grads.get(name, np.zeros_like(value))
        flat = value.reshape(-1)
        coords = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            coords = np.sort(rng.choice(flat.size, size=sample, replace=False))
        numeric = np.zeros(len(coords), dtype=np.float64)
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(builder(_consts(base)).data)
            flat[i] = orig - h
            fm = float(builder(_consts(base)).data)
            flat[i] = orig
            numeric[j] = (fp - fm) / (2.0 * h)
        worst = max(worst, relative_error(np.asarray(analytic).reshape(-1)[coords], numeric))
    return worst


def _consts(base: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, name=k) for k, v in base.items()}
