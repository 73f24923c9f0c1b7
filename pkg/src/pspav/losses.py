"""Training objectives for the fully and weakly supervised settings.

All losses accept a leading batch axis and return the batch mean of the
per-video value.
"""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError, Tensor, add, clamp, log, mask, mean, mul, scale, sub, tabs, tsum

PROB_FLOOR = 1e-12
DEFAULT_LAMBDA = 100.0


def _upper(dtype) -> float:
    # 1 - 1e-12 rounds to 1.0 in float32; fall back to the largest float below 1
    return float(min(1.0 - PROB_FLOOR, np.nextafter(dtype.type(1.0), dtype.type(0.0))))


def _as_tensor(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.dtype))


def ce_loss(o_fully: Tensor, labels_full) -> Tensor:
    """-(1 / (T C)) sum_t sum_c Y_tc log O_tc."""
    labels_full = _as_tensor(labels_full, o_fully)
    if o_fully.shape != labels_full.shape:
        raise DimensionError(f"predictions {o_fully.shape} and labels {labels_full.shape} differ")
    return scale(mean(mul(labels_full, log(clamp(o_fully, PROB_FLOOR, None)))), -1.0)


def avps_similarity(v_psp: Tensor, a_psp: Tensor) -> Tensor:
    """Per-segment inner products, l1-normalised over time (sign kept).

    A vector whose l1 norm is below 1e-12 is returned unnormalised.
    """
    if v_psp.shape != a_psp.shape:
        raise DimensionError(f"v_psp {v_psp.shape} and a_psp {a_psp.shape} differ")
    s = tsum(mul(v_psp, a_psp), axis=-1)
    norm = tsum(tabs(s), axis=-1, keepdims=True)
    tiny = norm.data < PROB_FLOOR
    return s / add(mask(norm, ~tiny), Tensor(tiny.astype(s.dtype)))


def normalize_relevance(G) -> np.ndarray:
    G = np.asarray(G)
    total = G.sum(axis=-1, keepdims=True)
    return G / np.where(total == 0, 1, total)


def avps_loss(S: Tensor, G) -> Tensor:
    """Mean squared error between S and the l1-normalised event indicator G."""
    G = G.data if isinstance(G, Tensor) else np.asarray(G)
    if S.shape != G.shape:
        raise DimensionError(f"similarity {S.shape} and relevance {G.shape} differ")
    diff = sub(S, Tensor(normalize_relevance(G).astype(S.dtype)))
    return mean(mul(diff, diff))


def fully_loss(o_fully: Tensor, labels_full, v_psp: Tensor, a_psp: Tensor, G, lam: float = DEFAULT_LAMBDA) -> Tensor:
    ce = ce_loss(o_fully, labels_full)
    if lam == 0:
        return ce
    return add(ce, scale(avps_loss(avps_similarity(v_psp, a_psp), G), lam))


def weak_bce_loss(o_weak: Tensor, labels_weak) -> Tensor:
    """Binary cross entropy averaged over the C classes."""
    labels_weak = _as_tensor(labels_weak, o_weak)
    if o_weak.shape != labels_weak.shape:
        raise DimensionError(f"predictions {o_weak.shape} and labels {labels_weak.shape} differ")
    o = clamp(o_weak, PROB_FLOOR, _upper(o_weak.dtype))
    pos = mul(labels_weak, log(o))
    neg = mul(sub(1.0, labels_weak), log(sub(1.0, o)))
    return scale(mean(add(pos, neg)), -1.0)

