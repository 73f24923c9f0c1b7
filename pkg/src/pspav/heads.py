"""Fusion of the propagated features and the two classification heads."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .tensor import DimensionError, Tensor, add, dropout, layer_norm, mean, mul, relu, scale, sigmoid, softmax


class WeakOutput(NamedTuple):
    o_weak: Tensor  # (..., C) video-level class probabilities
    phi: Tensor  # (..., T, 1) segment weights; all 0.5 without the weighting branch
    f_h: Tensor  # (..., T, C) per-segment class scores


def init_heads(rng: np.random.Generator, d_l: int, d_h: int, C: int, dtype=np.float32) -> dict[str, Tensor]:
    def uni(fan_in, shape):
        k = 1.0 / math.sqrt(fan_in)
        return Tensor(rng.uniform(-k, k, size=shape).astype(dtype), requires_grad=True)

    def const(value, shape):
        return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)

    return {
        "W3_v": uni(d_l, (d_l, d_l)),
        "W3_a": uni(d_l, (d_l, d_l)),
        "ln_v.gain": const(1.0, d_l),
        "ln_v.bias": const(0.0, d_l),
        "ln_a.gain": const(1.0, d_l),
        "ln_a.bias": const(0.0, d_l),
        "fc1.W": uni(d_l, (d_l, d_h)),
        "fc1.b": uni(d_l, d_h),
        "fc2.W": uni(d_h, (d_h, C)),
        "fc2.b": uni(d_h, C),
        "W4": uni(d_l, (d_l, d_h)),
        "W5": uni(d_h, (d_h, C)),
        "W6": uni(C, (C, 1)),
    }


def fuse(v_psp: Tensor, a_psp: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Average of the layer-normalised projections of both modalities."""
    if v_psp.shape != a_psp.shape:
        raise DimensionError(f"v_psp {v_psp.shape} and a_psp {a_psp.shape} differ")
    v = layer_norm(v_psp @ params["W3_v"], params["ln_v.gain"], params["ln_v.bias"])
    a = layer_norm(a_psp @ params["W3_a"], params["ln_a.gain"], params["ln_a.bias"])
    return scale(add(v, a), 0.5)


def fully_head(f_va: Tensor, params: dict[str, Tensor], dropout_rate: float = 0.0,
               rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    """Two affine layers with relu (and dropout) between, softmax over classes."""
    hidden = relu(add(f_va @ params["fc1.W"], params["fc1.b"]))
    hidden = dropout(hidden, dropout_rate, rng, training)
    return softmax(add(hidden @ params["fc2.W"], params["fc2.b"]), axis=-1)


def weak_head(f_va: Tensor, params: dict[str, Tensor], use_weighting: bool = True, dropout_rate: float = 0.0,
              rng: np.random.Generator | None = None, training: bool = False) -> WeakOutput:
    """Video-level prediction from time-averaged segment scores.

    With the weighting branch, each segment's scores are scaled by a learned
    sigmoid gate ``phi`` before averaging.
    """
    hidden = dropout(f_va @ params["W4"], dropout_rate, rng, training)
    f_h = hidden @ params["W5"]
    if use_weighting:
        phi = sigmoid(f_h @ params["W6"])
        pooled = mean(mul(f_h, phi), axis=-2)
    else:
        phi = Tensor(np.full(f_h.shape[:-1] + (1,), 0.5, dtype=f_h.dtype))
        pooled = mean(f_h, axis=-2)
    return WeakOutput(softmax(pooled, axis=-1), phi, f_h)
