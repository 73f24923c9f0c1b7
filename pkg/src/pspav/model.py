"""Parameter containers and the end-to-end forward pass."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .encoder import encode, init_avga, init_lstm
from .heads import fully_head, fuse, init_heads, weak_head
from .psp import psp_forward, init_psp
from .tensor import Tensor

GROUPS = ("avga", "lstm_v", "lstm_a", "psp", "head")

Params = dict[str, dict[str, Tensor]]


@dataclass(frozen=True)
class Dims:
    T: int = 10
    C: int = 5
    N: int = 16
    d_v: int = 64
    d_a: int = 32
    d_l: int = 64
    d_h: int = 32
    d_att: int = 32


class Output(NamedTuple):
    v_lstm: Tensor
    a_lstm: Tensor
    attention: Tensor
    v_psp: Tensor
    a_psp: Tensor
    gamma_va: Tensor | None
    gamma_av: Tensor | None
    f_va: Tensor
    o_fully: Tensor | None
    o_weak: Tensor | None
    phi: Tensor | None
    f_h: Tensor | None


def init_params(dims: Dims, seed: int, dtype=np.float32) -> Params:
    rng = np.random.default_rng([seed, 0x1A17])
    return {
        "avga": init_avga(rng, dims.d_v, dims.d_a, dims.d_att, dtype),
        "lstm_v": init_lstm(rng, dims.d_v, dims.d_l, dtype),
        "lstm_a": init_lstm(rng, dims.d_a, dims.d_l, dtype),
        "psp": init_psp(rng, dims.d_l, dims.d_h, dtype),
        "head": init_heads(rng, dims.d_l, dims.d_h, dims.C, dtype),
    }


def flatten(params: Params) -> dict[str, Tensor]:
    return {f"{g}.{k}": t for g in GROUPS for k, t in params[g].items()}


def unflatten(flat: dict[str, np.ndarray], dtype=None) -> Params:
    params: Params = {g: {} for g in GROUPS}
    for key, arr in flat.items():
        group, name = key.split(".", 1)
        params[group][name] = Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)
    return params


def forward(params: Params, visual, audio, *, supervision: str = "fully", mode: str = "full-psp",
            tau: float = 0.095, use_weighting: bool = True, dropout_rate: float = 0.0,
            rng: np.random.Generator | None = None, training: bool = False, asp_relu: bool = False) -> Output:
    """Run encoder, PSP, fusion and the head for ``supervision``.

    ``visual`` and ``audio`` may be arrays or tensors, with or without a
    leading batch axis.
    """
    dtype = params["head"]["W3_v"].dtype
    visual = visual if isinstance(visual, Tensor) else Tensor(np.asarray(visual, dtype=dtype))
    audio = audio if isinstance(audio, Tensor) else Tensor(np.asarray(audio, dtype=dtype))
    v_lstm, a_lstm, attention = encode(visual, audio, params)
    v_psp, a_psp, gamma_va, gamma_av = psp_forward(v_lstm, a_lstm, params["psp"], tau, mode, asp_relu)
    head = params["head"]
    f_va = fuse(v_psp, a_psp, head)
    o_fully = o_weak = phi = f_h = None
    if supervision == "fully":
        o_fully = fully_head(f_va, head, dropout_rate, rng, training)
    elif supervision == "weakly":
        o_weak, phi, f_h = weak_head(f_va, head, use_weighting, dropout_rate, rng, training)
    else:
        raise ValueError(f"unknown supervision {supervision!r}")
    return Output(v_lstm, a_lstm, attention, v_psp, a_psp, gamma_va, gamma_av, f_va, o_fully, o_weak, phi, f_h)
