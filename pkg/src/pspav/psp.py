"""Positive sample propagation between audio and visual segments.

Three steps: score every (visual, audio) segment pair, prune negative and
weak connections, then add each segment's surviving cross-modal
neighbours to its own features.

Modes:

``full-psp``  relu, row l1 normalisation, drop entries below tau, renormalise
``wpsp``      same without the threshold (keeps weak connections)
``asp``       signed row l1 normalisation, nothing pruned
``off``       no propagation; features pass through unchanged
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import DimensionError, Tensor, add, l1_normalize, mask, note_kink, relu, scale, swap_last

MODES = ("full-psp", "asp", "wpsp", "off")


class PspConfigError(ValueError):
    pass


def init_psp(rng: np.random.Generator, d_l: int, d_h: int, dtype=np.float32) -> dict[str, Tensor]:
    k = 1.0 / math.sqrt(d_l)

    def uni(shape):
        return Tensor(rng.uniform(-k, k, size=shape).astype(dtype), requires_grad=True)

    return {"W1_v": uni((d_l, d_h)), "W1_a": uni((d_l, d_h)), "W2_v": uni((d_l, d_l)), "W2_a": uni((d_l, d_l))}


def similarity(v_lstm: Tensor, a_lstm: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Raw pair scores ``beta_va`` (rows: visual, cols: audio) and its transpose.

    The scale divisor is sqrt(d_l), the encoder width, not the projected width.
    """
    W1_v, W1_a = params["W1_v"], params["W1_a"]
    if v_lstm.shape != a_lstm.shape or v_lstm.shape[-1] != W1_v.shape[0] or W1_v.shape != W1_a.shape:
        raise DimensionError(
            f"v_lstm {v_lstm.shape}, a_lstm {a_lstm.shape}, W1_v {W1_v.shape}, W1_a {W1_a.shape} are inconsistent"
        )
    d_l = v_lstm.shape[-1]
    beta_va = scale((v_lstm @ W1_v) @ swap_last(a_lstm @ W1_a), 1.0 / math.sqrt(d_l))
    return beta_va, swap_last(beta_va)


def prune_normalize(beta: Tensor, tau: float, mode: str = "full-psp", asp_relu: bool = False) -> Tensor | None:
    """Turn raw scores into propagation weights ``gamma``.

    Returns None in mode ``off``. Entries at exactly ``tau`` are kept. The
    threshold gate is treated as a constant in the backward pass. With
    ``asp_relu`` the ASP variant keeps the leading relu, which makes it
    coincide with ``wpsp``.
    """
    if mode not in MODES:
        raise PspConfigError(f"unknown PSP mode {mode!r}; expected one of {MODES}")
    if mode == "off":
        return None
    if mode == "asp" and not asp_relu:
        return l1_normalize(beta)
    normed = l1_normalize(relu(beta))
    if mode == "full-psp":
        if not tau >= 0:
            raise PspConfigError(f"full-psp needs tau >= 0, got {tau}")
        note_kink(np.abs(normed.data - tau))
        return l1_normalize(mask(normed, normed.data >= tau))
    return l1_normalize(normed)


def propagate(gamma_av: Tensor | None, gamma_va: Tensor | None, v_lstm: Tensor, a_lstm: Tensor,
              params: dict[str, Tensor]):
    """Return ``(a_psp, v_psp, v_pos, a_pos)``.

    ``v_pos`` gathers visual features for each audio segment through
    ``gamma_av``; ``a_pos`` gathers audio features for each visual segment.
    Without gammas (mode ``off``) the positives are None and the features
    pass through.
    """
    if gamma_av is None or gamma_va is None:
        return a_lstm, v_lstm, None, None
    T = v_lstm.shape[-2]
    if gamma_av.shape[-2:] != (T, T) or gamma_va.shape[-2:] != (T, T) or v_lstm.shape != a_lstm.shape:
        raise DimensionError(
            f"gammas {gamma_av.shape}, {gamma_va.shape} do not fit features {v_lstm.shape}, {a_lstm.shape}"
        )
    v_pos = gamma_av @ (v_lstm @ params["W2_v"])
    a_pos = gamma_va @ (a_lstm @ params["W2_a"])
    return add(v_pos, a_lstm), add(a_pos, v_lstm), v_pos, a_pos


def psp_forward(v_lstm: Tensor, a_lstm: Tensor, params: dict[str, Tensor], tau: float, mode: str = "full-psp",
                asp_relu: bool = False):
    """Full PSP pass: ``(v_psp, a_psp, gamma_va, gamma_av)``; gammas are None when off."""
    if mode == "off":
        return v_lstm, a_lstm, None, None
    beta_va, beta_av = similarity(v_lstm, a_lstm, params)
    gamma_va = prune_normalize(beta_va, tau, mode, asp_relu)
    gamma_av = prune_normalize(beta_av, tau, mode, asp_relu)
    a_psp, v_psp, _, _ = propagate(gamma_av, gamma_va, v_lstm, a_lstm, params)
    return v_psp, a_psp, gamma_va, gamma_av
