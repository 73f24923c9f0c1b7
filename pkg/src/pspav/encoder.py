"""Early fusion and temporal encoding.

Audio-guided visual attention pools the N spatial cells of each segment
into one visual vector, then two independent bidirectional LSTMs encode
the visual and audio sequences.

All functions accept an optional leading batch axis.
"""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError, Tensor, concat, reshape, softmax, tanh


def init_avga(rng: np.random.Generator, d_v: int, d_a: int, d_att: int, dtype=np.float32) -> dict[str, Tensor]:
    def uni(fan_in, shape):
        k = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-k, k, size=shape).astype(dtype), requires_grad=True)

    return {
        "U_a": uni(d_a, (d_a, d_att)),
        "U_v": uni(d_v, (d_v, d_att)),
        "w": uni(d_att, (d_att, 1)),
    }


def init_lstm(rng: np.random.Generator, d_in: int, d_l: int, dtype=np.float32) -> dict[str, Tensor]:
    if d_l % 2:
        raise DimensionError(f"Bi-LSTM output size must be even, got {d_l}")
    H = d_l // 2
    k = 1.0 / np.sqrt(H)
    params = {}
    for direction in ("fwd", "bwd"):
        b = rng.uniform(-k, k, size=4 * H)
        b[H:2 * H] = 1.0  # forget gate
        params[f"{direction}.W_ih"] = Tensor(rng.uniform(-k, k, size=(d_in, 4 * H)).astype(dtype), requires_grad=True)
        params[f"{direction}.W_hh"] = Tensor(rng.uniform(-k, k, size=(H, 4 * H)).astype(dtype), requires_grad=True)
        params[f"{direction}.b"] = Tensor(b.astype(dtype), requires_grad=True)
    return params


def avga(visual: Tensor, audio: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Attend over spatial cells with scores ``w . tanh(U_a a_t + U_v v_tn)``.

    Returns the attended visual features (..., T, d_v) and the attention
    weights (..., T, N).
    """
    U_a, U_v, w = params["U_a"], params["U_v"], params["w"]
    if visual.ndim < 3 or visual.shape[:-2] != audio.shape[:-1]:
        raise DimensionError(f"visual {visual.shape} and audio {audio.shape} disagree on leading axes")
    if visual.shape[-1] != U_v.shape[0] or audio.shape[-1] != U_a.shape[0]:
        raise DimensionError(
            f"feature sizes visual {visual.shape[-1]}, audio {audio.shape[-1]} do not match "
            f"projections {U_v.shape}, {U_a.shape}"
        )
    lead, N, d_v = visual.shape[:-2], visual.shape[-2], visual.shape[-1]
    d_att = U_a.shape[1]
    pa = reshape(audio @ U_a, lead + (1, d_att))
    scores = reshape(tanh(visual @ U_v + pa) @ w, lead + (N,))
    weights = softmax(scores, axis=-1)
    attended = reshape(reshape(weights, lead + (1, N)) @ visual, lead + (d_v,))
    return attended, weights


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def lstm_scan(x: Tensor, W_ih: Tensor, W_hh: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """One LSTM direction over (..., T, d_in), gates ordered i, f, g, o.

    Runs as a single graph node; the backward pass is explicit
    backpropagation through time. Initial hidden and cell states are zero.
    """
    if x.ndim not in (2, 3):
        raise DimensionError(f"LSTM input must be (T, d) or (B, T, d), got {x.shape}")
    H = W_hh.shape[0]
    if W_ih.shape != (x.shape[-1], 4 * H) or W_hh.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise DimensionError(f"LSTM weights {W_ih.shape}, {W_hh.shape}, {b.shape} do not fit input {x.shape}")
    squeeze = x.ndim == 2
    xs = x.data[None] if squeeze else x.data
    if reverse:
        xs = xs[:, ::-1]
    B, T, D = xs.shape
    wih, whh = W_ih.data, W_hh.data
    pre = xs @ wih + b.data
    dtype = pre.dtype
    h = np.zeros((B, H), dtype=dtype)
    c = np.zeros((B, H), dtype=dtype)
    hs = np.empty((B, T, H), dtype=dtype)
    gates = np.empty((T, 4, B, H), dtype=dtype)
    cells = np.empty((T + 1, B, H), dtype=dtype)
    cells[0] = c
    tcs = np.empty((T, B, H), dtype=dtype)
    for t in range(T):
        z = pre[:, t] + h @ whh
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = _sigmoid(z[:, 3 * H:])
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        gates[t] = (i, f, g, o)
        cells[t + 1] = c
        tcs[t] = tc
        hs[:, t] = h
    out = hs[:, ::-1] if reverse else hs
    out = np.ascontiguousarray(out[0] if squeeze else out)

    def bw(grad):
        G = grad[None] if squeeze else grad
        if reverse:
            G = G[:, ::-1]
        dz_all = np.empty((B, T, 4 * H), dtype=dtype)
        dW_hh = np.zeros_like(whh)
        dh_next = np.zeros((B, H), dtype=dtype)
        dc_next = np.zeros((B, H), dtype=dtype)
        for t in reversed(range(T)):
            i, f, g, o = gates[t]
            tc = tcs[t]
            dh = G[:, t] + dh_next
            dc = dh * o * (1 - tc * tc) + dc_next
            dz = np.concatenate(
                (dc * g * i * (1 - i), dc * cells[t] * f * (1 - f), dc * i * (1 - g * g), dh * tc * o * (1 - o)),
                axis=1,
            )
            dz_all[:, t] = dz
            dc_next = dc * f
            if t > 0:
                dW_hh += hs[:, t - 1].T @ dz
            dh_next = dz @ whh.T
        dx = dz_all @ wih.T
        if reverse:
            dx = dx[:, ::-1]
        dx = np.ascontiguousarray(dx[0] if squeeze else dx)
        dW_ih = xs.reshape(-1, D).T @ dz_all.reshape(-1, 4 * H)
        return dx, dW_ih, dW_hh, dz_all.sum(axis=(0, 1))

    return Tensor.from_op(out, (x, W_ih, W_hh, b), bw, "lstm")


def bilstm(x: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Concatenate forward and backward hidden states: (..., T, d_l)."""
    fwd = lstm_scan(x, params["fwd.W_ih"], params["fwd.W_hh"], params["fwd.b"])
    bwd = lstm_scan(x, params["bwd.W_ih"], params["bwd.W_hh"], params["bwd.b"], reverse=True)
    return concat([fwd, bwd], axis=-1)


def encode(visual: Tensor, audio: Tensor, params: dict[str, dict[str, Tensor]]):
    """Return ``(v_lstm, a_lstm, attention)`` for one video or a batch.

    ``params`` holds the groups ``avga``, ``lstm_v`` and ``lstm_a``.
    """
    attended, attention = avga(visual, audio, params["avga"])
    return bilstm(attended, params["lstm_v"]), bilstm(audio, params["lstm_a"]), attention
