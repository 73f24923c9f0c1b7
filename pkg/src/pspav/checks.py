"""End-to-end gradient verification on a small float64 model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data as avdata
from .losses import fully_loss, weak_bce_loss
from .model import Dims, GROUPS, forward, init_params
from .tensor import grad_check, watch_kinks

SMALL = Dims(T=4, C=3, N=3, d_v=6, d_a=5, d_l=8, d_h=6, d_att=4)


@dataclass
class GradReport:
    supervision: str
    seed: int
    kink_distance: float
    worst: dict[str, float]  # group -> largest relative error

    @property
    def max_error(self) -> float:
        return max(self.worst.values())


def _problem(dims: Dims, seed: int, supervision: str, tau: float, use_weighting: bool, lam: float):
    params = init_params(dims, seed, np.float64)
    gen = avdata.GeneratorConfig(T=dims.T, C=dims.C, N=dims.N, d_v=dims.d_v, d_a=dims.d_a,
                                 span_min=1, span_max=dims.T - 1, seed=seed)
    batch = avdata.stack(avdata.generate_dataset(gen, 2), gen.background_index, np.float64)

    def loss(_=None):
        out = forward(params, batch.visual, batch.audio, supervision=supervision, tau=tau,
                      use_weighting=use_weighting)
        if supervision == "fully":
            return fully_loss(out.o_fully, batch.labels_full, out.v_psp, out.a_psp, batch.relevance, lam)
        return weak_bce_loss(out.o_weak, batch.labels_weak)

    return params, loss


def model_gradient_check(supervision: str, dims: Dims = SMALL, seed: int = 0, tau: float = 0.095,
                         use_weighting: bool = True, lam: float = 100.0, min_kink: float = 1e-3,
                         max_tries: int = 200) -> GradReport:
    """grad_check every parameter of every group through the full loss.

    Seeds are advanced from ``seed`` until the forward pass stays at least
    ``min_kink`` away from every relu, abs and pruning threshold.
    """
    for s in range(seed, seed + max_tries):
        params, loss = _problem(dims, s, supervision, tau, use_weighting, lam)
        with watch_kinks() as kinks:
            loss()
        distance = min(kinks, default=np.inf)
        if distance >= min_kink:
            break
    else:
        raise RuntimeError(f"no kink-free instance within {max_tries} seeds")
    worst = {g: max(grad_check(loss, t) for t in params[g].values()) for g in GROUPS}
    return GradReport(supervision, s, distance, worst)
