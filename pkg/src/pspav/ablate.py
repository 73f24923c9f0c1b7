"""Ablation harness: train each variant over several seeded replicates."""

from __future__ import annotations

import hashlib
import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .losses import DEFAULT_LAMBDA
from .train import ConfigError, RunConfig, load_dataset, train

TAU_GRID = (0.0, 0.025, 0.075, 0.095, 0.115)

AXES: dict[str, tuple[str, tuple]] = {
    # axis name -> (RunConfig field, default values)
    "psp-mode": ("psp_mode", ("off", "asp", "wpsp", "full-psp")),
    "tau": ("tau", TAU_GRID),
    "lambda": ("lam", (0.0, DEFAULT_LAMBDA)),
    "use-weighting": ("use_weighting", (False, True)),
}


def derive_seed(base_seed: int, name: str, replicate: int) -> int:
    digest = hashlib.sha256(f"{base_seed}|{name}|{replicate}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass(frozen=True)
class Variant:
    name: str
    overrides: dict = field(default_factory=dict)


def build_variants(axes: dict[str, tuple | None]) -> list[Variant]:
    """Cartesian product of the requested axes; ``None`` picks an axis's default values."""
    grids = []
    for axis, values in axes.items():
        if axis not in AXES:
            raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {', '.join(AXES)}")
        key, defaults = AXES[axis]
        grids.append([(axis, key, v) for v in (defaults if values is None else values)])
    variants = []
    for combo in itertools.product(*grids):
        name = ",".join(f"{axis}={value}" for axis, _, value in combo)
        variants.append(Variant(name, {key: value for _, key, value in combo}))
    return variants


@dataclass
class Row:
    variant: str
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies, ddof=1)) if len(self.accuracies) > 1 else 0.0


@dataclass
class AblationTable:
    rows: list[Row]

    def row(self, variant: str) -> Row:
        for r in self.rows:
            if r.variant == variant:
                return r
        raise KeyError(variant)

    def to_csv(self) -> str:
        n = max(len(r.accuracies) for r in self.rows)
        lines = ["variant,mean,std," + ",".join(f"seed{i}" for i in range(n))]
        for r in self.rows:
            accs = ",".join(f"{a:.6f}" for a in r.accuracies)
            lines.append(f'"{r.variant}",{r.mean:.6f},{r.std:.6f},{accs}')
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        width = max(len(r.variant) for r in self.rows)
        return "\n".join(f"{r.variant:<{width}}  {100 * r.mean:6.2f} ± {100 * r.std:5.2f}" for r in self.rows) + "\n"


def replicate_config(base: RunConfig, variant: Variant, replicate: int) -> RunConfig:
    # every variant of one replicate sees the same data, so differences are paired
    return base.replace(**variant.overrides, seed=derive_seed(base.seed, variant.name, replicate),
                        data_seed=derive_seed(base.data_seed, "data", replicate))


def _run_replicate(base: RunConfig, variants: list[Variant], replicate: int) -> list[float]:
    cfgs = [replicate_config(base, v, replicate) for v in variants]
    for cfg in cfgs:
        cfg.validate()
    datasets = {}
    accs = []
    for cfg in cfgs:
        key = (cfg.generator_config(), cfg.manifest)
        if key not in datasets:
            datasets[key] = load_dataset(cfg)
        accs.append(train(cfg, datasets[key])[1].segment_accuracy)
    return accs


def ablate(base: RunConfig, axes: dict[str, tuple | None], replicates: int = 5, workers: int = 1,
           on_result=None) -> AblationTable:
    """Train every variant for ``replicates`` seeds and tabulate segment accuracy.

    ``workers > 1`` runs replicates in separate processes; results match the
    serial order exactly.
    """
    if replicates < 1:
        raise ConfigError("replicates must be at least 1")
    variants = build_variants(axes)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            per_rep = list(pool.map(_run_replicate, [base] * replicates, [variants] * replicates, range(replicates)))
    else:
        per_rep = []
        for r in range(replicates):
            per_rep.append(_run_replicate(base, variants, r))
            if on_result is not None:
                on_result(r, per_rep[-1])
    return AblationTable([Row(v.name, [accs[i] for accs in per_rep]) for i, v in enumerate(variants)])
