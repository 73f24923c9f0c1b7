"""Run configuration, training loop, evaluation and checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as avdata
from .losses import DEFAULT_LAMBDA, fully_loss, weak_bce_loss
from .model import Dims, Output, Params, flatten, forward, init_params, unflatten
from .optim import make_optimizer
from .psp import MODES
from .tensor import DTYPES

log = logging.getLogger(__name__)

EVAL_BATCH = 64


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class RunConfig:
    supervision: str = "fully"
    psp_mode: str = "full-psp"
    tau: float = 0.095
    lam: float | None = None
    use_weighting: bool = True
    asp_relu: bool = False
    T: int = 10
    C: int = 5
    N: int = 16
    d_v: int = 64
    d_a: int = 32
    d_l: int = 64
    d_h: int = 32
    d_att: int = 32
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 30
    dropout_rate: float = 0.1
    n_videos: int = 714
    noise_std: float = 4.0
    span_min: int = 2
    span_max: int = 8
    desync_prob: float = 0.5
    data_seed: int = 0
    manifest: str | None = None
    seed: int = 0
    precision: int = 32
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    @property
    def effective_lambda(self) -> float:
        if self.supervision == "weakly":
            return 0.0
        return DEFAULT_LAMBDA if self.lam is None else self.lam

    @property
    def dims(self) -> Dims:
        return Dims(self.T, self.C, self.N, self.d_v, self.d_a, self.d_l, self.d_h, self.d_att)

    @property
    def dtype(self):
        return DTYPES[self.precision]

    def generator_config(self) -> avdata.GeneratorConfig:
        return avdata.GeneratorConfig(
            T=self.T, C=self.C, N=self.N, d_v=self.d_v, d_a=self.d_a, noise_std=self.noise_std,
            span_min=self.span_min, span_max=self.span_max, desync_prob=self.desync_prob, seed=self.data_seed,
        )

    def validate(self) -> None:
        if self.supervision not in ("fully", "weakly"):
            raise ConfigError(f"supervision must be 'fully' or 'weakly', got {self.supervision!r}")
        if self.psp_mode not in MODES:
            raise ConfigError(f"psp_mode must be one of {MODES}, got {self.psp_mode!r}")
        if self.psp_mode == "full-psp" and not self.tau >= 0:
            raise ConfigError(f"tau must be >= 0 in full-psp mode, got {self.tau}")
        if self.lam is not None and not self.lam >= 0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")
        if self.supervision == "weakly" and self.lam:
            raise ConfigError("the pair-similarity loss needs segment labels; lambda must be 0 when weakly supervised")
        for name in ("T", "C", "N", "d_v", "d_a", "d_l", "d_h", "d_att", "batch_size", "n_videos"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_l % 2:
            raise ConfigError(f"d_l must be even, got {self.d_l}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.precision not in DTYPES:
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.manifest is None:
            try:
                self.generator_config()
            except avdata.ConfigError as exc:
                raise ConfigError(str(exc)) from None

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        """Hash of everything that affects the trained parameters."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_mapping(cls, values: dict[str, str | object]) -> "RunConfig":
        """Build from string values such as those of a key=value file."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            name = key.replace("-", "_")
            if name == "lambda":
                name = "lam"
            if name not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = _coerce(name, raw)
        return cls(**kwargs)


_BOOL = {"true": True, "yes": True, "1": True, "on": True, "false": False, "no": False, "0": False, "off": False}
_FLOAT_FIELDS = {"tau", "lr", "dropout_rate", "noise_std", "desync_prob"}
_STR_FIELDS = {"supervision", "psp_mode", "optimizer", "output_dir"}


def _coerce(name: str, raw):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if name in ("use_weighting", "asp_relu"):
            return _BOOL[raw.lower()]
        if name in ("lam", "manifest"):
            if raw.lower() in ("", "none", "default"):
                return None
            return float(raw) if name == "lam" else raw
        if name in _FLOAT_FIELDS:
            return float(raw)
        if name in _STR_FIELDS:
            return raw
        return int(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"cannot parse {name}={raw!r}") from None


def parse_config_file(path) -> dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


# ----------------------------------------------------------------------
# data


@dataclass
class Dataset:
    train: list
    val: list
    test: list


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.manifest:
        samples = avdata.load_manifest(cfg.manifest)
    else:
        samples = avdata.generate_dataset(cfg.generator_config(), cfg.n_videos)
    if not samples:
        raise ConfigError("dataset is empty")
    first = samples[0]
    if first.visual.shape[1:] != (cfg.N, cfg.d_v) or first.audio.shape[1] != cfg.d_a or first.C != cfg.C:
        raise ConfigError(
            f"dataset dims (N={first.visual.shape[1]}, d_v={first.visual.shape[2]}, d_a={first.audio.shape[1]}, "
            f"C={first.C}) do not match config"
        )
    tr, va, te = avdata.split_indices(len(samples), cfg.data_seed)
    return Dataset([samples[i] for i in tr], [samples[i] for i in va], [samples[i] for i in te])


def background_index(cfg: RunConfig) -> int:
    return cfg.C - 1


# ----------------------------------------------------------------------
# training


@dataclass
class MetricsReport:
    segment_accuracy: float
    per_class_accuracy: list[float]
    initial_loss: float | None = None
    loss_curve: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0
    n_segments: int = 0

    def to_text(self) -> str:
        """``key: value`` lines. Wall-clock time and the output directory are left out so reports are reproducible."""
        lines = [
            f"segment_accuracy: {self.segment_accuracy:.6f}",
            "per_class_accuracy: " + ",".join(_fmt(a) for a in self.per_class_accuracy),
            f"n_segments: {self.n_segments}",
        ]
        if self.initial_loss is not None:
            lines.append(f"initial_loss: {self.initial_loss!r}")
        lines.append("loss_curve: " + ",".join(repr(x) for x in self.loss_curve))
        for k, v in sorted(self.config.items()):
            if k == "output_dir":
                continue
            lines.append(f"config.{k}: {v}")
        return "\n".join(lines) + "\n"

    def csv_header(self) -> str:
        return "supervision,psp_mode,tau,lambda,use_weighting,seed,segment_accuracy,final_loss"

    def csv_row(self) -> str:
        c = self.config
        final = self.loss_curve[-1] if self.loss_curve else float("nan")
        return (f"{c.get('supervision')},{c.get('psp_mode')},{c.get('tau')},{c.get('lam')},"
                f"{c.get('use_weighting')},{c.get('seed')},{self.segment_accuracy:.6f},{final!r}")


def _fmt(x: float) -> str:
    return "nan" if np.isnan(x) else f"{x:.6f}"


def _run_forward(params: Params, cfg: RunConfig, visual, audio, training=False, rng=None) -> Output:
    return forward(
        params, visual, audio, supervision=cfg.supervision, mode=cfg.psp_mode, tau=cfg.tau,
        use_weighting=cfg.use_weighting, dropout_rate=cfg.dropout_rate, rng=rng, training=training,
        asp_relu=cfg.asp_relu,
    )


def objective(cfg: RunConfig, out: Output, batch: avdata.Batch):
    if cfg.supervision == "fully":
        return fully_loss(out.o_fully, batch.labels_full, out.v_psp, out.a_psp, batch.relevance, cfg.effective_lambda)
    return weak_bce_loss(out.o_weak, batch.labels_weak)


def _subset(batch: avdata.Batch, idx) -> avdata.Batch:
    return avdata.Batch(*(a[idx] for a in batch))


def dataset_loss(params: Params, cfg: RunConfig, batch: avdata.Batch) -> float:
    n = len(batch.audio)
    total = 0.0
    for start in range(0, n, EVAL_BATCH):
        sub = _subset(batch, slice(start, start + EVAL_BATCH))
        out = _run_forward(params, cfg, sub.visual, sub.audio)
        total += objective(cfg, out, sub).item() * len(sub.audio)
    return total / n


def train(cfg: RunConfig, dataset: Dataset | None = None) -> tuple[Params, MetricsReport]:
    """Optimise a fresh model; returns parameters and a report on the test split."""
    cfg.validate()
    started = time.perf_counter()
    dataset = dataset if dataset is not None else load_dataset(cfg)
    bg = background_index(cfg)
    dtype = cfg.dtype
    params = init_params(cfg.dims, cfg.seed, dtype)
    flat = flatten(params)
    opt = make_optimizer(cfg.optimizer, flat, cfg.lr)
    rng = np.random.default_rng([cfg.seed, 0x7A1])
    batch = avdata.stack(dataset.train, bg, dtype)
    n = len(batch.audio)

    initial = dataset_loss(params, cfg, batch) if cfg.epochs > 0 else None
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            sub = _subset(batch, order[start:start + cfg.batch_size])
            out = _run_forward(params, cfg, sub.visual, sub.audio, training=True, rng=rng)
            loss = objective(cfg, out, sub)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(epoch, b, value)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(value)
        curve.append(float(np.mean(losses)))
        log.debug("epoch %d loss %.6f", epoch, curve[-1])

    report = evaluate(params, cfg, dataset.test)
    report.initial_loss = initial
    report.loss_curve = curve
    report.wall_clock_seconds = time.perf_counter() - started
    return params, report


# ----------------------------------------------------------------------
# evaluation


def predict_segments(params: Params, cfg: RunConfig, samples: Sequence[avdata.VideoSample]) -> np.ndarray:
    """Per-segment class predictions, shape (videos, T).

    Fully supervised: argmax of the segment class probabilities. Weakly
    supervised: argmax of the segment scores, overridden by background
    wherever the segment weight falls below 0.5.
    """
    bg = background_index(cfg)
    preds = []
    for start in range(0, len(samples), EVAL_BATCH):
        chunk = samples[start:start + EVAL_BATCH]
        visual = np.stack([s.visual for s in chunk]).astype(cfg.dtype)
        audio = np.stack([s.audio for s in chunk]).astype(cfg.dtype)
        out = _run_forward(params, cfg, visual, audio)
        if cfg.supervision == "fully":
            preds.append(out.o_fully.data.argmax(axis=-1))
        else:
            p = out.f_h.data.argmax(axis=-1)
            p[out.phi.data[..., 0] < 0.5] = bg
            preds.append(p)
    return np.concatenate(preds) if preds else np.zeros((0, cfg.T), dtype=int)


def score(preds: np.ndarray, truth: np.ndarray, C: int) -> tuple[float, list[float]]:
    correct = preds == truth
    per_class = []
    for c in range(C):
        sel = truth == c
        per_class.append(float(correct[sel].mean()) if sel.any() else float("nan"))
    return float(correct.mean()), per_class


def evaluate(params: Params, cfg: RunConfig, samples: Sequence[avdata.VideoSample]) -> MetricsReport:
    """Segment accuracy in eval mode (no dropout); ``params`` are not modified."""
    if samples and (samples[0].visual.shape[1:] != (cfg.N, cfg.d_v) or samples[0].C != cfg.C):
        raise ConfigError("checkpoint dims do not match the dataset")
    preds = predict_segments(params, cfg, samples)
    truth = np.stack([s.labels_full.argmax(axis=1) for s in samples])
    acc, per_class = score(preds, truth, cfg.C)
    return MetricsReport(acc, per_class, config=cfg.to_dict(), n_segments=int(truth.size))


# ----------------------------------------------------------------------
# checkpoints


_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path, params: Params, cfg: RunConfig) -> None:
    """Write a byte-stable .npz: fixed zip timestamps, sorted entries."""
    entries = {k: t.data for k, t in flatten(params).items()}
    entries["__config__"] = np.frombuffer(json.dumps(cfg.to_dict(), sort_keys=True).encode(), dtype=np.uint8)
    entries["__fingerprint__"] = np.frombuffer(cfg.fingerprint().encode(), dtype=np.uint8)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(entries):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(entries[key]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{key}.npy", date_time=_ZIP_DATE), buf.getvalue())


def load_checkpoint(path) -> tuple[Params, RunConfig]:
    with np.load(path, allow_pickle=False) as z:
        cfg = RunConfig(**json.loads(bytes(z["__config__"]).decode()))
        stored = {k for k in z.files if not k.startswith("__")}
        # restore the canonical parameter order
        order = list(flatten(init_params(cfg.dims, 0, cfg.dtype)))
        if stored != set(order):
            raise ConfigError(f"{path}: checkpoint parameters do not match its config")
        flat = {k: z[k] for k in order}
    return unflatten(flat, cfg.dtype), cfg
