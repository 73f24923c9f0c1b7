"""Synthetic audio-visual event videos and the AVEF feature file format.

A video has T one-second segments. Each segment carries an audio vector
and a grid of N visual cells. Segments inside the event span show the
event class in both modalities; the rest are background, except that a
background segment may still show the event in exactly one modality
(an unsynchronised distractor).
"""

from __future__ import annotations

import dataclasses
import functools
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

MAGIC = b"AVEF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sH5I")
_CHECKSUM = struct.Struct("<I")


class ConfigError(ValueError):
    pass


class LabelError(ValueError):
    pass


class FeatureFileError(ValueError):
    """Base class for unreadable feature files."""


class HeaderError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


class ChecksumError(FeatureFileError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    T: int = 10
    C: int = 5
    N: int = 16
    d_v: int = 64
    d_a: int = 32
    noise_std: float = 4.0
    span_min: int = 2
    span_max: int = 8
    desync_prob: float = 0.5
    background_index: int = -1
    seed: int = 0

    def __post_init__(self):
        if self.background_index < 0:
            object.__setattr__(self, "background_index", self.C + self.background_index)
        self.validate()

    def validate(self) -> None:
        for name in ("T", "C", "N", "d_v", "d_a"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.C < 2:
            raise ConfigError("need at least one event class besides background")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")
        if not 0 <= self.span_min <= self.span_max <= self.T:
            raise ConfigError(f"need 0 <= span_min <= span_max <= T, got {self.span_min}, {self.span_max}, {self.T}")
        if not 0.0 <= self.desync_prob <= 1.0:
            raise ConfigError("desync_prob must lie in [0, 1]")
        if not 0 <= self.background_index < self.C:
            raise ConfigError(f"background_index {self.background_index} outside [0, {self.C})")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    def replace(self, **changes) -> "GeneratorConfig":
        return dataclasses.replace(self, **changes)

    @property
    def active_cells(self) -> int:
        # number of spatial cells showing the sound source
        return max(1, self.N // 4)


@dataclass
class VideoSample:
    visual: np.ndarray  # (T, N, d_v)
    audio: np.ndarray  # (T, d_a)
    labels_full: np.ndarray  # (T, C) one-hot rows
    video_id: str = ""

    @property
    def labels_weak(self) -> np.ndarray:
        return weak_label_from_full(self.labels_full)

    @property
    def T(self) -> int:
        return self.audio.shape[0]

    @property
    def C(self) -> int:
        return self.labels_full.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, VideoSample):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and np.array_equal(self.visual, other.visual)
            and np.array_equal(self.audio, other.audio)
            and np.array_equal(self.labels_full, other.labels_full)
        )


# ----------------------------------------------------------------------
# labels


def _check_one_hot(labels_full: np.ndarray) -> None:
    labels_full = np.asarray(labels_full)
    if labels_full.ndim != 2:
        raise LabelError(f"labels must be a T x C matrix, got shape {labels_full.shape}")
    binary = np.isin(labels_full, (0.0, 1.0)).all()
    if not binary or not np.all(labels_full.sum(axis=1) == 1):
        raise LabelError("every label row must be one-hot")


def weak_label_from_full(labels_full: np.ndarray) -> np.ndarray:
    """Video-level label: the column-wise mean of the segment labels."""
    _check_one_hot(labels_full)
    return np.asarray(labels_full).mean(axis=0)


def event_relevance_labels(labels_full: np.ndarray, background_index: int) -> np.ndarray:
    """1 for segments holding an event, 0 for background segments."""
    labels_full = np.asarray(labels_full)
    _check_one_hot(labels_full)
    if not 0 <= background_index < labels_full.shape[1]:
        raise LabelError(f"background index {background_index} outside [0, {labels_full.shape[1]})")
    return (labels_full.argmax(axis=1) != background_index).astype(labels_full.dtype)


# ----------------------------------------------------------------------
# generation


@functools.lru_cache(maxsize=32)
def class_prototypes(cfg: GeneratorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Fixed (audio, visual) prototypes per class, drawn once per dataset seed."""
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    audio = rng.standard_normal((cfg.C, cfg.d_a))
    visual = rng.standard_normal((cfg.C, cfg.d_v))
    audio.setflags(write=False)
    visual.setflags(write=False)
    return audio, visual


def generate_video(cfg: GeneratorConfig, video_seed: int, video_id: str | None = None) -> VideoSample:
    cfg.validate()
    proto_a, proto_v = class_prototypes(cfg)
    rng = np.random.default_rng([cfg.seed, 1, video_seed])
    bg = cfg.background_index
    events = [c for c in range(cfg.C) if c != bg]
    event = events[rng.integers(len(events))]
    span = int(rng.integers(cfg.span_min, cfg.span_max + 1))
    start = int(rng.integers(0, cfg.T - span + 1))

    seg_class = np.full(cfg.T, bg)
    seg_class[start:start + span] = event
    audio_class = seg_class.copy()
    visual_class = seg_class.copy()
    for t in range(cfg.T):
        if seg_class[t] == bg and rng.random() < cfg.desync_prob:
            if rng.random() < 0.5:
                audio_class[t] = event
            else:
                visual_class[t] = event

    audio = proto_a[audio_class] + cfg.noise_std * rng.standard_normal((cfg.T, cfg.d_a))
    visual = cfg.noise_std * rng.standard_normal((cfg.T, cfg.N, cfg.d_v))
    for t in range(cfg.T):
        cells = rng.choice(cfg.N, size=cfg.active_cells, replace=False)
        visual[t, cells] += proto_v[visual_class[t]]

    labels = np.zeros((cfg.T, cfg.C), dtype=np.float32)
    labels[np.arange(cfg.T), seg_class] = 1.0
    return VideoSample(
        visual=visual.astype(np.float32),
        audio=audio.astype(np.float32),
        labels_full=labels,
        video_id=video_id if video_id is not None else f"vid{video_seed:05d}",
    )


def generate_dataset(cfg: GeneratorConfig, n_videos: int) -> list[VideoSample]:
    return [generate_video(cfg, i) for i in range(n_videos)]


def split_indices(n: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seed-stable 70/10/20 train/val/test split by video."""
    order = np.random.default_rng([seed, 0x5B117]).permutation(n)
    n_train = int(round(0.7 * n))
    n_val = int(round(0.1 * n))
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


class Batch(NamedTuple):
    visual: np.ndarray  # (B, T, N, d_v)
    audio: np.ndarray  # (B, T, d_a)
    labels_full: np.ndarray  # (B, T, C)
    labels_weak: np.ndarray  # (B, C)
    relevance: np.ndarray  # (B, T)


def stack(samples: Sequence[VideoSample], background_index: int, dtype=np.float32) -> Batch:
    labels = np.stack([s.labels_full for s in samples]).astype(dtype)
    return Batch(
        visual=np.stack([s.visual for s in samples]).astype(dtype),
        audio=np.stack([s.audio for s in samples]).astype(dtype),
        labels_full=labels,
        labels_weak=labels.mean(axis=1),
        relevance=(labels.argmax(axis=2) != background_index).astype(dtype),
    )


# ----------------------------------------------------------------------
# AVEF files


def save_features(sample: VideoSample, path) -> None:
    T, N, d_v = sample.visual.shape
    d_a = sample.audio.shape[1]
    C = sample.labels_full.shape[1]
    if sample.audio.shape[0] != T or sample.labels_full.shape[0] != T:
        raise ValueError("visual, audio and label arrays disagree on T")
    payload = b"".join(
        np.ascontiguousarray(a, dtype="<f4").tobytes()
        for a in (sample.visual, sample.audio, sample.labels_full)
    )
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, T, N, d_v, d_a, C)
    Path(path).write_bytes(header + payload + _CHECKSUM.pack(zlib.crc32(payload)))


def load_features(path) -> VideoSample:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise HeaderError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, T, N, d_v, d_a, C = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise HeaderError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise HeaderError(f"{path}: unsupported format version {version}")
    if min(T, N, d_v, d_a, C) == 0:
        raise HeaderError(f"{path}: zero dimension in header (T={T}, N={N}, d_v={d_v}, d_a={d_a}, C={C})")
    sizes = (T * N * d_v, T * d_a, T * C)
    n_payload = 4 * sum(sizes)
    expected = _HEADER.size + n_payload + _CHECKSUM.size
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    if len(raw) > expected:
        raise HeaderError(f"{path}: {len(raw) - expected} trailing bytes after checksum")
    payload = raw[_HEADER.size:_HEADER.size + n_payload]
    (stored,) = _CHECKSUM.unpack_from(raw, _HEADER.size + n_payload)
    if zlib.crc32(payload) != stored:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    v_end, a_end = sizes[0], sizes[0] + sizes[1]
    return VideoSample(
        visual=flat[:v_end].reshape(T, N, d_v),
        audio=flat[v_end:a_end].reshape(T, d_a),
        labels_full=flat[a_end:].reshape(T, C),
        video_id=path.name.removesuffix(".avef"),
    )


def write_manifest(paths: Sequence, manifest_path) -> None:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent.resolve()
    lines = []
    for p in paths:
        p = Path(p).resolve()
        try:
            lines.append(str(p.relative_to(base)))
        except ValueError:
            lines.append(str(p))
    manifest_path.write_text("\n".join(lines) + "\n")


def read_manifest(manifest_path) -> list[Path]:
    manifest_path = Path(manifest_path)
    out = []
    for line in manifest_path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        p = Path(line)
        out.append(p if p.is_absolute() else manifest_path.parent / p)
    return out


def load_manifest(manifest_path) -> list[VideoSample]:
    return [load_features(p) for p in read_manifest(manifest_path)]
