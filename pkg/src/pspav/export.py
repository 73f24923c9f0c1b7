"""Plain-text export of similarity grids, segment weights and embeddings.

Files per video, named ``<video-id>.<kind>.csv``:

* ``gva`` / ``gav``: T rows of T comma-separated values (skipped when PSP is off)
* ``phi``: T rows, one weight each (weak setting only)
* ``emb``: header ``modality,segment,label,f0,...`` then one row per segment
  for ``v`` and for ``a``
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import data as avdata
from .model import Params, forward
from .train import RunConfig

KINDS = ("gva", "gav", "phi", "emb")


class Embeddings(NamedTuple):
    v_psp: np.ndarray  # (T, d_l)
    a_psp: np.ndarray
    labels: np.ndarray  # (T,) class index per segment


def _fmt(x) -> str:
    return repr(float(x))


def write_grid(path, grid: np.ndarray) -> None:
    grid = np.atleast_2d(grid)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerows([[_fmt(x) for x in row] for row in grid])


def read_grid(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(x) for x in row] for row in csv.reader(fh) if row])


def write_embeddings(path, emb: Embeddings) -> None:
    d = emb.v_psp.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["modality", "segment", "label"] + [f"f{i}" for i in range(d)])
        for name, feats in (("v", emb.v_psp), ("a", emb.a_psp)):
            for t, row in enumerate(feats):
                writer.writerow([name, t, int(emb.labels[t])] + [_fmt(x) for x in row])


def read_embeddings(path) -> Embeddings:
    rows = {"v": [], "a": []}
    labels = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            modality, t, label = row[0], int(row[1]), int(row[2])
            rows[modality].append([float(x) for x in row[3:]])
            labels[t] = label
    return Embeddings(np.array(rows["v"]), np.array(rows["a"]), np.array([labels[t] for t in sorted(labels)]))


def export_artifacts(params: Params, cfg: RunConfig, samples: Sequence[avdata.VideoSample], out_dir) -> list[Path]:
    """Write the per-video files for ``samples``; returns the paths written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for s in samples:
        out = forward(params, s.visual.astype(cfg.dtype), s.audio.astype(cfg.dtype), supervision=cfg.supervision,
                      mode=cfg.psp_mode, tau=cfg.tau, use_weighting=cfg.use_weighting, asp_relu=cfg.asp_relu)
        files = []
        if out.gamma_va is not None:
            files += [("gva", write_grid, out.gamma_va.data), ("gav", write_grid, out.gamma_av.data)]
        if out.phi is not None:
            files.append(("phi", write_grid, out.phi.data))
        files.append(("emb", write_embeddings, Embeddings(out.v_psp.data, out.a_psp.data, s.labels_full.argmax(axis=1))))
        for kind, write, value in files:
            path = out_dir / f"{s.video_id}.{kind}.csv"
            write(path, value)
            written.append(path)
    return written
