"""Command-line entry point: gen, train, eval, ablate, export."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import data as avdata
from .ablate import AXES, ablate
from .export import export_artifacts
from .tensor import DimensionError, NumericError
from .train import (
    ConfigError,
    DivergenceError,
    RunConfig,
    evaluate,
    load_checkpoint,
    load_dataset,
    parse_config_file,
    save_checkpoint,
    train,
)

RULE = "=" * 60


def _config_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", type=Path, help="key=value file")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config field")
    g.add_argument("--supervision", choices=["fully", "weakly"])
    g.add_argument("--psp-mode", choices=["full-psp", "asp", "wpsp", "off"])
    g.add_argument("--tau", type=float)
    g.add_argument("--lambda", dest="lam", type=float)
    g.add_argument("--no-weighting-branch", action="store_true")
    g.add_argument("--seed", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--precision", type=int, choices=[32, 64])
    g.add_argument("--manifest")
    g.add_argument("--output-dir")


def build_config(args) -> RunConfig:
    values: dict = parse_config_file(args.config) if args.config else {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    for name in ("supervision", "psp_mode", "tau", "lam", "seed", "epochs", "precision", "manifest", "output_dir"):
        value = getattr(args, name, None)
        if value is not None:
            values[name] = value
    if getattr(args, "no_weighting_branch", False):
        values["use_weighting"] = False
    return RunConfig.from_mapping(values)


def _emit(title: str, body: str) -> None:
    print(f"{RULE}\n{title}\n{RULE}")
    print(body, end="" if body.endswith("\n") else "\n")


def _write_report(out: Path, report) -> None:
    (out / "metrics.txt").write_text(report.to_text())
    (out / "summary.csv").write_text(report.csv_header() + "\n" + report.csv_row() + "\n")
    _emit("metrics", report.to_text())
    _emit("summary", report.csv_header() + "\n" + report.csv_row())


def cmd_gen(args) -> None:
    cfg = build_config(args)
    out = Path(args.out)
    feats = out / "features"
    feats.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in avdata.generate_dataset(cfg.generator_config(), cfg.n_videos):
        path = feats / f"{s.video_id}.avef"
        avdata.save_features(s, path)
        paths.append(path)
    avdata.write_manifest(paths, out / "manifest.txt")
    _emit("gen", f"videos: {len(paths)}\nmanifest: {out / 'manifest.txt'}\n")


def cmd_train(args) -> None:
    cfg = build_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    params, report = train(cfg)
    save_checkpoint(out / "checkpoint.npz", params, cfg)
    (out / "timing.txt").write_text(f"wall_clock_seconds: {report.wall_clock_seconds:.3f}\n")
    _write_report(out, report)


def _load(args):
    params, cfg = load_checkpoint(args.checkpoint)
    overrides = {k: v for k, v in (("manifest", args.manifest),) if v is not None}
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir
    return params, cfg.replace(**overrides)


def cmd_eval(args) -> None:
    params, cfg = _load(args)
    started = time.perf_counter()
    data = load_dataset(cfg)
    samples = {"train": data.train, "val": data.val, "test": data.test}[args.split]
    report = evaluate(params, cfg, samples)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "timing.txt").write_text(f"wall_clock_seconds: {time.perf_counter() - started:.3f}\n")
    _write_report(out, report)


def _parse_axis(spec: str):
    name, _, values = spec.partition("=")
    if name not in AXES:
        raise ConfigError(f"unknown ablation axis {name!r}; expected one of {', '.join(AXES)}")
    if not values:
        return name, None
    key = AXES[name][0]
    return name, tuple(RunConfig.from_mapping({key: v}).to_dict()[key] for v in values.split(","))


def cmd_ablate(args) -> None:
    cfg = build_config(args)
    axes = dict(_parse_axis(a) for a in (args.axis or ["psp-mode"]))
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()

    def progress(r, accs):
        logging.getLogger(__name__).info("replicate %d: %s", r, ", ".join(f"{a:.4f}" for a in accs))

    table = ablate(cfg, axes, args.replicates, args.workers, on_result=progress)
    (out / "ablation.csv").write_text(table.to_csv())
    (out / "ablation.txt").write_text(table.to_text())
    (out / "timing.txt").write_text(f"wall_clock_seconds: {time.perf_counter() - started:.3f}\n")
    _emit("ablation", table.to_text())
    _emit("ablation csv", table.to_csv())


def cmd_export(args) -> None:
    params, cfg = _load(args)
    samples = load_dataset(cfg).test[: args.videos]
    paths = export_artifacts(params, cfg, samples, args.out)
    _emit("export", "\n".join(str(p) for p in paths) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pspav", description="Audio-visual event localisation with positive sample propagation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset and manifest")
    _config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one model")
    _config_args(p)
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "evaluate a checkpoint"), ("export", cmd_export, "export similarity grids and embeddings")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=True, type=Path)
        p.add_argument("--manifest")
        p.add_argument("--output-dir")
        p.set_defaults(func=func)
    sub.choices["eval"].add_argument("--split", choices=["train", "val", "test"], default="test")
    sub.choices["export"].add_argument("--out", required=True)
    sub.choices["export"].add_argument("--videos", type=int, default=5, help="number of test videos")

    p = sub.add_parser("ablate", help="train variants over seeded replicates")
    _config_args(p)
    p.add_argument("--axis", action="append", metavar="NAME[=V1,V2]", help=f"one of {', '.join(AXES)}; repeatable")
    p.add_argument("--replicates", type=int, default=5)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_ablate)
    return parser


ERRORS = (ConfigError, avdata.ConfigError, avdata.FeatureFileError, avdata.LabelError, DivergenceError,
          DimensionError, NumericError, OSError, KeyError, ValueError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except ERRORS as exc:
        reason = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {type(exc).__name__}: {reason}", file=sys.stderr)
        return 1
    return 0
