"""Command line entry point: ``hassc <verb> [options]``.

Exit codes: 0 success, 1 training aborted on a non-finite loss, 2 config or
checkpoint-version error, 3 data error.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, dataio
from .config import ExperimentConfig, dump_config, load_config
from .errors import (BoundsError, ConfigError, FormatError, NonFiniteLossError, ShapeError,
                     VersionError)
from .grid import GridDims, SemanticGrid
from .hardness import lga_histogram
from .metrics import evaluate, report_json
from .toymodel import ToyNet, load_checkpoint, save_checkpoint
from .train import expected_param_count, load_scene, predict_labels, run_training

log = logging.getLogger("hassc")

EXIT_OK, EXIT_ABORT, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None):
        cfg = replace(cfg, out=args.out)
    return cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _dims(text: str) -> GridDims:
    parts = [int(v) for v in text.replace("x", " ").replace(",", " ").split()]
    if len(parts) != 3:
        raise ConfigError(f"--dims needs three integers, got {text!r}")
    return GridDims(*parts)


# -- verbs ------------------------------------------------------------------

def cmd_lga_stats(args) -> int:
    cfg = _config(args)
    if args.input:
        sc = cfg.scene
        label_map = dataio.load_label_map(args.label_map or sc.label_map)
        try:
            gt = dataio.decode(dataio.read_file_set(args.input), sc.grid_dims, label_map,
                               sc.num_classes, sc.bit_order)
        except FormatError as e:
            raise FormatError(f"{args.input}: {e}") from None
    else:
        gt, _ = load_scene(cfg)
    hist = lga_histogram(gt, cfg.lga)
    out = _out_dir(cfg) / "lga_histogram.csv"
    out.write_text(hist.to_csv())
    print("lga  empty  nonempty")
    for a, (e, n) in enumerate(zip(hist.empty_counts, hist.nonempty_counts)):
        print(f"{a:3d} {e:6d} {n:9d}")
    print(f"wrote {out}")
    return EXIT_OK


def write_run(report, cfg: ExperimentConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.rows_csv())
    (out / "metrics_initial.json").write_text(report_json(report.initial_metrics))
    (out / "metrics_final.json").write_text(report_json(report.final_metrics))
    (out / "lga_histogram.csv").write_text(report.lga_histogram.to_csv())
    (out / "config.ini").write_text(dump_config(cfg))
    save_checkpoint(out / "student.ckpt", report.params)
    save_checkpoint(out / "teacher.ckpt", report.teacher.params, step=report.teacher.step)


def cmd_train(args) -> int:
    cfg = _config(args)
    every = max(1, cfg.steps // 10)

    def progress(i, row):
        if (i + 1) % every == 0:
            log.info("step %d total %.5f", row["step"], row["total"])

    report = run_training(cfg, progress=progress)
    out = _out_dir(cfg)
    write_run(report, cfg, out)
    print(report_json({"final": report.final_metrics["L"]}), end="")
    print(f"wrote {out}")
    return EXIT_OK


ABLATION_METRICS = ("iou_S", "miou_S", "iou_M", "miou_M", "iou_L", "miou_L", "final_distill")


def ablation_cells(cfg: ExperimentConfig):
    keys = list(cfg.sweep)
    for values in itertools.product(*(cfg.sweep[k] for k in keys)):
        yield dict(zip(keys, values))


def run_ablation(cfg: ExperimentConfig, out: Path | None = None) -> str:
    """Train every cell of ``cfg.sweep`` and return the table as CSV text.

    A failing cell gets ``status=failed`` and its error message; the sweep goes on.
    """
    if not cfg.sweep:
        raise ConfigError("ablate needs a [sweep] section with at least one key")
    keys = list(cfg.sweep)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys + list(ABLATION_METRICS) + ["status", "error"])
    for i, cell in enumerate(ablation_cells(cfg)):
        try:
            cell_cfg = cfg
            for k, v in cell.items():
                cell_cfg = cell_cfg.override(k, v)
            cell_cfg = replace(cell_cfg, sweep={})
            rep = run_training(cell_cfg)
            if out is not None:
                write_run(rep, cell_cfg, out / f"cell_{i:03d}")
            m = rep.final_metrics
            last = rep.rows[-1]["distill"] if rep.rows else 0.0
            vals = [m[r][k] for r in ("S", "M", "L") for k in ("iou", "miou")] + [last]
            w.writerow([cell[k] for k in keys] + [repr(float(v)) for v in vals] + ["ok", ""])
        except Exception as e:   # noqa: BLE001 - recorded in the table
            log.warning("ablation cell %s failed: %s", cell, e)
            w.writerow([cell[k] for k in keys] + [""] * len(ABLATION_METRICS)
                       + ["failed", f"{type(e).__name__}: {e}"])
    return buf.getvalue()


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    table = run_ablation(cfg, out)
    (out / "ablation.csv").write_text(table)
    print(table, end="")
    return EXIT_OK


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint) -> str:
    """Inference only: coarse head, trilinear upsampling, argmax. Returns metrics JSON."""
    params, _ = load_checkpoint(checkpoint, expected_param_count(cfg))
    gt, feats = load_scene(cfg)
    net = ToyNet(feats.d, gt.num_classes, params=params)
    return report_json(evaluate(predict_labels(net, feats, gt), gt))


def cmd_eval(args) -> int:
    cfg = _config(args)
    text = evaluate_checkpoint(cfg, args.checkpoint)
    if args.out:
        (_out_dir(cfg) / "metrics_eval.json").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_decode(args) -> int:
    label_map = dataio.load_label_map(args.label_map)
    try:
        g = dataio.decode(dataio.read_file_set(args.input), _dims(args.dims), label_map,
                          args.num_classes, args.bit_order)
    except FormatError as e:
        raise FormatError(f"{args.input}: {e}") from None
    np.save(args.output, g.labels.astype(np.uint8 if g.invalid_id < 256 else np.int64))
    counts = np.bincount(g.labels.ravel(), minlength=args.num_classes)
    for c in range(args.num_classes):
        print(f"class {c}: {counts[c]}")
    print(f"invalid: {int((~g.valid).sum())}")
    return EXIT_OK


def cmd_encode(args) -> int:
    labels = np.load(args.input).astype(np.int64)
    if labels.ndim != 3:
        raise ShapeError(f"{args.input}: expected a 3-D label array, got shape {labels.shape}")
    g = SemanticGrid(GridDims(*labels.shape), labels, args.num_classes)
    inverse = dataio.invert_label_map(dataio.load_label_map(args.label_map))
    dataio.write_file_set(args.output, dataio.encode(g, inverse, args.bit_order))
    print(f"wrote {args.output}.bin/.label/.invalid")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hassc", description="Hardness-aware voxel training toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI experiment config (defaults if omitted)")
        sp.add_argument("--seed", type=int, help="master seed, overrides the config")
        sp.add_argument("--out", help="output directory, overrides the config")

    sp = sub.add_parser("lga-stats", help="LGA histogram of a scene or decoded frame")
    common(sp)
    sp.add_argument("--input", help="file-set stem to decode instead of the configured scene")
    sp.add_argument("--label-map")
    sp.set_defaults(func=cmd_lga_stats)

    sp = sub.add_parser("train", help="train one configuration")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("ablate", help="train every cell of the [sweep] section")
    common(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("eval", help="evaluate a student checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_eval)

    for verb, func, helptext in (("decode", cmd_decode, "file set -> .npy labels"),
                                 ("encode", cmd_encode, ".npy labels -> file set")):
        sp = sub.add_parser(verb, help=helptext)
        sp.add_argument("--input", required=True)
        sp.add_argument("--output", required=True)
        sp.add_argument("--label-map", required=True)
        sp.add_argument("--num-classes", type=int, default=20)
        sp.add_argument("--bit-order", choices=("msb", "lsb"), default="msb")
        if verb == "decode":
            sp.add_argument("--dims", default="256 256 32")
        sp.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, VersionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, ShapeError, BoundsError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
