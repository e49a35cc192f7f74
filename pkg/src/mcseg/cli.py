"""``mcseg`` command line: datagen, train, eval, render, benchmark.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
4 request that makes no sense for the given model.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_SEMANTIC = 0, 2, 3, 4

# fixed class colours for rendered label maps; ignored pixels are black
RENDER_PALETTE = np.array([
    [128, 64, 128], [244, 164, 96], [70, 130, 180], [220, 20, 60], [255, 215, 0], [0, 128, 0],
    [148, 0, 211], [0, 206, 209], [255, 105, 180], [139, 69, 19], [127, 255, 0], [30, 30, 30],
    [255, 255, 255], [100, 100, 100],
], dtype=np.uint8)


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _load_json(path, what):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise CliError(f"cannot read {what} {path}: {exc.strerror}", EXIT_IO) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}", EXIT_CONFIG) from exc


def _dataset(path):
    from .scenegen import Dataset

    try:
        return Dataset(path)
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc


def _load_model(args):
    from .models import load_checkpoint
    from .trainer import checkpoint_path, select_epoch

    if args.checkpoint:
        path = args.checkpoint
    else:
        if args.epoch is not None:
            epoch = args.epoch
        else:
            try:
                epoch = select_epoch(args.run)
            except FileNotFoundError as exc:
                raise CliError(f"no log.csv in run directory {args.run}", EXIT_IO) from exc
            except ValueError as exc:
                raise CliError(str(exc), EXIT_CONFIG) from exc
        path = checkpoint_path(args.run, epoch)
    if not os.path.exists(path):
        raise CliError(f"checkpoint not found: {path}", EXIT_IO)
    try:
        model, meta = load_checkpoint(path)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    return model, meta, path


# -- commands -------------------------------------------------------------------


def cmd_datagen(args):
    from .scenegen import DatasetConfig, write_dataset

    raw = _load_json(args.config, "dataset config")
    try:
        cfg = DatasetConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"{args.config}: {exc}", EXIT_CONFIG) from exc
    try:
        write_dataset(cfg, args.out)
    except OSError as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    print(f"wrote {cfg.n_source + cfg.n_target_train + cfg.n_target_test} samples to {args.out}")


def cmd_train(args):
    from .trainer import TrainConfig, TrainingDiverged, train

    raw = _load_json(args.config, "training config")
    if not isinstance(raw, dict):
        raise CliError(f"{args.config}: training config must be a JSON object", EXIT_CONFIG)
    raw = dict(raw, data_dir=args.data, out_dir=args.out)
    if args.source_only:
        raw["mode"] = "source_only"
    try:
        cfg = TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"{args.config}: {exc}", EXIT_CONFIG) from exc
    _dataset(args.data)
    try:
        train(cfg, progress=lambda row: print(_progress_line(row), flush=True))
    except TrainingDiverged as exc:
        raise CliError(f"{exc} in {args.out}", EXIT_SEMANTIC) from exc
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    except OSError as exc:
        raise CliError(str(exc), EXIT_IO) from exc


def _progress_line(row):
    parts = [f"epoch {row['epoch']}"]
    for k, v in row.items():
        if k != "epoch" and v is not None:
            parts.append(f"{k}={v:.4f}")
    return " ".join(parts)


def cmd_eval(args):
    from .evaluate import evaluate
    from .metrics import write_report

    model, meta, path = _load_model(args)
    if args.refine and model.tasks != "triple":
        raise CliError(
            f"--refine needs a boundary map, but this model was trained with tasks={model.tasks!r}; "
            "train with tasks='triple' or drop --refine", EXIT_SEMANTIC)
    if not 0 < args.boundary_threshold < 1:
        raise CliError(f"--boundary-threshold must lie in (0, 1), got {args.boundary_threshold}", EXIT_CONFIG)
    ds = _dataset(args.data)
    if args.split not in ds.splits():
        raise CliError(f"split {args.split!r} not in dataset (have {ds.splits()})", EXIT_CONFIG)
    try:
        report, _ = evaluate(model, ds, args.split, args.refine, args.boundary_threshold,
                             meta={"checkpoint": os.path.basename(path), "epoch": meta.get("epoch")})
    except ValueError as exc:
        raise CliError(str(exc), EXIT_SEMANTIC) from exc
    try:
        write_report(args.report, report)
    except OSError as exc:
        raise CliError(f"cannot write {args.report}: {exc.strerror}", EXIT_IO) from exc
    s = report["scores"]
    print(" ".join(f"{k}={s[k]}" for k in ("pixAcc", "mAcc", "fwIoU", "mIoU")))


def colorize(labels):
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (3,), dtype=np.uint8)
    valid = labels < len(RENDER_PALETTE)
    out[valid] = RENDER_PALETTE[labels[valid]]
    return out


def cmd_render(args):
    from .evaluate import predict
    from .netpbm import write_pgm, write_ppm

    model, _, _ = _load_model(args)
    ds = _dataset(args.data)
    ids = [s for s in args.ids.split(",") if s]
    entries = []
    for sid in ids:
        try:
            entries.append(ds.entry(sid))
        except KeyError:
            raise CliError(f"unknown sample id {sid!r}", EXIT_CONFIG) from None
    os.makedirs(args.out, exist_ok=True)
    for e in entries:
        d = ds.load(e, ("rgb", "hha", "labels"))
        labels, bmap = predict(model, d["rgb"] if model.uses_rgb() else None, d["hha"] if model.uses_hha() else None)
        rgb = np.clip(np.rint(d["rgb"].transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
        panel = np.concatenate([rgb, colorize(labels), colorize(d["labels"])], axis=1)
        try:
            write_ppm(os.path.join(args.out, f"{e['id']}_triptych.ppm"), panel)
            if bmap is not None:
                write_pgm(os.path.join(args.out, f"{e['id']}_boundary.pgm"),
                          np.clip(np.rint(bmap * 255), 0, 255).astype(np.uint8))
        except OSError as exc:
            raise CliError(f"cannot write under {args.out}: {exc.strerror}", EXIT_IO) from exc
    print(f"rendered {len(entries)} sample(s) to {args.out}")


def cmd_benchmark(args):
    from .benchmark import run_benchmark, validate_config

    config = _load_json(args.config, "benchmark config")
    try:
        validate_config(config)
    except (TypeError, ValueError) as exc:
        raise CliError(f"{args.config}: {exc}", EXIT_CONFIG) from exc
    try:
        table = run_benchmark(config, args.out, log=lambda msg: print(msg, file=sys.stderr, flush=True))
    except OSError as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    for row in table["rows"]:
        print(row["method"], " ".join(f"{k}={row[k]}" for k in ("pixAcc", "mAcc", "fwIoU", "mIoU", "ods")))


# -- entry point ----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="mcseg", description="Two-classifier adversarial domain adaptation for RGB-D segmentation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("datagen", help="generate the synthetic source/target dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_datagen)

    s = sub.add_parser("train", help="train one model")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--source-only", action="store_true", help="train on source labels alone (no adaptation)")
    s.set_defaults(func=cmd_train)

    for name, helptext in (("eval", "score a checkpoint on a split"), ("render", "write prediction triptychs")):
        s = sub.add_parser(name, help=helptext)
        src = s.add_mutually_exclusive_group(required=True)
        src.add_argument("--run", help="run directory; the lowest-entropy epoch is used unless --epoch is given")
        if name == "eval":
            src.add_argument("--checkpoint")
        s.add_argument("--epoch", type=int)
        s.add_argument("--data", required=True)
        if name == "eval":
            s.add_argument("--split", default="target_test")
            s.add_argument("--refine", action="store_true")
            s.add_argument("--boundary-threshold", type=float, default=0.5)
            s.add_argument("--report", required=True)
            s.set_defaults(func=cmd_eval)
        else:
            s.add_argument("--ids", required=True, help="comma-separated sample ids")
            s.add_argument("--out", required=True)
            s.set_defaults(func=cmd_render, checkpoint=None)

    s = sub.add_parser("benchmark", help="run a variant matrix and write a results table")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_benchmark)
    return p


def _thread_limit():
    raw = os.environ.get("MCSEG_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"MCSEG_THREADS must be a positive integer, got {raw!r}", EXIT_CONFIG) from None
    if n < 1:
        raise CliError(f"MCSEG_THREADS must be a positive integer, got {raw!r}", EXIT_CONFIG)
    return n


def main(argv=None):
    from threadpoolctl import threadpool_limits

    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=_thread_limit()):
            args.func(args)
    except CliError as exc:
        print(f"mcseg {args.command}: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
