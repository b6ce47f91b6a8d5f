"""Command-line entry point: ``palmseg <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import config as cfgmod
from . import unet
from .data import ImageSample, augment_dataset, binarize_mask, load_dataset, resize_to, split, write_dataset
from .errors import CheckpointError, ConfigError, DataError, GradCheckError, PalmSegError, TrainingError
from .imaging import baseline_pipeline
from .io import read_png, write_png
from .train import metrics, overlay, postprocess, predict_proba, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4


class UsageError(PalmSegError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# flag -> dotted config key
OVERRIDES = {
    "depth": "model.depth",
    "base_channels": "model.base_channels",
    "cfm_reduction": "model.cfm_reduction",
    "no_cfm": "model.use_cfm",
    "lr": "train.lr",
    "batch_size": "train.batch_size",
    "epochs": "train.max_epochs",
    "loss": "train.loss",
    "multiplier": "augment.multiplier",
    "size": "data.size",
    "threshold": "predict.threshold",
    "post_blur": "predict.post_blur",
}


def _parser() -> _Parser:
    p = _Parser(prog="palmseg", description="U-Net with Context Fusion Module for palm-line segmentation")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--data", help="dataset root with images/ and masks/")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--device", default="cpu", choices=["cpu"])
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("--depth", type=int)
    common.add_argument("--base-channels", type=int)
    common.add_argument("--cfm-reduction", type=int)
    common.add_argument("--no-cfm", action="store_true", help="identity bottleneck instead of the CFM")
    common.add_argument("-v", "--verbose", action="store_true")

    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sp = sub.add_parser("prepare", parents=[common], help="load, resize and split a dataset")
    sp.add_argument("--size", type=int)

    sub.add_parser("augment", parents=[common], help="write an augmented copy of a dataset").add_argument(
        "--multiplier", type=int)

    sp = sub.add_parser("train", parents=[common], help="train a model")
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--loss", choices=["bce", "mse"])

    sp = sub.add_parser("eval", parents=[common], help="score predictions against masks")
    sp.add_argument("--pred", help="directory of predicted masks (<id>.png)")
    sp.add_argument("--model", help="checkpoint to run instead of --pred")
    sp.add_argument("--split", choices=["train", "val", "test"], help="restrict to a split from splits.tsv")
    sp.add_argument("--compare-baseline", action="store_true", help="also score the classical baseline")
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--post-blur", action="store_const", const="true")

    sp = sub.add_parser("predict", parents=[common], help="segment images with a trained model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True, help="PNG file or directory")
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--post-blur", action="store_const", const="true")

    sp = sub.add_parser("baseline", parents=[common], help="run the classical Canny pipeline")
    sp.add_argument("--input", help="PNG file or directory (defaults to --data/images)")

    sp = sub.add_parser("gradcheck", parents=[common], help="64-bit finite-difference gradient suite")
    sp.add_argument("--size", type=int, default=16)

    sub.add_parser("params", parents=[common], help="print the parameter count of a configuration")
    return p


def _resolve(args) -> dict:
    overrides: dict[str, str] = {}
    for flag, key in OVERRIDES.items():
        value = getattr(args, flag, None)
        if flag == "no_cfm":
            if value:
                overrides[key] = "false"
        elif value is not None and not (flag == "size" and args.command == "gradcheck"):
            overrides[key] = str(value)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    overrides["device"] = args.device
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    return cfgmod.resolve(args.config, overrides)


def _need(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise UsageError(f"{args.command}: --{n.replace('_', '-')} is required")


def _out_dir(args, flat) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.write_snapshot(flat, out / "config.snapshot")
    return out


def _read_splits(root: Path) -> dict[str, str]:
    path = root / "splits.tsv"
    if not path.exists():
        return {}
    table = {}
    for line in path.read_text().splitlines():
        if line.strip():
            sid, label = line.split("\t")[:2]
            table[sid] = label
    return table


def _load(root, report_to: Path | None = None) -> list[ImageSample]:
    report: list[str] = []
    samples = load_dataset(root, report)
    if report_to is not None and report:
        report_to.write_text("\n".join(report) + "\n")
    splits = _read_splits(Path(root))
    return [replace(s, split=splits.get(s.id)) for s in samples]


def _inputs(path: str) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.png"))
        if not files:
            raise DataError(f"no PNG files in '{p}'")
        return files
    if not p.exists():
        raise DataError(f"input '{p}' does not exist")
    return [p]


def cmd_prepare(args, flat, rc) -> int:
    _need(args, "data", "out")
    out = _out_dir(args, flat)
    samples = _load(args.data, out / "load_report.txt")
    size = int(rc.data["size"])
    samples = split([resize_to(s, size) for s in samples], tuple(rc.data["ratios"]), rc.seed)
    write_dataset(samples, out)
    (out / "splits.tsv").write_text("".join(f"{s.id}\t{s.split}\n" for s in samples))
    counts = {k: sum(s.split == k for s in samples) for k in ("train", "val", "test")}
    print(f"prepared {len(samples)} samples at {size}x{size}: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_augment(args, flat, rc) -> int:
    _need(args, "data", "out")
    out = _out_dir(args, flat)
    samples = _load(args.data, out / "load_report.txt")
    result = augment_dataset(samples, rc.augment)
    write_dataset(result, out)
    if any(s.split for s in samples):
        (out / "splits.tsv").write_text("".join(f"{s.id}\t{s.split}\n" for s in result if s.split))
    print(f"augmented {len(samples)} sources into {len(result)} samples")
    return EXIT_OK


def cmd_train(args, flat, rc) -> int:
    _need(args, "data", "out")
    out = _out_dir(args, flat)
    samples = _load(args.data, out / "load_report.txt")
    if not any(s.split for s in samples):
        samples = split(samples, tuple(rc.data["ratios"]), rc.seed)
    tr = [s for s in samples if s.split == "train"]
    va = [s for s in samples if s.split == "val"]
    if not tr or not va:
        raise DataError(f"'{args.data}': need non-empty train and val splits (got {len(tr)} / {len(va)})")
    model = unet.build(rc.model, rc.seed)
    log_path = out / "train.log"
    log_fh = open(log_path, "w")
    try:
        result = train(model, tr, va, rc.train, on_epoch=lambda r: (log_fh.write(r.line() + "\n"), log_fh.flush()))
    except TrainingError:
        unet.save(model, out / "model.ckpt")
        raise
    finally:
        log_fh.close()
    unet.save(model, out / "model.ckpt")
    print(f"best epoch {result.best_epoch}, val loss {result.best_val_loss:.6f}; "
          f"{unet.param_count(model)} parameters; wrote {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args, flat, rc) -> int:
    _need(args, "data")
    if (args.pred is None) == (args.model is None):
        raise UsageError("eval: give exactly one of --pred or --model")
    samples = _load(args.data)
    if args.split:
        samples = [s for s in samples if s.split == args.split]
        if not samples:
            raise DataError(f"'{args.data}': no samples in split '{args.split}'")
    targets = [s.mask for s in samples]
    threshold = float(rc.predict["threshold"])
    rows = []
    if args.pred:
        preds = []
        for s in samples:
            path = Path(args.pred) / f"{s.id}.png"
            if not path.exists():
                raise DataError(f"missing prediction '{path}'")
            preds.append(binarize_mask(read_png(path, mode="L")))
        method, params = "predictions", None
    else:
        model = unet.load(args.model)
        preds = [postprocess(predict_proba(model, s.image, rc.train.use_negative), threshold,
                             bool(rc.predict["post_blur"]), float(rc.predict["blur_sigma"])) for s in samples]
        method, params = ("Unet-CF" if model.config.use_cfm else "Unet"), unet.param_count(model)
    report = metrics(preds, targets, threshold)
    print(report.to_text())
    rows.append(report.table_row(method, params))
    if args.compare_baseline:
        base = metrics([baseline_pipeline(s.image, rc.baseline) for s in samples], targets)
        rows.append(base.table_row("Canny baseline"))
    print("method\tparams\tf1\tmiou")
    print("\n".join(rows))
    if args.out:
        out = _out_dir(args, flat)
        (out / "metrics.txt").write_text(report.to_text() + "\n")
        (out / "metrics.tsv").write_text("method\tparams\tf1\tmiou\n" + "\n".join(rows) + "\n")
    return EXIT_OK


def cmd_predict(args, flat, rc) -> int:
    _need(args, "out")
    out = _out_dir(args, flat)
    model = unet.load(args.model)
    for path in _inputs(args.input):
        image = read_png(path)
        prob = predict_proba(model, image, rc.train.use_negative)
        mask = postprocess(prob, float(rc.predict["threshold"]), bool(rc.predict["post_blur"]),
                           float(rc.predict["blur_sigma"]))
        write_png(out / f"{path.stem}_mask.png", mask)
        write_png(out / f"{path.stem}_overlay.png", overlay(image, mask))
        print(f"{path.name}: {int((mask > 0).sum())} line pixels")
    return EXIT_OK


def cmd_baseline(args, flat, rc) -> int:
    _need(args, "out")
    if args.input is None and args.data is None:
        raise UsageError("baseline: give --input or --data")
    out = _out_dir(args, flat)
    files = _inputs(args.input or str(Path(args.data) / "images"))
    preds, targets = [], []
    for path in files:
        mask = baseline_pipeline(read_png(path), rc.baseline)
        write_png(out / f"{path.stem}.png", mask)
        if args.data:
            mpath = Path(args.data) / "masks" / f"{path.stem}.png"
            if mpath.exists():
                preds.append(mask)
                targets.append(binarize_mask(read_png(mpath, mode="L")))
    print(f"wrote {len(files)} baseline masks to {out}")
    if preds:
        print(metrics(preds, targets).to_text())
    return EXIT_OK


def cmd_gradcheck(args, flat, rc) -> int:
    from .gradcheck import run_suite

    depth = args.depth or 2
    base = args.base_channels or 4
    results = run_suite(seed=rc.seed, depth=depth, base_channels=base, size=args.size)
    for name, err in results.items():
        print(f"{name}\t{err:.3e}")
    worst = max(results.values())
    print(f"max relative error {worst:.3e}")
    return EXIT_OK if worst < GRADCHECK_TOL else EXIT_NUMERIC


def cmd_params(args, flat, rc) -> int:
    model = unet.build(rc.model, rc.seed)
    print(unet.param_count(model))
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "augment": cmd_augment,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "baseline": cmd_baseline,
    "gradcheck": cmd_gradcheck,
    "params": cmd_params,
}


def run(argv: list[str] | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        flat = _resolve(args)
        rc = cfgmod.build_run_config(flat)
        return COMMANDS[args.command](args, flat, rc)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, GradCheckError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
