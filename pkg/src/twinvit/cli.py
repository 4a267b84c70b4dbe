"""``twinvit`` command-line entry point.

Exit codes: 0 success, 2 usage, 3 data or configuration error, 4 numeric
failure.  Settings come from an optional config file, then ``--set`` pairs,
then dedicated flags; environment variables are never read.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import tensor as T
from . import vit
from .dataio import load_checkpoint, load_image, load_images, resolve_dataset, save_checkpoint, write_pgm
from .errors import DataError, TwinVitError
from .plotting import plot_loss_logs
from .trainer import (METHODS, backbone_from_checkpoint, config_from_flat, epoch_means, format_config,
                      load_config, train)


def _key_value(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twinvit", description="Self-supervised ViT pretraining and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="pretrain a backbone and write a checkpoint plus loss CSV")
    p.add_argument("--config", type=Path, help="key = value configuration file")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--data", help="image directory or manifest CSV (overrides 'dataset')")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", dest="overrides", type=_key_value, action="append", default=[], metavar="KEY=VALUE",
                   help="override any configuration key (repeatable)")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--log", type=Path, help="loss CSV path (default: checkpoint path with .csv suffix)")

    p = sub.add_parser("probe", help="linear probe on frozen [CLS] features")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", required=True, help="labeled image directory or manifest CSV")
    p.add_argument("--test-data", help="separate labeled evaluation set (default: hold out part of --data)")
    p.add_argument("--holdout", type=float, default=0.2, help="held-out fraction when --test-data is absent")
    p.add_argument("--fraction", type=float, default=1.0, help="fraction of training labels used")
    p.add_argument("--epochs", type=int, default=ev.PROBE_EPOCHS)
    p.add_argument("--lr", type=float, default=ev.PROBE_LR)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--which", choices=("student", "teacher"), default="student")
    p.add_argument("--out", type=Path, required=True, help="result CSV")
    p.add_argument("--projection", type=Path, help="also write a 2-D random projection CSV of the test features")

    p = sub.add_parser("attend", help="render final-layer [CLS] attention maps as PGM files")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--which", choices=("student", "teacher"), default="student")

    p = sub.add_parser("plot", help="plot per-epoch mean losses from loss CSVs as SVG")
    p.add_argument("--loss-csv", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _print_settings(pairs: dict) -> None:
    for key, value in pairs.items():
        print(f"{key} = {value}")
    print(flush=True)


# ----------------------------------------------------------------- commands
def cmd_pretrain(args) -> int:
    flat = load_config(args.config) if args.config else {}
    flat.update(dict(args.overrides))
    for key, value in (("method", args.method), ("dataset", args.data), ("epochs", args.epochs),
                       ("batch_size", args.batch_size), ("seed", args.seed)):
        if value is not None:
            flat[key] = value
    cfg = config_from_flat(flat)
    log = args.log or args.out.with_suffix(".csv")
    print(format_config(cfg))
    print(f"out = {args.out}\nlog = {log}\n", flush=True)
    ckpt, records, _ = train(cfg, log_path=log)
    for epoch, mean in epoch_means(records):
        print(f"epoch {epoch}: mean loss {mean:.6g}")
    save_checkpoint(ckpt, args.out)
    print(f"wrote {args.out} ({len(records)} steps)")
    return 0


def _labeled(path: str):
    manifest = resolve_dataset(path)
    if not manifest.labeled:
        raise DataError(f"probing requires labeled data; {path} has unlabeled entries")
    return np.stack(load_images(manifest)), manifest.labels


def cmd_probe(args) -> int:
    _print_settings({k: v for k, v in vars(args).items() if k != "command"})
    ckpt = load_checkpoint(args.ckpt)
    images, labels = _labeled(args.data)
    if args.test_data:
        train_idx, test_set = np.arange(len(labels)), _labeled(args.test_data)
    else:
        train_idx, test_idx = ev.train_test_split(labels, args.holdout, args.seed)
        test_set = images[test_idx], labels[test_idx]
    train_feats = ev.extract_features(ckpt, images[train_idx], args.which, labels=labels[train_idx])
    test_feats = ev.extract_features(ckpt, test_set[0], args.which, labels=test_set[1])
    num_classes = max(train_feats.num_classes, test_feats.num_classes)
    probe = ev.train_probe(train_feats, args.fraction, args.epochs, args.lr, args.seed, num_classes)
    result = ev.evaluate_probe(probe, test_feats)
    ev.write_probe_result(args.out, ckpt.method, result)
    if args.projection:
        ev.write_projection(args.projection, ev.random_projection_2d(test_feats.features, args.seed), test_feats.labels)
    print(f"{ckpt.method}: loss={result.loss:.6g} acc1={result.acc1:.4f} acc5={result.acc5:.4f}")
    return 0


def minmax_u8(a: np.ndarray) -> np.ndarray:
    """Scale to 0..255; a constant map becomes all zeros."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.rint((a - lo) / (hi - lo) * 255.0).astype(np.uint8)


def attention_maps(ckpt, image: np.ndarray, which: str = "student") -> np.ndarray:
    """Per-head [CLS] attention over the patch grid, shape (heads, g, g)."""
    params, cfg = backbone_from_checkpoint(ckpt, which)
    with T.no_grad():
        _, attn = vit.forward(params, cfg, image[None], prefix="backbone.")
    grid = image.shape[-1] // cfg.patch_size
    return vit.cls_attention_map(attn, (grid, grid))[0]


def cmd_attend(args) -> int:
    _print_settings({k: v for k, v in vars(args).items() if k != "command"})
    maps = attention_maps(load_checkpoint(args.ckpt), load_image(args.image), args.which)
    written = []
    for i, m in enumerate(maps):
        written.append(Path(f"{args.out_prefix}_head{i}.pgm"))
        write_pgm(written[-1], minmax_u8(m))
    written.append(Path(f"{args.out_prefix}_mean.pgm"))
    write_pgm(written[-1], minmax_u8(maps.mean(axis=0)))
    print(f"wrote {len(written)} maps of {maps.shape[1]}x{maps.shape[2]}")
    return 0


def cmd_plot(args) -> int:
    _print_settings({"loss_csv": ",".join(str(p) for p in args.loss_csv), "out": args.out})
    plot_loss_logs(args.loss_csv, args.out)
    print(f"wrote {args.out}")
    return 0


def _diagnostic(exc: Exception) -> None:
    print("error: " + " ".join(str(exc).split()), file=sys.stderr)


COMMANDS = {"pretrain": cmd_pretrain, "probe": cmd_probe, "attend": cmd_attend, "plot": cmd_plot}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        # Non-finite values are caught explicitly and reported as NumericError.
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return COMMANDS[args.command](args)
    except TwinVitError as exc:
        _diagnostic(exc)
        return exc.exit_code
    except OSError as exc:
        _diagnostic(exc)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
