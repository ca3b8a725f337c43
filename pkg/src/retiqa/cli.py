"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Every
subcommand is reproducible: identical arguments and inputs give
byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluate as eval_mod
from . import imgproc, nnet, priors
from . import train as train_mod


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip() != ""]
    except ValueError:
        raise _UsageError(f"bad seed list {text!r}, expected e.g. 1,2,3") from None


def build_parser() -> _Parser:
    p = _Parser(prog="retiqa", description="Retinal image quality assessment toolkit")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    sp = sub.add_parser("synth", help="generate a labelled synthetic dataset")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--good", type=int, default=0, metavar="N")
    sp.add_argument("--usable", type=int, default=0, metavar="N")
    sp.add_argument("--reject", type=int, default=0, metavar="N")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--size", type=int, default=128, metavar="PX")
    sp.set_defaults(func=_cmd_synth)

    sp = sub.add_parser("preprocess", help="FoV crop, pad square, resize")
    sp.add_argument("--in", dest="infile", required=True, metavar="IMG")
    sp.add_argument("--out", required=True, metavar="IMG")
    sp.add_argument("--no-fov", action="store_true", help="skip circle detection")
    sp.add_argument("--target-size", type=int, default=224)
    sp.set_defaults(func=_cmd_preprocess)

    sp = sub.add_parser("priors", help="write exact dark/bright channel maps")
    sp.add_argument("--in", dest="infile", required=True, metavar="IMG")
    sp.add_argument("--dark", required=True, metavar="OUT.pgm")
    sp.add_argument("--bright", required=True, metavar="OUT.pgm")
    sp.add_argument("--radius", type=int, default=7)
    sp.set_defaults(func=_cmd_priors)

    sp = sub.add_parser("train", help="train a model on a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--root", required=True)
    sp.add_argument("--config", help="JSON file mirroring TrainConfig fields")
    sp.add_argument("--out", required=True, metavar="CKPT")
    sp.add_argument("--log", help="CSV epoch log path")
    sp.add_argument("--val-manifest")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--variant", choices=nnet.VARIANTS)
    sp.add_argument("--no-augment", action="store_true")
    sp.set_defaults(func=_cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--root", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--report", required=True, metavar="OUT.json")
    sp.set_defaults(func=_cmd_eval)

    sp = sub.add_parser("kfold", help="write stratified k-fold split manifests")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--k", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-prefix", required=True, metavar="P")
    sp.set_defaults(func=_cmd_kfold)

    sp = sub.add_parser("gradcam", help="write a Grad-CAM heatmap as PGM")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--in", dest="infile", required=True, metavar="IMG")
    sp.add_argument("--class", dest="klass", required=True,
                    choices=["good", "usable", "reject"])
    sp.add_argument("--out", required=True, metavar="OUT.pgm")
    sp.set_defaults(func=_cmd_gradcam)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient check")
    sp.add_argument("--tolerance", type=float, default=1e-5)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=_cmd_gradcheck)

    sp = sub.add_parser("bench", help="fast vs naive windowed extremum timing")
    sp.add_argument("--size", type=int, default=1024, metavar="N")
    sp.add_argument("--radius", type=int, default=7, metavar="R")
    sp.add_argument("--min-speedup", type=float, default=0.0,
                    help="fail (exit 2) when the speedup falls below this")
    sp.set_defaults(func=_cmd_bench)

    sp = sub.add_parser("ablate", help="synth->train->eval for all stem variants")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--seeds", required=True, metavar="S1,S2,...")
    sp.add_argument("--train-per-class", type=int, default=200)
    sp.add_argument("--test-per-class", type=int, default=100)
    sp.add_argument("--size", type=int, default=128)
    sp.add_argument("--epochs", type=int, default=15)
    sp.add_argument("--batch-size", type=int, default=8)
    sp.add_argument("--data-seed", type=int, default=1337)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=_cmd_ablate)
    return p


def _cmd_synth(args) -> int:
    counts = {
        data_mod.QualityLabel.GOOD: args.good,
        data_mod.QualityLabel.USABLE: args.usable,
        data_mod.QualityLabel.REJECT: args.reject,
    }
    params = data_mod.SyntheticParams(image_size=args.size)
    manifest = data_mod.generate_dataset(args.out, counts, args.seed, params)
    print(f"wrote {len(manifest)} images and manifest.txt to {args.out}")
    return 0


def _cmd_preprocess(args) -> int:
    image = imgproc.read_image(args.infile)
    cfg = imgproc.PreprocessConfig(target_size=args.target_size)
    if args.no_fov:
        circle = imgproc.full_frame_circle(image)
    else:
        circle = imgproc.detect_fov(image, cfg)
    out = imgproc.crop_pad_resize(image, circle, cfg)
    imgproc.write_png(args.out, out)
    print(f"wrote {args.out} ({cfg.target_size}x{cfg.target_size})")
    return 0


def _cmd_priors(args) -> int:
    image = imgproc.read_image(args.infile)
    imgproc.write_pgm(args.dark, priors.dark_channel(image, args.radius))
    imgproc.write_pgm(args.bright, priors.bright_channel(image, args.radius))
    print(f"wrote {args.dark} and {args.bright} (radius {args.radius})")
    return 0


def _cmd_train(args) -> int:
    doc = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.epochs is not None:
        doc["epochs"] = args.epochs
    if args.batch_size is not None:
        doc["batch_size"] = args.batch_size
    if args.variant is not None:
        doc["variant"] = args.variant
    if args.no_augment:
        doc.update(hflip=False, vflip=False, rotate=False)
    cfg = train_mod.TrainConfig.from_dict(doc)
    manifest = data_mod.load_manifest(args.manifest)
    val_manifest = None
    if args.val_manifest:
        val_manifest = data_mod.load_manifest(args.val_manifest)
    ckpt, log = train_mod.train(cfg, manifest, args.root, val_manifest, args.root)
    train_mod.save_checkpoint(ckpt, args.out)
    if args.log:
        train_mod.write_log(log, args.log)
    for entry in log:
        vf = "" if entry.val_macro_f is None else f"  val_macro_f {entry.val_macro_f:.4f}"
        print(f"epoch {entry.epoch:3d}  loss {entry.mean_loss:.4f}{vf}")
    print(f"wrote checkpoint {args.out}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = train_mod.load_checkpoint(args.ckpt)
    manifest = data_mod.load_manifest(args.manifest)
    report = train_mod.evaluate_model(ckpt, manifest, args.root)
    Path(args.report).write_text(eval_mod.report_to_json(report), encoding="utf-8")
    sys.stdout.write(eval_mod.format_report(report))
    return 0


def _cmd_kfold(args) -> int:
    manifest = data_mod.load_manifest(args.manifest)
    pairs = data_mod.kfold_split(manifest, args.k, args.seed)
    for i, (tr, val) in enumerate(pairs):
        data_mod.save_manifest(tr, f"{args.out_prefix}fold{i}_train.txt")
        data_mod.save_manifest(val, f"{args.out_prefix}fold{i}_val.txt")
    print(f"wrote {len(pairs)} fold pairs with prefix {args.out_prefix}")
    return 0


def _cmd_gradcam(args) -> int:
    ckpt = train_mod.load_checkpoint(args.ckpt)
    image = imgproc.read_image(args.infile)
    target = int(data_mod.label_from_name(args.klass))
    heat = eval_mod.gradcam(ckpt.model(), image, target)
    imgproc.write_pgm(args.out, heat)
    print(f"wrote {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    report = nnet.gradient_check(seed=args.seed)
    ok = True
    for entry in report.entries:
        status = "PASS" if entry.max_rel_err <= args.tolerance else "FAIL"
        ok &= status == "PASS"
        print(f"{status}  {entry.name:24s}  max_rel_err {entry.max_rel_err:.3e}")
    return 0 if ok else 2


def _cmd_bench(args) -> int:
    stats = priors.bench_sliding_extremum(args.size, args.radius)
    print(
        f"size {stats['size']}  radius {stats['radius']}  "
        f"naive {stats['naive_s']*1e3:.1f} ms  fast {stats['fast_s']*1e3:.1f} ms  "
        f"speedup {stats['speedup']:.1f}x"
    )
    if args.min_speedup and stats["speedup"] < args.min_speedup:
        raise RuntimeError(
            f"speedup {stats['speedup']:.2f}x below required {args.min_speedup}x"
        )
    return 0


def _cmd_ablate(args) -> int:
    seeds = _parse_seeds(args.seeds)
    if not seeds:
        raise _UsageError("at least one seed is required")
    result = train_mod.run_ablation(
        args.out,
        seeds,
        train_per_class=args.train_per_class,
        test_per_class=args.test_per_class,
        image_size=args.size,
        epochs=args.epochs,
        batch_size=args.batch_size,
        data_seed=args.data_seed,
        workers=args.workers,
    )
    sys.stdout.write(result.table())
    print(f"wrote {Path(args.out) / 'results.csv'}")
    return 0


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # --help and friends
        return 0 if exc.code in (0, None) else 1
    try:
        return int(args.func(args) or 0)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
