"""``fddf`` command line.

Exit codes: 0 success, 1 usage error, 2 data or model error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from fddf.checkpoint import load_checkpoint, save_checkpoint
from fddf.disentangle import BRANCHES, highlight_fraction, prepare_branch_inputs
from fddf.errors import FddfError
from fddf.imageio import load_image, write_ppm
from fddf.model import FddfModel, ModelConfig, model_forward
from fddf.synth import DatasetManifest, build_dataset
from fddf.training import (
    LEAVE_ONE_OUT,
    TrainConfig,
    evaluate,
    format_table,
    prepare_data,
    run_ablation,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _branches(value: str) -> tuple[str, ...]:
    names = tuple(v.strip() for v in value.split(",") if v.strip())
    bad = [n for n in names if n not in BRANCHES]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"branches must be a comma list drawn from {','.join(BRANCHES)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fddf", description="Recaptured-image forensics with disentangled features.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mix", default=None, help="moire=..,edge=..,artifact=..,other=.. or four numbers")
    s.add_argument("--multi-rate", type=float, default=0.0)
    s.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("W", "H"))

    t = sub.add_parser("train", help="train a model on a manifest")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out-ckpt", type=Path, required=True)
    t.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    t.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    t.add_argument("--batch", type=int, default=TrainConfig.batch_size)
    t.add_argument("--momentum", type=float, default=TrainConfig.momentum)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--branches", type=_branches, default=BRANCHES)
    t.add_argument("--clip", type=float, default=TrainConfig.max_grad_norm, help="global gradient-norm bound (0 = off)")

    e = sub.add_parser("eval", help="precision/recall of a checkpoint on a manifest")
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--format", choices=("table", "records"), default="table")

    r = sub.add_parser("predict", help="score individual images")
    r.add_argument("--ckpt", type=Path, required=True)
    r.add_argument("--images", type=Path, nargs="+", required=True)
    r.add_argument("--threshold", type=float, default=0.5)

    a = sub.add_parser("ablate", help="all-branches vs without-each-branch report")
    a.add_argument("--data", type=Path, required=True)
    a.add_argument("--test", type=Path, default=None, help="held-out manifest (default: 80/20 split of --data)")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    a.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    a.add_argument("--batch", type=int, default=TrainConfig.batch_size)
    a.add_argument("--format", choices=("table", "records"), default="table")

    d = sub.add_parser("dump-branches", help="write the four branch inputs as 8-bit images")
    d.add_argument("--image", type=Path, required=True)
    d.add_argument("--out", type=Path, required=True)
    return p


def _cmd_synth(args, out) -> None:
    manifest = build_dataset(args.n, args.out, args.mix, args.multi_rate, args.seed, tuple(args.size))
    c = manifest.counts()
    print(f"wrote {c['samples']} samples ({c['original']} original, {c['recaptured']} recaptured) to {args.out}", file=out)


def _cmd_train(args, out) -> None:
    manifest = DatasetManifest.load(args.data)
    config = TrainConfig(
        args.epochs, args.batch, args.lr, args.momentum, args.seed, max_grad_norm=args.clip or None
    )
    model = FddfModel(ModelConfig(branches=args.branches), seed=args.seed)
    model, history = train(model, manifest, config)
    save_checkpoint(model, args.out_ckpt)
    for i, (loss, acc) in enumerate(zip(history.loss, history.accuracy), 1):
        print(f"epoch\t{i}\tloss\t{loss:.6f}\taccuracy\t{acc:.6f}", file=out)


def _cmd_eval(args, out) -> None:
    model = load_checkpoint(args.ckpt)
    metrics = evaluate(model, DatasetManifest.load(args.data), threshold=args.threshold)
    if args.format == "records":
        print("\n".join(metrics.records("model")), file=out)
        return
    (tn, fp), (fn, tp) = metrics.confusion.tolist()
    flag = " (undefined: no positive predictions)" if metrics.precision_undefined else ""
    print(f"precision  {metrics.precision:.4f}{flag}", file=out)
    print(f"recall     {metrics.recall:.4f}", file=out)
    print(f"accuracy   {metrics.accuracy:.4f}", file=out)
    print(f"confusion  tn={tn} fp={fp} fn={fn} tp={tp}", file=out)
    weights = "  ".join(f"{b}={w:.4f}" for b, w in metrics.mean_fusion_weights.items())
    print(f"weights    {weights}", file=out)


def _cmd_predict(args, out) -> None:
    model = load_checkpoint(args.ckpt)
    for path in args.images:
        img = load_image(path)
        probs, weights = model_forward(img, model)
        p = float(probs[1])
        row = weights.full()[0]
        record = {
            "path": str(path),
            "p_recaptured": round(p, 8),
            "label": "recaptured" if p >= args.threshold else "original",
            "weights": {b: round(float(w), 8) for b, w in zip(BRANCHES, row)},
            "highlight_fraction": highlight_fraction(img),
        }
        print(json.dumps(record), file=out)


def _cmd_ablate(args, out) -> None:
    manifest = DatasetManifest.load(args.data)
    if args.test is not None:
        train_m, test_m = manifest, DatasetManifest.load(args.test)
    else:
        order = np.random.default_rng(args.seed).permutation(len(manifest))
        cut = int(round(0.8 * len(manifest)))
        train_m, test_m = manifest.subset(sorted(order[:cut])), manifest.subset(sorted(order[cut:]))
    config = TrainConfig(args.epochs, args.batch, args.lr, seed=args.seed)
    rows = run_ablation(config, prepare_data(train_m), prepare_data(test_m), LEAVE_ONE_OUT)
    if args.format == "records":
        for row in rows:
            print("\n".join(row.metrics.records(row.name)), file=out)
    else:
        print(format_table(rows), file=out)


def _to_u8(plane_stack: np.ndarray) -> np.ndarray:
    lo, hi = float(plane_stack.min()), float(plane_stack.max())
    scaled = np.zeros_like(plane_stack) if hi <= lo else (plane_stack - lo) / (hi - lo) * 255.0
    return np.rint(scaled).astype(np.uint8).transpose(1, 2, 0)


def _cmd_dump(args, out) -> None:
    inputs = prepare_branch_inputs(load_image(args.image))
    args.out.mkdir(parents=True, exist_ok=True)
    for name, arr in inputs.as_dict().items():
        target = args.out / f"{name}.ppm"
        write_ppm(target, _to_u8(arr))
        print(target, file=out)


COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "ablate": _cmd_ablate,
    "dump-branches": _cmd_dump,
}


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=err)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=err)
    try:
        COMMANDS[args.command](args, out)
    except (FddfError, OSError, ValueError) as exc:
        print(f"fddf {args.command}: {exc}", file=err)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
