"""Command-line entry point: ``blockcs {train,eval,reconstruct,gradcheck,export-matrix}``."""
import argparse
import contextlib
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from blockcs.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from blockcs.data import (
    ConfigError, ImageFormatError, crop_to_multiple, load_directory, load_image, to_uint8, write_pgm,
)
from blockcs.evaluation import blockiness_index, emit_diff_image, evaluate_suite, psnr, write_report
from blockcs.gradcheck import run_gradcheck
from blockcs.kernels import ShapeError
from blockcs.model import METHODS, CSModel, MeasurementOp, ModelConfig
from blockcs.training import Trainer, TrainConfig, TrainingDivergedError, write_loss_csv

logger = logging.getLogger("blockcs")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def checkpoint_name(method, rate):
    return f"{method}_r{rate:g}.bcs"


def write_matrix_csv(path, matrix):
    """One row per measurement kernel, values written with 9 significant
    digits so float32 entries round-trip exactly."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in matrix:
            writer.writerow([format(float(v), ".9g") for v in row])


def read_matrix_csv(path, dtype=np.float32):
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    return np.array(rows, dtype=dtype)


def measurement_from_matrix(matrix):
    M, n = matrix.shape
    B = int(round(n ** 0.5))
    if B * B != n:
        raise ShapeError(f"matrix has {n} columns, which is not a square block size")
    return MeasurementOp(np.ascontiguousarray(matrix.reshape(M, 1, B, B)))


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _float_list(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _str_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def _add_model_flags(p):
    p.add_argument("--rate", type=float, default=0.25, help="measurement rate M/B^2 in (0, 1]")
    p.add_argument("--block", type=int, default=16, help="block size B in pixels (>= 2)")
    p.add_argument("--channels", type=int, default=32, help="lift channels c")
    p.add_argument("--res-blocks", type=int, default=5, help="number of residual blocks K")
    p.add_argument("--seed", type=int, default=0, help="seed for initialization and data order")


def _add_common(p):
    p.add_argument("--config", default=None, help="flat key=value file; command-line flags override it")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="blockcs",
        description="Block compressive sensing with full-image learned reconstruction.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("train", help="train a full or baseline model", formatter_class=fmt)
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--method", choices=METHODS, default="full", help="reconstruction model")
    p.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate (>= 0)")
    p.add_argument("--epochs", type=int, default=200, help="training epochs")
    p.add_argument("--batch", type=int, default=8, help="batch size T")
    p.add_argument("--crop", type=int, default=64, help="training crop size (multiple of --block)")
    p.add_argument("--steps-per-epoch", type=int, default=None,
                   help="batches per epoch (default: ceil(images / batch))")
    p.add_argument("--clip-norm", type=float, default=None, help="clip gradients to this global norm")
    p.add_argument("--log-every", type=int, default=10, help="log the loss every N steps")
    p.add_argument("--data", default=None, help="directory of training images (.pgm/.png)")
    p.add_argument("--checkpoint", default=None,
                   help="checkpoint to write (default: OUT/<method>_r<rate>.bcs)")
    p.add_argument("--resume", default=None, help="checkpoint to resume training from")

    p = sub.add_parser("eval", help="PSNR / blockiness report over rates and methods", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--checkpoint", default=".",
                   help="checkpoint file, or directory holding <method>_r<rate>.bcs files")
    p.add_argument("--rates", type=_float_list, default=[0.01, 0.04, 0.1, 0.25],
                   help="comma-separated measurement rates (directory mode)")
    p.add_argument("--methods", type=_str_list, default=list(METHODS),
                   help="comma-separated methods (directory mode)")
    p.add_argument("--test", default=None, help="directory of test images")

    p = sub.add_parser("reconstruct", help="measure and reconstruct one image", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--checkpoint", default=None, help="trained checkpoint")
    p.add_argument("--image", default=None, help="input image (.pgm/.png)")

    p = sub.add_parser("gradcheck", help="float64 finite-difference check of every backward pass",
                       formatter_class=fmt)
    p.add_argument("--config", default=None, help="flat key=value file; command-line flags override it")
    p.add_argument("--tolerance", type=float, default=1e-5, help="pass iff worst relative error < tolerance")
    p.add_argument("--cases", type=_positive_int, default=5, help="random cases per op")
    p.add_argument("--seed", type=int, default=0, help="seed for the random cases")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = sub.add_parser("export-matrix", help="write the M x B^2 measurement matrix as CSV",
                       formatter_class=fmt)
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--checkpoint", default=None,
                   help="trained checkpoint (default: a freshly initialized model from the flags)")
    return parser, sub


def _read_config_file(path):
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.lstrip("-").replace("-", "_")] = value
    return values


def _apply_config(subparser, path):
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, raw in _read_config_file(path).items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise ConfigError(f"{path}: unknown key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            continue
        value = action.type(raw) if action.type else raw
        if action.choices is not None and value not in action.choices:
            raise ConfigError(f"{path}: {key} must be one of {list(action.choices)}, got {raw!r}")
        defaults[key] = value
    subparser.set_defaults(**defaults)


def _validate(args, parser):
    def need(cond, flag, constraint, value):
        if not cond:
            parser.error(f"{flag} {constraint}, got {value!r}")

    if hasattr(args, "rate"):
        need(0 < args.rate <= 1, "--rate", "must be in (0, 1]", args.rate)
        need(args.block >= 2, "--block", "must be >= 2", args.block)
        need(args.channels >= 1, "--channels", "must be >= 1", args.channels)
        need(args.res_blocks >= 1, "--res-blocks", "must be >= 1", args.res_blocks)
    if args.command == "train":
        need(args.lr >= 0 and np.isfinite(args.lr), "--lr", "must be a finite value >= 0", args.lr)
        need(args.epochs >= 1, "--epochs", "must be >= 1", args.epochs)
        need(args.batch >= 1, "--batch", "must be >= 1", args.batch)
        need(args.crop >= 1 and args.crop % args.block == 0, "--crop",
             f"must be a positive multiple of --block ({args.block})", args.crop)
        need(args.steps_per_epoch is None or args.steps_per_epoch >= 1, "--steps-per-epoch",
             "must be >= 1", args.steps_per_epoch)
        need(args.clip_norm is None or args.clip_norm > 0, "--clip-norm", "must be > 0", args.clip_norm)
        need(args.data is not None, "--data", "is required", args.data)
    if args.command == "eval":
        need(args.test is not None, "--test", "is required", args.test)
        need(all(0 < r <= 1 for r in args.rates), "--rates", "must all be in (0, 1]", args.rates)
        need(all(m in METHODS for m in args.methods), "--methods", f"must be drawn from {METHODS}", args.methods)
    if args.command == "reconstruct":
        need(args.checkpoint is not None, "--checkpoint", "is required", args.checkpoint)
        need(args.image is not None, "--image", "is required", args.image)
    if args.command == "gradcheck":
        need(args.tolerance >= 0, "--tolerance", "must be >= 0", args.tolerance)


def cmd_train(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out / checkpoint_name(args.method, args.rate)
    config = TrainConfig(
        model=ModelConfig(args.block, args.rate, args.channels, args.res_blocks),
        method=args.method,
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch,
        crop_size=args.crop,
        seed=args.seed,
        steps_per_epoch=args.steps_per_epoch,
        checkpoint_path=str(ckpt_path),
        log_every=args.log_every,
        clip_norm=args.clip_norm,
    )
    records = load_directory(args.data)
    resume = load_checkpoint(args.resume) if args.resume else None
    trainer = Trainer(config, records, resume)
    loss_path = ckpt_path.with_name(ckpt_path.stem + "_loss.csv")
    try:
        trainer.run()
    except TrainingDivergedError as exc:
        write_loss_csv(trainer.history, loss_path)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    save_checkpoint(trainer.checkpoint(), ckpt_path)
    write_loss_csv(trainer.history, loss_path)
    final = trainer.history[-1][1] if trainer.history else float("nan")
    print(f"wrote {ckpt_path} and {loss_path} ({len(trainer.history)} steps, final loss {final:.6g})")
    return EXIT_OK


def cmd_eval(args):
    target = Path(args.checkpoint)
    if target.is_file():
        ckpt = load_checkpoint(target)
        cells = {(ckpt.config.measurement_rate, ckpt.method): target}
    else:
        cells = {(rate, method): target / checkpoint_name(method, rate)
                 for rate in args.rates for method in args.methods}
    report = evaluate_suite(cells, args.test)
    csv_path, md_path = write_report(report, args.out)
    for rate, method in report.absent:
        print(f"absent: no checkpoint for {method} @ {rate:g}")
    print(f"wrote {csv_path} and {md_path}")
    return EXIT_OK


def cmd_reconstruct(args):
    ckpt = load_checkpoint(args.checkpoint)
    model = CSModel.from_parameters(ckpt.config, ckpt.method, ckpt.params)
    record = load_image(args.image)
    pixels, _ = crop_to_multiple(record.pixels, ckpt.config.block_size)
    recon = model(np.ascontiguousarray(pixels))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    recon_path, diff_path = out / f"{stem}_recon.pgm", out / f"{stem}_diff.pgm"
    write_pgm(recon_path, to_uint8(recon[0, 0]))
    emit_diff_image(pixels, recon, diff_path)
    print(f"psnr_db={psnr(pixels, recon):.4f} blockiness={blockiness_index(recon, ckpt.config.block_size):.4f}")
    print(f"wrote {recon_path} and {diff_path}")
    return EXIT_OK


def cmd_gradcheck(args):
    results = run_gradcheck(cases=args.cases, seed=args.seed)
    ok = True
    for r in results:
        passed = r.passed(args.tolerance)
        ok &= passed
        print(f"{r.op:16s} worst_rel_error={r.worst_error:.3e} {'PASS' if passed else 'FAIL'}")
    print("gradcheck " + ("passed" if ok else f"FAILED (tolerance {args.tolerance:g})"))
    return EXIT_OK if ok else EXIT_FAILURE


def cmd_export_matrix(args):
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        op = MeasurementOp(ckpt.params["measure.weight"])
    else:
        config = ModelConfig(args.block, args.rate, args.channels, args.res_blocks)
        op = CSModel.create(config, "full", args.seed).measurement
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "measurement_matrix.csv"
    write_matrix_csv(path, op.matrix())
    print(f"wrote {path} ({op.measurement_count} x {op.block_size ** 2})")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "reconstruct": cmd_reconstruct,
    "gradcheck": cmd_gradcheck,
    "export-matrix": cmd_export_matrix,
}


def _thread_limit():
    raw = os.environ.get("BLOCKCS_THREADS")
    if not raw:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(raw))


def main(argv=None):
    parser, sub = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            _apply_config(sub.choices[args.command], args.config)
        except (ConfigError, OSError, ValueError) as exc:
            parser.error(str(exc))
        args = parser.parse_args(argv)
    _validate(args, sub.choices[args.command])
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, ImageFormatError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
