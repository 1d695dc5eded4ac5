"""Command-line entry point: ``lobcod {train,pursue,inpaint,fuse,psnr}``.

Input errors (missing or unreadable files, shape mismatches, bad options)
exit with status 2 and a one-line message on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import apps, io
from .core import LocalDictionary, crop_result, pad_image, reconstruct
from .errors import ConfigError, LobcodError
from .lasso import init_needles
from .learn import OptimizerState, Phase, TrainConfig, init_dictionary, train_batch, train_stochastic
from .pursuit import PursuitConfig, pursue_layered, pursue_sequential, write_trace

log = logging.getLogger("lobcod")

EXIT_INPUT = 2
EXIT_FAILURE = 1


class InputError(Exception):
    """Raised for bad user input; mapped to exit status 2."""


def _need_file(path, what):
    if path is None:
        raise InputError(f"missing {what}")
    if not Path(path).is_file():
        raise InputError(f"{what} not found: {path}")
    return path


def _need_outdir(path, what):
    if path is None:
        return None
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise InputError(f"directory for {what} does not exist: {parent}")
    return path


def _read_dict(path) -> LocalDictionary:
    try:
        return io.read_dictionary(_need_file(path, "dictionary file"))
    except (ConfigError, ValueError) as err:
        raise InputError(f"cannot read dictionary {path}: {err}") from None


def _read_image(path, what="image"):
    try:
        return io.read_pgm(_need_file(path, what))
    except (ConfigError, ValueError) as err:
        raise InputError(f"cannot read {what} {path}: {err}") from None


def _threads(args):
    if args.threads < 0:
        raise InputError("--threads must be >= 0")
    return args.threads


def _header(args, **more):
    h = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    h.update(more)
    return {"config": json.dumps(h, sort_keys=True, default=str), "seed": args.seed}


# -- subcommands ----------------------------------------------------------------------

def cli_train(args) -> int:
    if not Path(args.images).is_dir():
        raise InputError(f"training directory not found: {args.images}")
    images = io.list_pgms(args.images)
    if not images:
        raise InputError("no training images")
    if args.eta < 0:
        raise InputError("--eta must be nonnegative")
    _need_outdir(args.out, "--out")
    _need_outdir(args.trace, "--trace")
    planes = [_read_image(p) for p in images]
    if args.mean_kernel > 0:
        planes = [apps.mean_subtract(p, args.mean_kernel)[0] for p in planes]
    if args.dict:
        d0 = _read_dict(args.dict)
    else:
        d0 = init_dictionary(planes, args.filter_side, args.num_filters, np.random.default_rng(args.seed))
    threads = _threads(args)
    cfg = TrainConfig(args.lam, epochs=args.epochs,
                      phases=[Phase(1, args.epochs, OptimizerState(args.optimizer, args.eta))],
                      seed=args.seed, parallel=threads != 1, workers=threads, eta=args.eta)
    if args.mode == "stochastic":
        dictionary, _, trace = train_stochastic(planes, d0, cfg)
    else:
        dictionary, trace = train_batch(planes, d0, cfg)
    io.write_checkpoint(args.out, dictionary, epoch=args.epochs, optimizer=args.optimizer,
                        eta=args.eta, seed=args.seed, mode=args.mode)
    if args.trace:
        write_trace(args.trace, trace.reports, _header(args), {"grad_norm": trace.grad_norms})
    print(f"objective {trace.totals[0]:.6g} -> {trace.totals[-1]:.6g}; wrote {args.out}")
    return 0


def cli_pursue(args) -> int:
    dictionary = _read_dict(args.dict)
    img = _read_image(args.image)
    for p, what in ((args.out, "--out"), (args.needles, "--needles"), (args.trace, "--trace")):
        _need_outdir(p, what)
    threads = _threads(args)
    cfg = PursuitConfig(args.lam, max_epochs=args.epochs, rel_obj_tol=args.tol,
                        parallel=threads != 1, workers=threads)
    s = dictionary.filter_side
    work = pad_image(img, s)
    start = init_needles(work, dictionary, cfg.lasso())
    if args.sequential:
        needles, trace = pursue_sequential(work, dictionary, start, cfg)
    else:
        needles, trace = pursue_layered(work, dictionary, start, None, cfg)
    if args.out:
        io.write_pgm(args.out, crop_result(reconstruct(needles, dictionary), s))
    if args.needles:
        io.write_needles(args.needles, needles)
    if args.trace:
        write_trace(args.trace, trace, _header(args))
    print(f"objective {trace[-1].total:.10g} nnz {trace[-1].nnz} epochs {len(trace) - 1}")
    return 0


def cli_inpaint(args) -> int:
    dictionary = _read_dict(args.dict)
    img = _read_image(args.image)
    mask = _read_image(args.mask, "mask")
    if mask.shape != img.shape:
        raise InputError(f"mask shape {mask.shape} != image shape {img.shape}")
    ref = _read_image(args.reference, "reference") if args.reference else None
    if ref is not None and ref.shape != img.shape:
        raise InputError("reference shape differs from image shape")
    _need_outdir(args.out, "--out")
    _need_outdir(args.trace, "--trace")
    threads = _threads(args)
    cfg = apps.InpaintConfig(max_epochs=args.epochs, parallel=threads != 1, workers=threads,
                             seed=args.seed, train_eta=args.eta if args.eta is not None else 1e-3)
    mk = mask != 0
    restored, report = apps.inpaint(img * mk, mk, dictionary, args.lam, cfg, args.train_on_image)
    io.write_pgm(args.out, restored)
    if args.trace:
        write_trace(args.trace, report.trace, _header(args))
    if ref is not None:
        print(f"PSNR {apps.psnr(ref, io.to_uint8(restored).astype(float)):.4f} dB")
    return 0


def cli_fuse(args) -> int:
    if len(args.images) < 2:
        raise InputError("fusion needs at least two input images")
    dictionary = _read_dict(args.dict)
    srcs = [_read_image(p) for p in args.images]
    if any(x.shape != srcs[0].shape for x in srcs):
        raise InputError("input images differ in size")
    ref = _read_image(args.reference, "reference") if args.reference else None
    _need_outdir(args.out, "--out")
    if args.activity:
        Path(args.activity).mkdir(parents=True, exist_ok=True)
    threads = _threads(args)
    pcfg = PursuitConfig(args.lam, max_epochs=args.epochs, rel_obj_tol=1e-4,
                         parallel=threads != 1, workers=threads)
    fused, state = apps.fuse(srcs, dictionary, args.lam, args.mu, args.smooth, args.iters,
                             args.base_rule, pcfg, workers=1)
    io.write_pgm(args.out, fused)
    if args.activity:
        for k, act in enumerate(state.activity):
            scale = 255.0 / act.max() if act.max() > 0 else 0.0
            io.write_pgm(Path(args.activity) / f"activity_{k}.pgm", act * scale)
    if ref is not None:
        print(f"PSNR {apps.psnr(ref, io.to_uint8(fused).astype(float)):.4f} dB")
    return 0


def cli_psnr(args) -> int:
    a = _read_image(args.reference, "reference")
    b = _read_image(args.image)
    if a.shape != b.shape:
        raise InputError("images differ in size")
    print(f"{apps.psnr(a, b):.4f}")
    return 0


# -- parser -----------------------------------------------------------------------------

def _common(p, lam_default=1.0):
    p.add_argument("--dict", metavar="PATH", help="dictionary file (LBCD)")
    p.add_argument("--lambda", dest="lam", type=float, default=lam_default, metavar="F")
    p.add_argument("--seed", type=int, default=0, metavar="N")
    p.add_argument("--threads", type=int, default=0, metavar="N", help="worker threads (0 = auto; env LOBCOD_THREADS)")
    p.add_argument("--trace", metavar="PATH", help="write the objective trace as CSV")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lobcod", description="Local block coordinate descent CSC toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="learn a dictionary from a directory of PGM images")
    p.add_argument("images", help="directory of .pgm files")
    _common(p)
    p.add_argument("--out", required=True, metavar="PATH")
    p.add_argument("--mode", choices=("batch", "stochastic"), default="stochastic")
    p.add_argument("--epochs", type=int, default=10, metavar="N")
    p.add_argument("--eta", type=float, default=0.02, metavar="F")
    p.add_argument("--optimizer", choices=("sgd", "momentum", "adam"), default="adam")
    p.add_argument("--filter-side", type=int, default=8)
    p.add_argument("--num-filters", type=int, default=81)
    p.add_argument("--mean-kernel", type=int, default=8, help="0 disables mean subtraction")
    p.set_defaults(func=cli_train)

    p = sub.add_parser("pursue", help="sparse-code one image")
    p.add_argument("image")
    _common(p)
    p.add_argument("--out", metavar="PATH", help="reconstruction PGM")
    p.add_argument("--needles", metavar="PATH", help="needle dump (LBNF)")
    p.add_argument("--epochs", type=int, default=50, metavar="N")
    p.add_argument("--tol", type=float, default=1e-8, help="relative objective tolerance")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--sequential", action="store_true")
    g.add_argument("--layered", action="store_true")
    p.set_defaults(func=cli_pursue)

    p = sub.add_parser("inpaint", help="fill missing pixels (mask PGM, 0 = missing)")
    p.add_argument("image")
    p.add_argument("mask")
    _common(p)
    p.add_argument("--out", required=True, metavar="PATH")
    p.add_argument("--reference", metavar="PATH")
    p.add_argument("--train-on-image", action="store_true")
    p.add_argument("--eta", type=float, default=None, metavar="F")
    p.add_argument("--epochs", type=int, default=30, metavar="N")
    p.set_defaults(func=cli_inpaint)

    p = sub.add_parser("fuse", help="multi-focus fusion of two or more PGM images")
    p.add_argument("images", nargs="+")
    _common(p)
    p.add_argument("--mu", type=float, default=5.0, metavar="F")
    p.add_argument("--smooth", type=int, default=9, metavar="N")
    p.add_argument("--iters", type=int, default=3)
    p.add_argument("--epochs", type=int, default=20, metavar="N")
    p.add_argument("--base-rule", choices=("argmax", "average"), default="argmax")
    p.add_argument("--out", required=True, metavar="PATH")
    p.add_argument("--reference", metavar="PATH")
    p.add_argument("--activity", metavar="DIR", help="write activity maps here")
    p.set_defaults(func=cli_fuse)

    p = sub.add_parser("psnr", help="PSNR of an image against a reference")
    p.add_argument("reference")
    p.add_argument("image")
    p.set_defaults(func=cli_psnr)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the message
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, ConfigError) as err:
        print(f"lobcod {args.command}: error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as err:
        print(f"lobcod {args.command}: error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except LobcodError as err:
        print(f"lobcod {args.command}: failed: {err}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
