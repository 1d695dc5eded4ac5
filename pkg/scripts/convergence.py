"""Objective versus epoch and wall time for sequential and layered pursuit.

Codes a mean-subtracted crop of the scikit-image ``camera`` picture with the
bundled dictionary and writes one trace CSV per runner.

    python3 scripts/convergence.py --size 64 --epochs 40 --outdir runs/convergence
"""

import argparse
import json
from pathlib import Path

from skimage import data

from lobcod import pretrained_dictionary
from lobcod.apps import mean_subtract
from lobcod.core import pad_image
from lobcod.lasso import init_needles
from lobcod.pursuit import PursuitConfig, pursue_layered, pursue_sequential, write_trace


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--row", type=int, default=200)
    ap.add_argument("--col", type=int, default=200)
    ap.add_argument("--lambda", dest="lam", type=float, default=4.0)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--threads", type=int, default=0)
    ap.add_argument("--outdir", default="runs/convergence")
    args = ap.parse_args(argv)

    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    crop = data.camera().astype(float)[args.row:args.row + args.size, args.col:args.col + args.size]
    detail, _ = mean_subtract(crop, 8)
    d = pretrained_dictionary()
    cfg = PursuitConfig(args.lam, max_epochs=args.epochs, rel_obj_tol=0.0,
                        parallel=args.threads != 1, workers=args.threads)
    work = pad_image(detail, d.filter_side)
    start = init_needles(work, d, cfg.lasso())
    header = {"config": json.dumps(vars(args), sort_keys=True)}
    summary = {}
    for name, run in (("sequential", lambda: pursue_sequential(pad_image(detail, d.filter_side), d, start, cfg)),
                      ("layered", lambda: pursue_layered(pad_image(detail, d.filter_side), d, start, None, cfg))):
        _, trace = run()
        write_trace(out / f"{name}.csv", trace, header)
        summary[name] = trace[-1]
        print(f"{name:10s} objective {trace[-1].total:.6g} nnz {trace[-1].nnz} "
              f"time {trace[-1].wall_time:.2f} s")
    gap = abs(summary["sequential"].total - summary["layered"].total) / summary["layered"].total
    print(f"relative gap between runners: {gap:.2e}")


if __name__ == "__main__":
    main()
