"""Train the bundled 8x8, 81-atom dictionary on natural images.

Crops are drawn from scikit-image sample images that the test-suite never
uses (the tests use crops of ``camera`` and ``astronaut``). Each crop is
mean-subtracted with an 8x8 box average before training.

    python3 scripts/pretrain_dictionary.py --out src/lobcod/data/natural_8x8_m81.lbcd
"""

import argparse
import logging
import time

import numpy as np
from skimage import color, data

from lobcod.apps import mean_subtract
from lobcod.io import write_checkpoint
from lobcod.learn import Phase, OptimizerState, TrainConfig, init_dictionary, train_stochastic

SOURCES = ["coins", "moon", "clock", "chelsea", "coffee", "rocket", "brick", "gravel"]


def load_gray(name):
    img = getattr(data, name)()
    if img.ndim == 3:
        img = color.rgb2gray(img[..., :3]) * 255.0
    return img.astype(np.float64)


def sample_crops(count, size, rng):
    imgs = [load_gray(n) for n in SOURCES]
    crops = []
    while len(crops) < count:
        img = imgs[len(crops) % len(imgs)]
        r = rng.integers(img.shape[0] - size + 1)
        c = rng.integers(img.shape[1] - size + 1)
        crop = img[r:r + size, c:c + size]
        if crop.std() > 10:  # skip flat regions, they carry no structure
            crops.append(mean_subtract(crop, 8)[0])
    return crops


def schedule(epochs, warm, eta):
    """Adam at ``eta`` for ``warm`` epochs, then a fresh Adam at ``eta / 5``.

    A constant step lets the stale needles of early layers drift away from
    the updated atoms and the objective creeps back up.
    """
    warm = min(warm, epochs)
    phases = [Phase(1, warm, OptimizerState("adam", eta))]
    if epochs > warm:
        phases.append(Phase(warm + 1, epochs, OptimizerState("adam", eta / 5)))
    return phases


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="src/lobcod/data/natural_8x8_m81.lbcd")
    ap.add_argument("--crops", type=int, default=24)
    ap.add_argument("--crop-size", type=int, default=48)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--lambda", dest="lam", type=float, default=4.0)
    ap.add_argument("--eta", type=float, default=0.001)
    ap.add_argument("--warm-epochs", type=int, default=4,
                    help="epochs at --eta before dropping the step to eta/5")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=0)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    rng = np.random.default_rng(args.seed)
    crops = sample_crops(args.crops, args.crop_size, rng)
    d0 = init_dictionary(crops, 8, 81, rng)
    cfg = TrainConfig(args.lam, epochs=args.epochs,
                      phases=schedule(args.epochs, args.warm_epochs, args.eta),
                      seed=args.seed, parallel=args.threads != 1, workers=args.threads)
    t0 = time.time()
    dictionary, _, trace = train_stochastic(crops, d0, cfg)
    print(f"trained in {time.time() - t0:.1f}s; objective {trace.totals[0]:.4g} -> {trace.totals[-1]:.4g}")
    write_checkpoint(args.out, dictionary, epoch=args.epochs, optimizer="adam", eta=args.eta,
                     seed=args.seed, lam=args.lam, crops=args.crops, crop_size=args.crop_size,
                     sources=SOURCES)


if __name__ == "__main__":
    main()
