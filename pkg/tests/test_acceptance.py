"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` to see the summary lines.
"""

import time

import numpy as np
import pytest
from scipy.ndimage import correlate

import lobcod
from lobcod.apps import InpaintConfig, fuse, inpaint, mean_fill, psnr, solve_base
from lobcod.core import (
    LocalDictionary, NeedleField, extract_patch, objective, pad_image, reconstruct,
)
from lobcod.errors import MonotonicityError
from lobcod.io import dictionary_from_bytes, dictionary_to_bytes, needles_from_bytes, needles_to_bytes
from lobcod.lasso import LassoConfig, solve_local
from lobcod.learn import (
    TrainConfig, dict_gradient, dict_gradient_masked, init_dictionary, single_phase, train_stochastic,
)
from lobcod.pursuit import PursuitConfig, pursue_layered, pursue_masked, pursue_sequential

from oracles import (
    dense_lasso, enumerate_lasso, forward_diff_matrices, global_dictionary, lasso_primal,
    naive_reconstruct, planted_image,
)


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {number:2d} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
        assert ok, f"criterion {number} failed: {detail}"
    return emit


def _skimage_data():
    return pytest.importorskip("skimage.data")


# -- 1 -------------------------------------------------------------------------------------

def test_c01_pursuit_matches_dense_oracle(report):
    worst, elapsed = 0.0, 0.0
    for k in range(20):
        lam = (0.1, 1.0)[k % 2]
        rng = np.random.default_rng(1000 + k)
        d = LocalDictionary.random(3, 4, rng)
        work = pad_image(rng.standard_normal((8, 8)), 3)  # 12 x 12 padded
        g = global_dictionary(d.atoms, *work.shape)
        y = work.original.ravel()
        best = lasso_primal(g, y, dense_lasso(g, y, lam, gap_tol=1e-10), lam)
        cfg = PursuitConfig(lam, max_epochs=2000, rel_obj_tol=1e-7)
        t = time.perf_counter()
        _, t_seq = pursue_sequential(work, d, None, cfg)
        _, t_lay = pursue_layered(work, d, None, None, cfg)
        elapsed += time.perf_counter() - t
        for tr in (t_seq, t_lay):
            worst = max(worst, abs(tr[-1].total - best) / abs(best))
    report(1, "pursuit vs dense lasso oracle", worst <= 1e-4 and elapsed < 30.0,
           f"max rel error {worst:.2e}, pursuit time {elapsed:.1f} s")


# -- 2 -------------------------------------------------------------------------------------

def test_c02_monotone_descent(report):
    runs, violations = 0, []
    for s in (1, 2, 3, 4):
        for m in (2, 6):
            for lam in (0.01, 0.3, 2.0):
                rng = np.random.default_rng(s * 100 + m * 10 + int(lam * 100))
                d = LocalDictionary.random(s, m, rng)
                img = rng.standard_normal((9, 10)) * 3
                mask = (rng.random((9, 10)) < 0.6).astype(float)
                cfg = PursuitConfig(lam, max_epochs=6, rel_obj_tol=0.0, check_monotone=True)
                pcfg = PursuitConfig(lam, max_epochs=6, rel_obj_tol=0.0, check_monotone=True,
                                     parallel=True, workers=3, block_size=2)
                jobs = {
                    "sequential": lambda: pursue_sequential(pad_image(img, s), d, None, cfg),
                    "layered": lambda: pursue_layered(pad_image(img, s), d, None, None, cfg),
                    "layered-parallel": lambda: pursue_layered(pad_image(img, s), d, None, None, pcfg),
                    "masked": lambda: pursue_masked(pad_image(img * mask, s, mask), d, None, None, cfg),
                }
                for name, job in jobs.items():
                    runs += 1
                    try:
                        _, tr = job()
                    except MonotonicityError as err:
                        violations.append(f"{name} s={s} m={m} lam={lam}: {err}")
                        continue
                    tot = np.array([r.total for r in tr])
                    if np.any(np.diff(tot) > 1e-10 * (1 + np.abs(tot[:-1]))):
                        violations.append(f"{name} s={s} m={m} lam={lam}: epoch increase")
    report(2, "no needle update increases the objective", not violations,
           f"{runs} runs, {len(violations)} violations" + (f"; first: {violations[0]}" if violations else ""))


# -- 3 -------------------------------------------------------------------------------------

def test_c03_single_needle_equivalence(report):
    worst = 0.0
    for k in range(50):
        rng = np.random.default_rng(3000 + k)
        s, m = int(rng.integers(2, 4)), int(rng.integers(2, 5))
        lam = float(rng.uniform(0.05, 1.5))
        d = LocalDictionary.random(s, m, rng)
        h, w = int(rng.integers(s + 1, 8)), int(rng.integers(s + 1, 8))
        img = rng.standard_normal((h, w)) * 2
        others = NeedleField.zeros(h, w, s, m)
        others.coeffs[...] = rng.standard_normal(others.coeffs.shape) * (rng.random(others.coeffs.shape) < 0.3)
        pos = (int(rng.integers(0, h - s + 1)), int(rng.integers(0, w - s + 1)))
        others.coeffs[pos] = 0.0
        # global problem over the free needle only, other needles held fixed
        q = w - s + 1
        g = global_dictionary(d.atoms, h, w)
        cols = g[:, (pos[0] * q + pos[1]) * m:(pos[0] * q + pos[1] + 1) * m]
        y = (img - naive_reconstruct(others.coeffs, d.atoms, h, w)).ravel()
        brute = enumerate_lasso(cols, y, lam)
        patch = extract_patch(img - reconstruct(others, d), pos, s)
        local = solve_local(patch, d, LassoConfig(lam))
        worst = max(worst, np.abs(local - brute).max())
    report(3, "one-needle global minimizer equals the local solve", worst <= 1e-6,
           f"50 instances, max coefficient difference {worst:.2e}")


# -- 4 -------------------------------------------------------------------------------------

def _fd_gradient(img, coeffs, atoms, mask, h=1e-6):
    def data(a):
        r = (img - naive_reconstruct(coeffs, a, *img.shape)) * mask
        return 0.5 * np.sum(r * r)

    g = np.zeros_like(atoms)
    for i in range(atoms.shape[0]):
        for j in range(atoms.shape[1]):
            a = atoms.copy()
            a[i, j] += h
            fp = data(a)
            a[i, j] -= 2 * h
            g[i, j] = (fp - data(a)) / (2 * h)
    return g


def test_c04_gradient_finite_differences(report):
    worst = {False: 0.0, True: 0.0}
    for k in range(20):
        for masked in (False, True):
            rng = np.random.default_rng(4000 + k)
            s, m = int(rng.integers(2, 5)), int(rng.integers(2, 7))
            h, w = int(rng.integers(s + 2, 14)), int(rng.integers(s + 2, 14))
            d = LocalDictionary.random(s, m, rng)
            img = rng.standard_normal((h, w))
            nf = NeedleField.zeros(h, w, s, m)
            nf.coeffs[...] = rng.standard_normal(nf.coeffs.shape) * (rng.random(nf.coeffs.shape) < 0.5)
            mask = (rng.random((h, w)) < 0.5).astype(float) if masked else np.ones((h, w))
            resid = (img - reconstruct(nf, d)) * mask
            g = dict_gradient_masked(resid, mask, nf) if masked else dict_gradient(resid, nf)
            fd = _fd_gradient(img, nf.coeffs, d.atoms, mask)
            worst[masked] = max(worst[masked], np.abs(g - fd).max() / np.abs(fd).max())
    ok = max(worst.values()) <= 1e-5
    report(4, "dictionary gradients match central differences", ok,
           f"max rel error unmasked {worst[False]:.2e}, masked {worst[True]:.2e}")


# -- 5 -------------------------------------------------------------------------------------

def test_c05_parallel_determinism(report):
    rng = np.random.default_rng(5)
    d = LocalDictionary.random(3, 6, rng)
    img = rng.standard_normal((30, 27)) * 3
    fields = []
    for workers in (1, 2, 8):
        cfg = PursuitConfig(0.3, max_epochs=8, rel_obj_tol=0.0, parallel=workers > 1,
                            workers=workers, block_size=16)
        nf, _ = pursue_layered(pad_image(img, 3), d, None, None, cfg)
        fields.append(nf.coeffs)
    needle_gap = max(np.abs(f - fields[0]).max() for f in fields)

    imgs = [rng.standard_normal((20, 20)) * 3 for _ in range(2)]
    d0 = LocalDictionary.random(3, 6, 9)
    dicts = []
    for workers in (1, 2, 8):
        cfg = TrainConfig(0.5, epochs=3, phases=single_phase("adam", 0.01, 3), seed=11,
                          parallel=workers > 1, workers=workers, block_size=8)
        dl, _, _ = train_stochastic(imgs, d0, cfg)
        dicts.append(dl.atoms)
    dict_gap = max(np.abs(a - dicts[0]).max() for a in dicts)
    report(5, "results independent of the worker count", needle_gap <= 1e-12 and dict_gap <= 1e-10,
           f"needle gap {needle_gap:.1e}, dictionary gap {dict_gap:.1e}")


# -- 6 -------------------------------------------------------------------------------------

def test_c06_learning_progress(report):
    s, m = 4, 8
    rng = np.random.default_rng(1)
    planted = LocalDictionary.random(s, m, rng)
    # generate on a larger canvas and crop so the border carries no artificial ramp
    imgs = [planted_image(planted.atoms, 38, 38, 0.02, rng, scale=5.0)[0][3:-3, 3:-3] for _ in range(4)]
    d0 = init_dictionary(imgs, s, m, rng=5)
    t = time.perf_counter()
    _, _, tr = train_stochastic(imgs, d0, TrainConfig(1.0, epochs=20, phases=single_phase("adam", 0.02, 20),
                                                      seed=3))
    elapsed = time.perf_counter() - t
    ratio = tr.totals[-1] / tr.totals[1]
    report(6, "20 epochs of stochastic learning reduce the objective", ratio <= 0.9 and elapsed < 60,
           f"final / epoch-1 objective {ratio:.3f}, {elapsed:.1f} s")


# -- 7 -------------------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.parametrize("corner", [(200, 200), (100, 300)])
def test_c07_inpainting(report, corner):
    cam = _skimage_data().camera().astype(np.float64)
    r, c = corner
    truth = cam[r:r + 64, c:c + 64]
    mask = (np.random.default_rng(0).random(truth.shape) < 0.5).astype(float)
    corrupted = truth * mask
    t = time.perf_counter()
    restored, rep = inpaint(corrupted, mask, lobcod.pretrained_dictionary(), 4.0, InpaintConfig())
    elapsed = time.perf_counter() - t
    base = psnr(truth, mean_fill(corrupted, mask))
    got = psnr(truth, restored)
    tot = np.array([x.total for x in rep.trace])
    monotone = bool(np.all(np.diff(tot) <= 1e-10 * (1 + np.abs(tot[:-1]))))
    report(7, f"inpainting beats mean fill by 1 dB, crop at {corner}",
           got >= base + 1.0 and monotone and elapsed < 300,
           f"{got:.2f} dB vs mean fill {base:.2f} dB, monotone={monotone}, {elapsed:.1f} s")


# -- 8 -------------------------------------------------------------------------------------

def _gaussian_kernel(side=9, sigma=2.0):
    x = np.arange(side) - side // 2
    g = np.exp(-(x[:, None] ** 2 + x[None, :] ** 2) / (2 * sigma ** 2))
    return g / g.sum()


@pytest.mark.slow
@pytest.mark.parametrize("corner", [(100, 180), (300, 300)])
def test_c08_fusion(report, corner):
    skd = _skimage_data()
    color = pytest.importorskip("skimage.color")
    gray = color.rgb2gray(skd.astronaut()) * 255.0
    r, c = corner
    truth = gray[r:r + 64, c:c + 64]
    blurred = correlate(truth, _gaussian_kernel(), mode="reflect")
    left, right = truth.copy(), truth.copy()
    left[:, :32] = blurred[:, :32]
    right[:, 32:] = blurred[:, 32:]
    t = time.perf_counter()
    fused, state = fuse([left, right], lobcod.pretrained_dictionary(), 1.0, 5.0, smooth=9, iters=3)
    elapsed = time.perf_counter() - t
    inputs = max(psnr(truth, left), psnr(truth, right))
    got = psnr(truth, fused)
    nonincreasing = all(np.all(np.diff(obj) <= 1e-10 * (1 + np.abs(obj[:-1])))
                        for obj in map(np.asarray, state.objectives))
    report(8, f"fusion beats both inputs by 0.5 dB, crop at {corner}",
           got >= inputs + 0.5 and nonincreasing and elapsed < 300,
           f"{got:.2f} dB vs best input {inputs:.2f} dB, non-increasing={nonincreasing}, {elapsed:.1f} s")


# -- 9 -------------------------------------------------------------------------------------

def test_c09_base_solve(report):
    worst_res, worst_diff = 0.0, 0.0
    gx, gy = forward_diff_matrices(8, 8)
    a = np.eye(64) + 5.0 * (gx.T @ gx + gy.T @ gy)
    for k in range(10):
        target = np.random.default_rng(9000 + k).standard_normal((8, 8)) * 50
        b = solve_base(target, 5.0)
        direct = np.linalg.solve(a, target.ravel())
        worst_res = max(worst_res, np.linalg.norm(a @ b.ravel() - target.ravel()) / np.linalg.norm(target))
        worst_diff = max(worst_diff, np.linalg.norm(b.ravel() - direct) / np.linalg.norm(direct))
    report(9, "base solve matches the dense direct solve", worst_res <= 1e-8 and worst_diff <= 1e-8,
           f"max relative residual {worst_res:.1e}, max relative difference {worst_diff:.1e}")


# -- 10 ------------------------------------------------------------------------------------

def test_c10_serialization(report):
    rng = np.random.default_rng(10)
    bad = 0
    for _ in range(100):
        s, m = int(rng.integers(1, 9)), int(rng.integers(1, 100))
        blob = dictionary_to_bytes(LocalDictionary.random(s, m, rng))
        bad += dictionary_to_bytes(dictionary_from_bytes(blob)) != blob
        h, w = int(rng.integers(s, s + 20)), int(rng.integers(s, s + 20))
        nf = NeedleField.zeros(h, w, s, m)
        keep = rng.random(nf.coeffs.shape) < rng.uniform(0, 0.5)
        nf.coeffs[keep] = rng.standard_normal(int(keep.sum())) * 10.0 ** rng.uniform(-8, 8)
        blob = needles_to_bytes(nf)
        bad += needles_to_bytes(needles_from_bytes(blob)) != blob
    report(10, "dictionary and needle dumps round-trip byte for byte", bad == 0,
           f"100 dictionaries and 100 needle fields, {bad} mismatches")
