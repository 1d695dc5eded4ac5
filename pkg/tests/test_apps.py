"""Preprocessing, metrics, inpainting, base/edge decomposition and fusion."""

import numpy as np
import pytest
from hypothesis import given, strategies as st
from skimage import data

import lobcod
from lobcod.apps import (
    InpaintConfig, activity_map, decompose_base_edge, decomposition_objective, fuse,
    gradient_operators, inpaint, mean_fill, mean_subtract, psnr, solve_base,
)
from lobcod.core import LocalDictionary, NeedleField, crop_result, reconstruct
from lobcod.errors import ConfigError
from lobcod.pursuit import PursuitConfig

from oracles import forward_diff_matrices, window_mean


# -- mean subtraction ---------------------------------------------------------------

def test_mean_subtract_constant():
    detail, mean = mean_subtract(np.full((20, 20), 7.0), 8)
    np.testing.assert_allclose(detail, 0.0, atol=1e-12)  # in-image normalization: zero everywhere
    np.testing.assert_allclose(mean, 7.0, rtol=1e-14)


def test_mean_subtract_all_ones_mask_bitwise(rng):
    img = rng.random((17, 13)) * 255
    a = mean_subtract(img, 8)
    b = mean_subtract(img, 8, np.ones_like(img))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


@pytest.mark.parametrize("k", [1, 3, 8, 9])
def test_mean_subtract_matches_window_oracle(rng, k):
    img = rng.random((15, 12)) * 255
    mask = rng.random(img.shape) < 0.5
    detail, mean = mean_subtract(img, k, mask)
    np.testing.assert_allclose(mean, window_mean(img, mask, k), atol=1e-12, rtol=0)
    assert not detail[~mask].any()
    np.testing.assert_allclose((detail + mean)[mask], img[mask], atol=1e-12)


def test_mean_subtract_zero_count():
    mask = np.zeros((6, 6), bool)
    mask[0, 0] = True
    _, mean = mean_subtract(np.full((6, 6), 3.0), 2, mask)
    assert mean[5, 5] == 0.0 and mean[0, 0] == 3.0


# -- PSNR ---------------------------------------------------------------------------

def test_psnr_identical_is_inf():
    x = np.arange(16.0).reshape(4, 4)
    assert psnr(x, x) == float("inf")


def test_psnr_zero_db():
    ref = np.zeros((2, 2))
    est = np.full((2, 2), 255.0)  # ||ref - est|| = 510, N = 4
    assert psnr(ref, est) == pytest.approx(0.0, abs=1e-12)


def test_psnr_random_pair(rng):
    a, b = rng.random((9, 7)) * 255, rng.random((9, 7)) * 255
    mse = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert psnr(a, b) == pytest.approx(10 * np.log10(255 ** 2 / mse), rel=1e-12)


def test_psnr_shape_mismatch():
    with pytest.raises(ConfigError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))


# -- inpainting ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def crop64():
    return data.camera().astype(float)[200:264, 200:264]


def test_inpaint_full_mask_autoencodes(crop64):
    out, rep = inpaint(crop64, np.ones_like(crop64), lobcod.pretrained_dictionary(), 0.5,
                       InpaintConfig(max_epochs=10))
    assert psnr(crop64, out) >= 40.0
    tot = np.array([r.total for r in rep.trace])
    assert np.all(np.diff(tot) <= 1e-10 * (1 + tot[:-1]))


def test_inpaint_empty_mask_gives_mean():
    img = np.random.default_rng(0).random((12, 12)) * 255
    d = LocalDictionary.random(3, 5, 0)
    out, rep = inpaint(np.zeros_like(img), np.zeros_like(img), d, 1.0)
    np.testing.assert_array_equal(out, rep.mean)
    assert not out.any()


def test_inpaint_shape_mismatch():
    with pytest.raises(ConfigError):
        inpaint(np.zeros((8, 8)), np.ones((8, 7)), LocalDictionary.random(2, 2, 0), 1.0)


def test_inpaint_train_on_image_small():
    rng = np.random.default_rng(5)
    img = rng.random((16, 16)) * 255
    mask = rng.random(img.shape) < 0.6
    d = LocalDictionary.random(3, 6, 0)
    out, rep = inpaint(img * mask, mask, d, 1.0, InpaintConfig(train_epochs=2, max_epochs=5),
                       train_on_image=True)
    assert out.shape == img.shape
    assert rep.train_trace is not None
    assert rep.dictionary is not d
    np.testing.assert_allclose(rep.dictionary.column_norms(), 1.0, atol=1e-12)


def test_mean_fill_keeps_observed(rng):
    img = rng.random((10, 10))
    mask = rng.random(img.shape) < 0.5
    out = mean_fill(img * mask, mask)
    np.testing.assert_array_equal(out[mask], img[mask])


# -- base solve ---------------------------------------------------------------------------

def _dense_base(target, mu):
    gx, gy = forward_diff_matrices(*target.shape)
    a = np.eye(target.size) + mu * (gx.T @ gx + gy.T @ gy)
    return np.linalg.solve(a, target.ravel()).reshape(target.shape), a


def test_solve_base_mu_zero(rng):
    t = rng.standard_normal((5, 6))
    assert np.array_equal(solve_base(t, 0.0), t)


def test_gradient_operators_match_oracle():
    gx, gy = gradient_operators(4, 5)
    ox, oy = forward_diff_matrices(4, 5)
    np.testing.assert_array_equal(gx.toarray(), ox)
    np.testing.assert_array_equal(gy.toarray(), oy)


@given(seed=st.integers(0, 2**32 - 1), mu=st.floats(0.01, 20.0))
def test_solve_base_dense_oracle(seed, mu):
    t = np.random.default_rng(seed).standard_normal((8, 8)) * 50
    ref, a = _dense_base(t, mu)
    got = solve_base(t, mu)
    assert np.linalg.norm(a @ got.ravel() - t.ravel()) <= 1e-8 * np.linalg.norm(t)
    np.testing.assert_allclose(got, ref, atol=1e-8 * np.abs(ref).max())


def test_solve_base_constant_target():
    t = np.full((7, 7), 3.0)
    # Neumann differences annihilate constants
    np.testing.assert_allclose(solve_base(t, 5.0, boundary="neumann"), t, atol=1e-9)
    # zero-padded differences see a step at the far border
    got = solve_base(t, 5.0)
    np.testing.assert_allclose(got, _dense_base(t, 5.0)[0], atol=1e-8)
    assert not np.allclose(got, t)


def test_solve_base_negative_mu():
    with pytest.raises(ConfigError):
        solve_base(np.zeros((3, 3)), -1.0)


# -- decomposition ----------------------------------------------------------------------------

def test_decompose_mu_zero():
    rng = np.random.default_rng(0)
    src = rng.standard_normal((10, 10)) * 10
    d = LocalDictionary.random(3, 4, 1)
    dec = decompose_base_edge(src, d, 0.5, 0.0, iters=2)
    edge = crop_result(reconstruct(dec.needles, d), 3)
    assert np.array_equal(dec.base, src - edge)


def test_decompose_constant_source():
    src = np.full((10, 10), 42.0)
    d = LocalDictionary.random(3, 4, 1)
    dec = decompose_base_edge(src, d, 1e4, 5.0, boundary="neumann")
    assert dec.needles.nnz() == 0
    np.testing.assert_allclose(dec.base, src, atol=1e-9)


def test_decompose_random_source():
    rng = np.random.default_rng(2)
    src = rng.random((16, 16)) * 255
    d = LocalDictionary.random(3, 6, 3)
    lam, mu = 1.0, 5.0
    dec = decompose_base_edge(src, d, lam, mu, iters=4)
    obj = np.array(dec.objective)
    assert np.all(np.diff(obj) <= 1e-10 * obj[:-1])
    edge = crop_result(reconstruct(dec.needles, d), 3)
    ref, _ = _dense_base(src - edge, mu)
    np.testing.assert_allclose(dec.base, ref, atol=1e-8 * np.abs(ref).max())
    assert obj[-1] == pytest.approx(decomposition_objective(src, dec.base, dec.needles, d, lam, mu))


# -- activity maps and fusion -------------------------------------------------------------------

def test_activity_zero():
    assert not activity_map(NeedleField.zeros(8, 8, 2, 3), 3).any()


def test_activity_identity_kernel(rng):
    nf = NeedleField.zeros(8, 8, 2, 3)
    nf.coeffs[...] = rng.standard_normal(nf.coeffs.shape)
    assert np.array_equal(activity_map(nf, 1), np.abs(nf.coeffs).sum(-1))


def test_activity_single_needle():
    nf = NeedleField.zeros(10, 10, 2, 2)
    nf.coeffs[4, 5] = [2.0, -3.0]
    act = activity_map(nf, 3)
    expect = np.zeros(nf.grid_shape)
    expect[3:6, 4:7] = 5.0 / 9.0
    np.testing.assert_allclose(act, expect, atol=1e-15)


@given(seed=st.integers(0, 2**32 - 1), c=st.floats(0, 10), s=st.integers(1, 5))
def test_activity_permutation_and_homogeneity(seed, c, s):
    rng = np.random.default_rng(seed)
    nf = NeedleField.zeros(9, 9, 3, 4)
    nf.coeffs[...] = rng.standard_normal(nf.coeffs.shape)
    base = activity_map(nf, s)
    perm = NeedleField(9, 9, 3, nf.coeffs[..., rng.permutation(4)])
    np.testing.assert_allclose(activity_map(perm, s), base, rtol=1e-13, atol=1e-13)
    scaled = NeedleField(9, 9, 3, c * nf.coeffs)
    np.testing.assert_allclose(activity_map(scaled, s), c * base, rtol=1e-12, atol=1e-12)


def _small_fusion_setup():
    rng = np.random.default_rng(9)
    d = LocalDictionary.random(3, 4, 4)
    return d, rng.random((14, 14)) * 255


def _roundtrip(src, d, lam, mu, iters=2):
    dec = decompose_base_edge(src, d, lam, mu, iters)
    return dec.base + crop_result(reconstruct(dec.needles, d), d.filter_side)


def test_fuse_identical_sources():
    d, src = _small_fusion_setup()
    fused, state = fuse([src, src.copy()], d, 1.0, 5.0, smooth=3, iters=2, workers=1)
    np.testing.assert_array_equal(fused, _roundtrip(src, d, 1.0, 5.0))
    assert not state.choice.any()  # ties go to source 0


def test_fuse_dominant_source():
    d, src = _small_fusion_setup()
    flat = np.full_like(src, 100.0)
    fused, state = fuse([flat, src], d, 1.0, 5.0, smooth=9, iters=2, workers=1)
    assert np.all(state.activity[1] > state.activity[0])
    np.testing.assert_array_equal(fused, _roundtrip(src, d, 1.0, 5.0))


def test_fuse_average_base_and_workers():
    d, src = _small_fusion_setup()
    other = np.roll(src, 3, axis=1)
    a, sa = fuse([src, other], d, 1.0, 5.0, smooth=3, iters=1, base_rule="average", workers=1)
    b, _ = fuse([src, other], d, 1.0, 5.0, smooth=3, iters=1, base_rule="average", workers=2)
    assert np.array_equal(a, b)
    np.testing.assert_allclose(a - crop_result(reconstruct(_fused_needles(sa), d), 3),
                               (sa.bases[0] + sa.bases[1]) / 2, atol=1e-9)


def _fused_needles(state):
    nf = state.needles[0].copy()
    sel = state.choice == 1
    nf.coeffs[sel] = state.needles[1].coeffs[sel]
    return nf


def test_fuse_single_source_warns():
    d, src = _small_fusion_setup()
    with pytest.warns(UserWarning):
        out, state = fuse([src], d, 1.0, 5.0)
    assert np.array_equal(out, src) and state is None


def test_fuse_errors():
    d, src = _small_fusion_setup()
    with pytest.raises(ConfigError):
        fuse([src, src[:-1]], d, 1.0, 5.0)
    with pytest.raises(ConfigError):
        fuse([src, src], d, 1.0, 5.0, base_rule="max")
    with pytest.raises(ConfigError):
        activity_map(NeedleField.zeros(4, 4, 2, 1), 0)
