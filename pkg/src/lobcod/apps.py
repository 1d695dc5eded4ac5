"""Inpainting and multi-focus fusion pipelines built on the local pursuit."""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.ndimage import correlate, uniform_filter
from scipy.sparse.linalg import cg

from .core import LocalDictionary, NeedleField, crop_result, pad_image, reconstruct
from .errors import ConfigError, SolverError
from .lasso import LassoConfig, init_needles
from .learn import OptimizerState, Phase, TrainConfig, train_stochastic
from .pursuit import PursuitConfig, pursue_layered, pursue_masked, resolve_workers

log = logging.getLogger(__name__)


# -- preprocessing and metrics ---------------------------------------------------

def _window_sum(plane: np.ndarray, k: int) -> np.ndarray:
    # window [i - k//2, i - k//2 + k), zero outside the image
    return correlate(plane, np.ones((k, k)), mode="constant", cval=0.0)


def mean_subtract(img, kernel_side: int = 8, mask=None):
    """Split ``img`` into ``(detail, mean)`` using a ``k x k`` box average.

    The average at each pixel uses only in-image pixels (and only observed
    ones when ``mask`` is given); pixels with no such neighbor get mean 0.
    Detail is zero at unobserved pixels.
    """
    if kernel_side < 1:
        raise ConfigError("kernel_side must be >= 1")
    img = np.asarray(img, dtype=np.float64)
    mk = np.ones_like(img) if mask is None else (np.asarray(mask) != 0).astype(np.float64)
    if mk.shape != img.shape:
        raise ConfigError(f"mask shape {mk.shape} != image shape {img.shape}")
    total = _window_sum(img * mk, kernel_side)
    count = _window_sum(mk, kernel_side)
    mean = np.divide(total, count, out=np.zeros_like(total), where=count > 0.5)
    return (img - mean) * mk, mean


def psnr(ref, est) -> float:
    """``20 log10(255 sqrt(N) / ||ref - est||)``; ``inf`` for identical inputs."""
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise ConfigError(f"shape mismatch {ref.shape} vs {est.shape}")
    err = float(np.linalg.norm(ref - est))
    if err == 0.0:
        return float("inf")
    return 20.0 * np.log10(255.0 * np.sqrt(ref.size) / err)


# -- inpainting --------------------------------------------------------------------

@dataclass(frozen=True)
class InpaintConfig:
    kernel_side: int = 8
    max_epochs: int = 30
    rel_obj_tol: float = 1e-4
    dual_tol: float = 1e-8
    parallel: bool = False
    workers: int = 0
    train_epochs: int = 5
    train_eta: float = 1e-3
    seed: int = 0


@dataclass
class InpaintReport:
    trace: list
    needles: NeedleField
    dictionary: LocalDictionary
    mean: np.ndarray
    train_trace: Optional[object] = None


def inpaint(corrupted, mask, dictionary: LocalDictionary, lam: float,
            cfg: Optional[InpaintConfig] = None, train_on_image: bool = False):
    """Fill unobserved pixels (``mask == 0``) from the sparse model.

    The output is the model reconstruction everywhere (observed pixels are
    not pasted back) plus the masked local mean. Returns ``(restored, report)``.
    """
    cfg = cfg or InpaintConfig()
    corrupted = np.asarray(corrupted, dtype=np.float64)
    mask = np.asarray(mask)
    if mask.shape != corrupted.shape:
        raise ConfigError(f"mask shape {mask.shape} != image shape {corrupted.shape}")
    mask = (mask != 0).astype(np.float64)
    detail, mean = mean_subtract(corrupted, cfg.kernel_side, mask)
    s = dictionary.filter_side
    pcfg = PursuitConfig(lam, max_epochs=cfg.max_epochs, rel_obj_tol=cfg.rel_obj_tol,
                         dual_tol=cfg.dual_tol, parallel=cfg.parallel, workers=cfg.workers)
    work = pad_image(detail, s, mask)
    needles, train_trace = None, None
    if train_on_image:
        tcfg = TrainConfig(lam, epochs=cfg.train_epochs,
                           phases=[Phase(1, cfg.train_epochs, OptimizerState("adam", cfg.train_eta))],
                           seed=cfg.seed, dual_tol=cfg.dual_tol, parallel=cfg.parallel,
                           workers=cfg.workers)
        dictionary, fields, train_trace = train_stochastic([detail], dictionary, tcfg, masks=[mask])
        needles = fields[0]
    else:
        needles = init_needles(work, dictionary, pcfg.lasso())
    needles, trace = pursue_masked(work, dictionary, needles, None, pcfg)
    restored = crop_result(reconstruct(needles, dictionary), s) + mean
    return restored, InpaintReport(trace, needles, dictionary, mean, train_trace)


def mean_fill(corrupted, mask, kernel_side: int = 8) -> np.ndarray:
    """Baseline: observed pixels kept, missing ones replaced by the masked local mean."""
    _, mean = mean_subtract(corrupted, kernel_side, mask)
    mk = np.asarray(mask) != 0
    return np.where(mk, np.asarray(corrupted, dtype=np.float64), mean)


# -- base / edge decomposition -------------------------------------------------------

BOUNDARIES = ("zero", "neumann")


def _diff_1d(n: int, boundary: str):
    d = sp.diags([-np.ones(n), np.ones(n - 1)], [0, 1], format="lil")
    if boundary == "neumann":
        d[n - 1, n - 1] = 0.0
    return d.tocsr()


def gradient_operators(height: int, width: int, boundary: str = "zero"):
    """Sparse forward-difference operators ``(G_x, G_y)`` on row-major planes."""
    if boundary not in BOUNDARIES:
        raise ConfigError(f"boundary must be one of {BOUNDARIES}")
    gx = sp.kron(sp.identity(height), _diff_1d(width, boundary), format="csr")
    gy = sp.kron(_diff_1d(height, boundary), sp.identity(width), format="csr")
    return gx, gy


def smoothness(base, boundary: str = "zero") -> float:
    """``1/2 (||G_x b||^2 + ||G_y b||^2)``."""
    gx, gy = gradient_operators(*base.shape, boundary)
    v = base.ravel()
    return 0.5 * (float(np.sum((gx @ v) ** 2)) + float(np.sum((gy @ v) ** 2)))


def solve_base(target, mu: float, boundary: str = "zero", rtol: float = 1e-8) -> np.ndarray:
    """Solve ``(I + mu (G_x^T G_x + G_y^T G_y)) b = target`` by conjugate gradients."""
    if mu < 0:
        raise ConfigError("mu must be nonnegative")
    target = np.asarray(target, dtype=np.float64)
    if mu == 0:
        return target.copy()
    h, w = target.shape
    gx, gy = gradient_operators(h, w, boundary)
    a = (sp.identity(h * w) + mu * (gx.T @ gx + gy.T @ gy)).tocsr()
    t = target.ravel()
    tnorm = float(np.linalg.norm(t))
    if tnorm == 0.0:
        return np.zeros_like(target)
    # solve well below the acceptance threshold so round-off does not matter
    x, info = cg(a, t, rtol=0.01 * rtol, atol=0.0, maxiter=20 * h * w)
    res = float(np.linalg.norm(a @ x - t))
    if info != 0 and res > rtol * tnorm:
        raise SolverError(f"base solve did not converge (relative residual {res / tnorm:.3g})")
    return x.reshape(h, w)


@dataclass
class Decomposition:
    base: np.ndarray
    needles: NeedleField
    objective: list = field(default_factory=list)


def decomposition_objective(src, base, needles, dictionary, lam, mu, boundary="zero") -> float:
    """Data fit of the padded edge layer, l1 cost and base smoothness."""
    s = dictionary.filter_side
    r = np.pad(np.asarray(src, dtype=np.float64) - base, s - 1) - reconstruct(needles, dictionary)
    return 0.5 * float(np.vdot(r, r)) + lam * needles.l1() + mu * smoothness(base, boundary)


def decompose_base_edge(src, dictionary: LocalDictionary, lam: float, mu: float,
                        iters: int = 3, pursuit: Optional[PursuitConfig] = None,
                        boundary: str = "zero") -> Decomposition:
    """Alternate edge pursuit on ``src - base`` with the exact base update.

    ``objective`` holds the combined objective after every alternation.
    """
    if iters < 1:
        raise ConfigError("iters must be >= 1")
    src = np.asarray(src, dtype=np.float64)
    s = dictionary.filter_side
    pcfg = pursuit or PursuitConfig(lam, max_epochs=20, rel_obj_tol=1e-4)
    if pcfg.lam != lam:
        raise ConfigError("pursuit config lambda differs from lam")
    base = solve_base(src, mu, boundary)
    needles = None
    out = Decomposition(base, None)
    for it in range(iters):
        work = pad_image(src - base, s)
        if needles is None:
            needles = init_needles(work, dictionary, pcfg.lasso(), pcfg.block_size)
        needles, _ = pursue_layered(work, dictionary, needles, None, pcfg)
        edge = crop_result(reconstruct(needles, dictionary), s)
        base = solve_base(src - edge, mu, boundary)
        out.objective.append(decomposition_objective(src, base, needles, dictionary, lam, mu, boundary))
        log.debug("decomposition iter %d objective %.6g", it + 1, out.objective[-1])
    out.base, out.needles = base, needles
    return out


# -- fusion ----------------------------------------------------------------------------

def activity_map(needles: NeedleField, smooth_side: int) -> np.ndarray:
    """Per-position l1 norm of the needles, box-averaged over ``s x s`` (zero outside)."""
    if smooth_side < 1:
        raise ConfigError("smooth_side must be >= 1")
    raw = np.abs(needles.coeffs).sum(axis=-1)
    if smooth_side == 1:
        return raw.copy()
    return uniform_filter(raw, size=smooth_side, mode="constant", cval=0.0)


@dataclass
class FusionState:
    bases: list
    needles: list
    activity: list
    dictionary: LocalDictionary
    lam: float
    mu: float
    smooth: int
    objectives: list
    choice: Optional[np.ndarray] = None


def _base_activity(act: np.ndarray, filter_side: int, shape) -> np.ndarray:
    # needle whose patch is centered on each image pixel
    off = filter_side - 1 - (filter_side - 1) // 2
    return act[off:off + shape[0], off:off + shape[1]]


def fuse(sources: Sequence[np.ndarray], dictionary: LocalDictionary, lam: float, mu: float,
         smooth: int = 9, iters: int = 3, base_rule: str = "argmax",
         pursuit: Optional[PursuitConfig] = None, workers: int = 0):
    """Choose-max fusion of registered sources.

    Each needle position takes the whole needle of the source with the largest
    smoothed activity (ties go to the lowest index); the base is fused by the
    same rule per pixel, or averaged with ``base_rule="average"``.
    Returns ``(fused, state)``.
    """
    if base_rule not in ("argmax", "average"):
        raise ConfigError("base_rule must be 'argmax' or 'average'")
    srcs = [np.asarray(x, dtype=np.float64) for x in sources]
    if not srcs:
        raise ConfigError("no sources given")
    if any(x.shape != srcs[0].shape for x in srcs):
        raise ConfigError("all sources must have the same shape")
    if len(srcs) == 1:
        warnings.warn("a single source was given; returning it unchanged", UserWarning, stacklevel=2)
        return srcs[0].copy(), None
    nw = min(len(srcs), resolve_workers(workers))

    def run(x):
        return decompose_base_edge(x, dictionary, lam, mu, iters, pursuit)

    if nw > 1:
        with ThreadPoolExecutor(nw) as pool:
            decs = list(pool.map(run, srcs))
    else:
        decs = [run(x) for x in srcs]
    acts = [activity_map(d.needles, smooth) for d in decs]
    choice = np.argmax(np.stack(acts), axis=0)  # first maximum wins ties
    fused_needles = decs[0].needles.copy()
    for k in range(1, len(decs)):
        sel = choice == k
        fused_needles.coeffs[sel] = decs[k].needles.coeffs[sel]
    if base_rule == "argmax":
        bchoice = _base_activity(choice, dictionary.filter_side, srcs[0].shape)
        base = np.choose(bchoice, [d.base for d in decs])
    else:
        base = np.mean([d.base for d in decs], axis=0)
    edge = crop_result(reconstruct(fused_needles, dictionary), dictionary.filter_side)
    state = FusionState([d.base for d in decs], [d.needles for d in decs], acts, dictionary,
                        lam, mu, smooth, [d.objective for d in decs], choice)
    return base + edge, state
