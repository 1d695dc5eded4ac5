"""Exact solver for the per-needle lasso

    min_a  1/2 ||p - D a||^2 + lam ||a||_1

and its masked variant where ``D`` is replaced by ``diag(mask) D``.

Problems are solved in batches (all needles of a layer block share one call).
Each problem is solved by feature-sign search (an exact active-set method that
accepts a warm start), with cyclic coordinate descent as a fallback when the
active set stalls. Every returned needle is checked against the lasso KKT
conditions at ``dual_tol``; a needle that cannot be certified raises
:class:`SolverError`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import LocalDictionary, NeedleField, WorkImage, all_patches
from . import _kernels as _k
from .errors import ConfigError, NumericError, SolverError


@dataclass(frozen=True)
class LassoConfig:
    lam: float
    dual_tol: float = 1e-8
    max_nnz: Optional[int] = None
    max_iter: int = 2000
    max_sweeps: int = 20000

    def __post_init__(self):
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")
        if not self.dual_tol > 0:
            raise ConfigError(f"dual_tol must be positive, got {self.dual_tol}")
        if self.max_nnz is not None and self.max_nnz < 1:
            raise ConfigError("max_nnz must be >= 1 when given")
        if self.max_iter < 1 or self.max_sweeps < 50:
            raise ConfigError("max_iter must be >= 1 and max_sweeps >= 50")


def _apply_gram(a: np.ndarray, gram: np.ndarray) -> np.ndarray:
    if gram.ndim == 2:
        return a @ gram
    return np.einsum("bm,bmk->bk", a, gram)


def kkt_violation(a: np.ndarray, q: np.ndarray, lam: float) -> np.ndarray:
    """Per-problem max KKT violation given ``q = D^T (p - D a)``."""
    on = a != 0
    v = np.where(on, np.abs(q - lam * np.sign(a)), np.maximum(np.abs(q) - lam, 0.0))
    return v.max(axis=-1) if v.shape[-1] else np.zeros(v.shape[:-1])


def lasso_value(patch, dict_eff: np.ndarray, a, lam: float) -> float:
    r = np.asarray(patch) - dict_eff @ a
    return 0.5 * float(r @ r) + lam * float(np.abs(a).sum())


def _solve_corr(corr: np.ndarray, gram: np.ndarray, cfg: LassoConfig,
                alpha0: Optional[np.ndarray] = None) -> np.ndarray:
    """Batched lasso in correlation form.

    ``corr`` is ``(B, m)`` (``D^T p`` per problem); ``gram`` is a shared
    ``(m, m)`` matrix or a per-problem ``(B, m, m)`` stack.
    """
    lam, tol = float(cfg.lam), float(cfg.dual_tol)
    bsz, m = corr.shape
    corr = np.ascontiguousarray(corr, dtype=np.float64)
    a = np.zeros((bsz, m)) if alpha0 is None else np.array(alpha0, dtype=np.float64)
    diag = np.diagonal(gram, axis1=-2, axis2=-1)
    dead = np.broadcast_to(diag <= 0, a.shape)
    a[dead] = 0.0  # zero columns can never carry weight

    if gram.ndim == 2:
        grams, gidx = np.ascontiguousarray(gram)[None], np.zeros(bsz, dtype=np.int64)
    else:
        grams, gidx = np.ascontiguousarray(gram), np.arange(bsz, dtype=np.int64)
    status = np.empty(bsz, dtype=np.int64)
    _k.solve_many(corr, grams, gidx, lam, 0.5 * tol, a, cfg.max_iter, status)

    viol = kkt_violation(a, corr - _apply_gram(a, gram), lam)
    for b in np.flatnonzero(viol > tol):
        g = grams[gidx[b]]
        # rare: stalled active set; smooth things out with plain coordinate descent
        for _ in range(cfg.max_sweeps // 50):
            _k.coordinate_descent(corr[b], g, lam, a[b], 50)
            _k.feature_sign(corr[b], g, lam, 0.5 * tol, a[b], cfg.max_iter)
            if kkt_violation(a[b], corr[b] - g @ a[b], lam) <= tol:
                break
        else:
            raise SolverError(
                f"lasso did not reach KKT tolerance {tol:g} "
                f"(violation {kkt_violation(a[b], corr[b] - g @ a[b], lam):.3g})",
                best=a[b].copy(),
            )
    return a


def _cap_support(a, corr, gram, cfg):
    """Restrict needles with more than ``max_nnz`` nonzeros to their largest entries."""
    k = cfg.max_nnz
    for b in np.flatnonzero(np.count_nonzero(a, axis=1) > k):
        keep = np.sort(np.argsort(-np.abs(a[b]), kind="stable")[:k])
        g = gram if gram.ndim == 2 else gram[b]
        sub = _solve_corr(corr[b:b + 1, keep], g[np.ix_(keep, keep)],
                          replace(cfg, max_nnz=None),
                          a[b:b + 1, keep])
        a[b] = 0.0
        a[b, keep] = sub[0]
    return a


def solve_batch(patches: np.ndarray, dictionary: LocalDictionary, cfg: LassoConfig,
                alpha0: Optional[np.ndarray] = None,
                masks: Optional[np.ndarray] = None) -> np.ndarray:
    """Solve ``B`` independent local problems; returns ``(B, m)`` needles.

    ``masks`` (``(B, n)``, 1 = observed) selects the masked variant. Problems
    with a fully observed patch use the shared Gram matrix, fully unobserved
    ones return zero, the rest build their own Gram matrix.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2 or patches.shape[1] != dictionary.patch_size:
        raise ConfigError(f"patches must be (B, {dictionary.patch_size}), got {patches.shape}")
    if not np.all(np.isfinite(patches)):
        raise NumericError("non-finite patch values")
    bsz, m = patches.shape[0], dictionary.num_filters
    if alpha0 is not None:
        alpha0 = np.asarray(alpha0, dtype=np.float64).reshape(bsz, m)
        if not np.all(np.isfinite(alpha0)):
            raise NumericError("non-finite warm start")
    d = dictionary.atoms
    out = np.zeros((bsz, m))
    if masks is None:
        groups = [(np.arange(bsz), None)]
    else:
        masks = np.asarray(masks, dtype=np.float64).reshape(bsz, -1)
        n_obs = np.count_nonzero(masks, axis=1)
        full = np.flatnonzero(n_obs == masks.shape[1])
        part = np.flatnonzero((n_obs > 0) & (n_obs < masks.shape[1]))
        groups = [(full, None), (part, masks[part])]
    for idx, mk in groups:
        if idx.size == 0:
            continue
        a0 = None if alpha0 is None else alpha0[idx]
        if mk is None:
            corr = patches[idx] @ d
            gram = dictionary.gram
        else:
            deff = mk[:, :, None] * d[None]
            corr = np.einsum("bn,bnm->bm", patches[idx] * mk, deff)
            gram = np.matmul(deff.transpose(0, 2, 1), deff)
        a = _solve_corr(corr, gram, cfg, a0)
        if cfg.max_nnz is not None:
            a = _cap_support(a, corr, gram, cfg)
        out[idx] = a
    return out


def solve_one(target: np.ndarray, dictionary: LocalDictionary, cfg: LassoConfig,
              alpha0: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Low-overhead single-needle solve used by the sequential pursuit.

    Falls back to :func:`solve_batch` unless the kernel certifies the result.
    """
    if cfg.max_nnz is None and (mask is None or mask.all()):
        a = np.array(alpha0, dtype=np.float64)
        corr = dictionary.atoms.T @ target
        if _k.feature_sign(corr, dictionary.gram, float(cfg.lam), 0.5 * cfg.dual_tol,
                           a, cfg.max_iter) == 0:
            return a
    return solve_batch(target[None], dictionary, cfg, alpha0[None],
                       None if mask is None else mask[None])[0]


def solve_local(patch, dictionary: LocalDictionary, cfg: LassoConfig, alpha0=None) -> np.ndarray:
    """Needle minimizing ``1/2 ||patch - D a||^2 + lam ||a||_1``."""
    patch = np.asarray(patch, dtype=np.float64).reshape(1, -1)
    a0 = None if alpha0 is None else np.asarray(alpha0).reshape(1, -1)
    return solve_batch(patch, dictionary, cfg, a0)[0]


def solve_local_masked(patch, patch_mask, dictionary: LocalDictionary, cfg: LassoConfig,
                       alpha0=None) -> np.ndarray:
    """Masked-dictionary variant; unobserved patch entries are ignored."""
    patch = np.asarray(patch, dtype=np.float64).reshape(1, -1)
    mk = np.asarray(patch_mask, dtype=np.float64).reshape(1, -1)
    if mk.shape != patch.shape:
        raise ConfigError(f"mask length {mk.shape[1]} != patch length {patch.shape[1]}")
    a0 = None if alpha0 is None else np.asarray(alpha0).reshape(1, -1)
    return solve_batch(patch, dictionary, cfg, a0, masks=(mk != 0))[0]


def init_needles(img: WorkImage, dictionary: LocalDictionary, cfg: LassoConfig,
                 block: int = 256) -> NeedleField:
    """Needles coding ``1/n`` of their patch, so overlaps split the signal evenly."""
    s, n = dictionary.filter_side, dictionary.patch_size
    needles = NeedleField.like(img.original, dictionary)
    p, q = needles.grid_shape
    patches = all_patches(img.original, s).reshape(p * q, n) / n
    masks = None if img.mask is None else all_patches(img.mask, s).reshape(p * q, n)
    flat = needles.coeffs.reshape(p * q, -1)
    for start in range(0, p * q, block):
        sl = slice(start, start + block)
        flat[sl] = solve_batch(patches[sl], dictionary, cfg,
                               masks=None if masks is None else masks[sl])
    return needles
