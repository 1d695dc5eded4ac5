"""Local block coordinate descent pursuit.

Each needle is a coordinate block; updating it means solving the small lasso
against its patch of the residual with the needle's own contribution added
back. The layered variant updates a whole residue class of needles at once:
their footprints are disjoint, so the result equals a sequential sweep over
that layer in any order.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import maximum_filter

from .core import (
    LayerSchedule, LocalDictionary, NeedleField, ObjectiveReport, WorkImage,
    build_layers, layer_patches, reconstruct,
)
from .errors import ConfigError, MonotonicityError, NumericError, SolverError
from .lasso import LassoConfig, solve_batch, solve_one

log = logging.getLogger(__name__)

MONOTONE_RTOL = 1e-10


@dataclass(frozen=True)
class PursuitConfig:
    lam: float
    max_epochs: int = 50
    rel_obj_tol: float = 1e-6
    parallel: bool = False
    workers: int = 0
    log_every: int = 0
    dual_tol: float = 1e-8
    max_nnz: Optional[int] = None
    refresh_every: int = 10
    block_size: int = 256
    skip_clean: bool = True
    check_monotone: bool = False

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.lam < 0 or self.rel_obj_tol < 0:
            raise ConfigError("lambda and rel_obj_tol must be nonnegative")
        if self.block_size < 1 or self.refresh_every < 1:
            raise ConfigError("block_size and refresh_every must be >= 1")

    def lasso(self) -> LassoConfig:
        return LassoConfig(self.lam, self.dual_tol, self.max_nnz)


def resolve_workers(workers: int) -> int:
    if workers > 0:
        return workers
    env = os.environ.get("LOBCOD_THREADS", "")
    if env.strip():
        try:
            val = int(env)
        except ValueError:
            raise ConfigError(f"LOBCOD_THREADS must be an integer, got {env!r}") from None
        if val > 0:
            return val
    return os.cpu_count() or 1


class LayerSolver:
    """Solves a set of needles in fixed-size blocks, optionally on a thread pool.

    Block boundaries depend only on ``block_size``, so the output does not
    depend on the number of workers.
    """

    def __init__(self, dictionary: LocalDictionary, lasso: LassoConfig,
                 block_size: int = 256, parallel: bool = False, workers: int = 0):
        self.dictionary = dictionary
        self.lasso = lasso
        self.block_size = block_size
        nw = resolve_workers(workers) if parallel else 1
        self._pool = ThreadPoolExecutor(nw) if nw > 1 else None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def solve(self, targets, alpha0, masks=None) -> np.ndarray:
        k = targets.shape[0]
        bounds = [(i, min(i + self.block_size, k)) for i in range(0, k, self.block_size)]

        def run(b):
            lo, hi = b
            return solve_batch(targets[lo:hi], self.dictionary, self.lasso, alpha0[lo:hi],
                               None if masks is None else masks[lo:hi])

        parts = list(self._pool.map(run, bounds)) if self._pool else [run(b) for b in bounds]
        return np.concatenate(parts) if parts else np.zeros_like(alpha0)


def _local_values(targets, slices, coeffs, lam, masks):
    r = targets - (slices if masks is None else masks * slices)
    return 0.5 * np.einsum("...n,...n->...", r, r) + lam * np.abs(coeffs).sum(axis=-1)


def layer_update(img: WorkImage, dictionary: LocalDictionary, needles: NeedleField,
                 residue, solver: LayerSolver, select: Optional[np.ndarray] = None,
                 monotone_tol: Optional[float] = None) -> np.ndarray:
    """One layer of the pursuit; updates ``needles`` and ``img`` in place.

    ``select`` is an optional boolean ``(Pr, Qc)`` array restricting which
    needles of the layer are re-solved. Returns the boolean ``(Pr, Qc)`` map
    of needles whose coefficients changed.
    """
    s = dictionary.filter_side
    r, c = residue
    old = needles.coeffs[r::s, c::s]
    pr, qc, m = old.shape
    if pr == 0 or qc == 0:
        return np.zeros((pr, qc), dtype=bool)
    d = dictionary.atoms
    n = d.shape[0]
    patches = layer_patches(img.residual, s, residue).reshape(pr * qc, n)
    old_flat = old.reshape(pr * qc, m)
    idx = np.arange(pr * qc) if select is None else np.flatnonzero(select.ravel())
    if idx.size == 0:
        return np.zeros((pr, qc), dtype=bool)
    masks = None
    if img.mask is not None:
        masks = layer_patches(img.mask, s, residue).reshape(pr * qc, n)[idx]
    slices_old = old_flat[idx] @ d.T
    targets = patches[idx] + (slices_old if masks is None else masks * slices_old)
    new = solver.solve(targets, old_flat[idx], masks)

    if monotone_tol is not None:
        slices_new = new @ d.T
        gain = (_local_values(targets, slices_new, new, solver.lasso.lam, masks)
                - _local_values(targets, slices_old, old_flat[idx], solver.lasso.lam, masks))
        worst = int(np.argmax(gain))
        if gain[worst] > monotone_tol:
            raise MonotonicityError(
                f"needle update increased the objective by {gain[worst]:.3e} "
                f"(tolerance {monotone_tol:.3e})"
            )

    delta = np.zeros((pr * qc, m))
    delta[idx] = new - old_flat[idx]
    changed = np.any(delta != 0, axis=1)
    if not changed.any():
        return changed.reshape(pr, qc)
    old_flat[idx] = new
    needles.coeffs[r::s, c::s] = old_flat.reshape(pr, qc, m)
    block = (delta @ d.T).reshape(pr, qc, s, s).transpose(0, 2, 1, 3).reshape(pr * s, qc * s)
    region = (slice(r, r + pr * s), slice(c, c + qc * s))
    img.reconstruction[region] += block
    if img.mask is not None:
        block = block * img.mask[region]
    img.residual[region] -= block
    return changed.reshape(pr, qc)


def current_report(img: WorkImage, needles: NeedleField, lam: float, t0: float) -> ObjectiveReport:
    data = 0.5 * float(np.vdot(img.residual, img.residual))
    return ObjectiveReport.from_terms(data, lam * needles.l1(), needles.nnz(),
                                      time.perf_counter() - t0)


def _prepare(img: WorkImage, dictionary: LocalDictionary, needles: Optional[NeedleField]):
    if needles is None:
        needles = NeedleField.like(img.original, dictionary)
    else:
        if (needles.height, needles.width) != img.shape:
            raise ConfigError(f"needles are for {(needles.height, needles.width)}, image is {img.shape}")
        needles = needles.copy()
    img.set_reconstruction(reconstruct(needles, dictionary))
    return needles


def _converged(trace, cfg) -> bool:
    prev, cur = trace[-2].total, trace[-1].total
    tol = MONOTONE_RTOL * (1.0 + abs(prev))
    if cur > prev + tol:
        raise MonotonicityError(f"epoch objective increased from {prev!r} to {cur!r}")
    return (prev - cur) <= cfg.rel_obj_tol * max(abs(prev), np.finfo(float).tiny)


def _dilate(mask: np.ndarray, s: int) -> np.ndarray:
    if s == 1:
        return mask.copy()
    return maximum_filter(mask, size=2 * s - 1, mode="constant", cval=False)


def pursue_layered(img: WorkImage, dictionary: LocalDictionary,
                   needles: Optional[NeedleField] = None,
                   schedule: Optional[LayerSchedule] = None,
                   cfg: Optional[PursuitConfig] = None, *, lam: Optional[float] = None):
    """Layer-parallel pursuit on an unmasked image.

    ``img`` is updated in place to the final reconstruction and residual; the
    input needles are left untouched. Returns ``(needles, trace)`` where the
    trace holds one :class:`ObjectiveReport` for the start state and one per
    epoch.
    """
    if img.mask is not None:
        raise ConfigError("image carries a mask; use pursue_masked")
    return _pursue_layers(img, dictionary, needles, schedule, _cfg(cfg, lam))


def pursue_masked(img: WorkImage, dictionary: LocalDictionary,
                  needles: Optional[NeedleField] = None,
                  schedule: Optional[LayerSchedule] = None,
                  cfg: Optional[PursuitConfig] = None, *, lam: Optional[float] = None):
    """Layered pursuit of the masked problem; each needle sees ``A_i D_L``."""
    if img.mask is None:
        raise ConfigError("pursue_masked needs an image with a mask")
    return _pursue_layers(img, dictionary, needles, schedule, _cfg(cfg, lam))


def _cfg(cfg, lam):
    if cfg is None:
        if lam is None:
            raise ConfigError("give either cfg or lam")
        return PursuitConfig(lam)
    return cfg


def _pursue_layers(img, dictionary, needles, schedule, cfg):
    t0 = time.perf_counter()
    s = dictionary.filter_side
    needles = _prepare(img, dictionary, needles)
    if schedule is None:
        schedule = build_layers(*img.shape, s)
    elif schedule.filter_side != s or schedule.grid != needles.grid_shape:
        raise ConfigError("layer schedule does not match image/dictionary")
    trace = [current_report(img, needles, cfg.lam, t0)]
    dirty = np.ones(needles.grid_shape, dtype=bool)
    with LayerSolver(dictionary, cfg.lasso(), cfg.block_size, cfg.parallel, cfg.workers) as solver:
        for epoch in range(1, cfg.max_epochs + 1):
            tol = MONOTONE_RTOL * (1.0 + abs(trace[-1].total)) if cfg.check_monotone else None
            for residue in schedule:
                r, c = residue
                select = dirty[r::s, c::s] if cfg.skip_clean else None
                try:
                    changed = layer_update(img, dictionary, needles, residue, solver, select, tol)
                except SolverError as err:
                    err.position = ("layer", residue)
                    raise
                dirty[r::s, c::s] = False
                if changed.any():
                    grid = np.zeros_like(dirty)
                    grid[r::s, c::s] = changed
                    dirty |= _dilate(grid, s)
                    dirty[r::s, c::s] = False
            if epoch % cfg.refresh_every == 0:
                img.set_reconstruction(reconstruct(needles, dictionary))
            trace.append(current_report(img, needles, cfg.lam, t0))
            if cfg.log_every and epoch % cfg.log_every == 0:
                log.info("epoch %d objective %.6g nnz %d", epoch, trace[-1].total, trace[-1].nnz)
            if _converged(trace, cfg) or (cfg.skip_clean and not dirty.any()):
                break
    return needles, trace


def pursue_sequential(img: WorkImage, dictionary: LocalDictionary,
                      needles: Optional[NeedleField] = None,
                      cfg: Optional[PursuitConfig] = None, *, lam: Optional[float] = None):
    """Needle-by-needle pursuit in row-major position order."""
    cfg = _cfg(cfg, lam)
    t0 = time.perf_counter()
    s, n = dictionary.filter_side, dictionary.patch_size
    d = dictionary.atoms
    needles = _prepare(img, dictionary, needles)
    lasso = cfg.lasso()
    p, q = needles.grid_shape
    trace = [current_report(img, needles, cfg.lam, t0)]
    dirty = np.ones((p, q), dtype=bool)
    for epoch in range(1, cfg.max_epochs + 1):
        tol = MONOTONE_RTOL * (1.0 + abs(trace[-1].total)) if cfg.check_monotone else None
        for r in range(p):
            for c in range(q):
                if cfg.skip_clean and not dirty[r, c]:
                    continue
                dirty[r, c] = False
                win = (slice(r, r + s), slice(c, c + s))
                old = needles.coeffs[r, c].copy()
                slice_old = d @ old
                mk = None if img.mask is None else img.mask[win].reshape(n)
                target = img.residual[win].reshape(n) + (slice_old if mk is None else mk * slice_old)
                if not np.all(np.isfinite(target)):
                    raise NumericError(f"non-finite residual at needle {(r, c)}")
                try:
                    new = solve_one(target, dictionary, lasso, old, mk)
                except SolverError as err:
                    err.position = (r, c)
                    raise
                if tol is not None:
                    gain = (_local_values(target, d @ new, new, cfg.lam, mk)
                            - _local_values(target, slice_old, old, cfg.lam, mk))
                    if gain > tol:
                        raise MonotonicityError(
                            f"needle {(r, c)} increased the objective by {gain:.3e}")
                delta = new - old
                if not delta.any():
                    continue
                needles.coeffs[r, c] = new
                upd = (d @ delta).reshape(s, s)
                img.reconstruction[win] += upd
                img.residual[win] -= upd if img.mask is None else upd * img.mask[win]
                dirty[max(r - s + 1, 0):r + s, max(c - s + 1, 0):c + s] = True
                dirty[r, c] = False
        if epoch % cfg.refresh_every == 0:
            img.set_reconstruction(reconstruct(needles, dictionary))
        trace.append(current_report(img, needles, cfg.lam, t0))
        if cfg.log_every and epoch % cfg.log_every == 0:
            log.info("epoch %d objective %.6g nnz %d", epoch, trace[-1].total, trace[-1].nnz)
        if _converged(trace, cfg) or (cfg.skip_clean and not dirty.any()):
            break
    return needles, trace


TRACE_COLUMNS = ["epoch", "wall_time_s", "data_term", "l1_term", "total", "nnz"]


def write_trace(path, trace, header: Optional[dict] = None, extra: Optional[dict] = None) -> None:
    """Write a trace as CSV with an optional ``# key=value`` comment header.

    ``extra`` maps additional column names to per-row value lists.
    """
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        for k, v in (header or {}).items():
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS + list(extra))
        for i, rep in enumerate(trace):
            w.writerow(rep.as_row(i) + [repr(float(vals[i])) for vals in extra.values()])
