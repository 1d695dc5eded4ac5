"""Dictionary learning on top of the local pursuit.

Two drivers share the same gradient and projection:

* :func:`train_batch` alternates a full pursuit of every image with one
  projected gradient step on the summed gradient (backtracking on the step);
* :func:`train_stochastic` updates the dictionary after every layer of needles,
  using only that layer's gradient and a pluggable optimizer.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .core import (
    LocalDictionary, NeedleField, ObjectiveReport, WorkImage, all_patches,
    build_layers, layer_patches, pad_image, reconstruct,
)
from .errors import ConfigError, DegenerateAtomError, DegenerateAtomWarning, NumericError
from .lasso import LassoConfig, init_needles
from .pursuit import (
    LayerSolver, PursuitConfig, current_report, layer_update, pursue_layered, pursue_masked,
)

log = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-12


# -- gradients -----------------------------------------------------------------

def _positions_view(plane, needles: NeedleField, layer):
    s = needles.filter_side
    if layer is None:
        return all_patches(plane, s), needles.coeffs
    r, c = layer
    return layer_patches(plane, s, layer), needles.coeffs[r::s, c::s]


def dict_gradient(residual: np.ndarray, needles: NeedleField, layer=None) -> np.ndarray:
    """``-sum_i P_i(residual) alpha_i^T`` over all positions or one layer residue.

    ``residual`` must be ``X - X_hat`` for the current needles and dictionary.
    """
    residual = np.asarray(residual, dtype=np.float64)
    if residual.shape != (needles.height, needles.width):
        raise ConfigError(f"residual shape {residual.shape} != needle image {(needles.height, needles.width)}")
    patches, coeffs = _positions_view(residual, needles, layer)
    return -np.einsum("pqn,pqm->nm", patches, coeffs)


def dict_gradient_masked(masked_residual: np.ndarray, mask: np.ndarray,
                         needles: NeedleField, layer=None) -> np.ndarray:
    """Gradient of the masked data term; the mask is applied to the residual."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != np.shape(masked_residual):
        raise ConfigError("mask and residual shapes differ")
    return dict_gradient(mask * np.asarray(masked_residual, dtype=np.float64), needles, layer)


def project_columns(dictionary, rng=None, on_degenerate: str = "reinit") -> LocalDictionary:
    """Rescale every atom to unit norm.

    Atoms with norm below ``1e-12`` raise :class:`DegenerateAtomError` when
    ``on_degenerate="raise"``; by default they are replaced by a random unit
    vector and a :class:`DegenerateAtomWarning` is issued.
    """
    atoms = np.array(dictionary.atoms if isinstance(dictionary, LocalDictionary) else dictionary,
                     dtype=np.float64)
    norms = np.linalg.norm(atoms, axis=0)
    bad = np.flatnonzero(norms < DEGENERATE_NORM)
    if bad.size:
        if on_degenerate == "raise":
            raise DegenerateAtomError(f"atoms {bad.tolist()} have (near) zero norm")
        warnings.warn(f"reinitializing degenerate atoms {bad.tolist()}", DegenerateAtomWarning,
                      stacklevel=2)
        rng = np.random.default_rng(rng)
        atoms[:, bad] = rng.standard_normal((atoms.shape[0], bad.size))
        norms[bad] = np.linalg.norm(atoms[:, bad], axis=0)
    return LocalDictionary(atoms / norms)


def init_dictionary(images: Sequence[np.ndarray], filter_side: int, num_filters: int,
                    rng=None, max_tries: int = 50) -> LocalDictionary:
    """Unit-normalized random patches drawn from the training images."""
    rng = np.random.default_rng(rng)
    n = filter_side * filter_side
    atoms = np.empty((n, num_filters))
    for j in range(num_filters):
        for _ in range(max_tries):
            img = np.asarray(images[rng.integers(len(images))], dtype=np.float64)
            r = rng.integers(img.shape[0] - filter_side + 1)
            c = rng.integers(img.shape[1] - filter_side + 1)
            v = img[r:r + filter_side, c:c + filter_side].ravel()
            if np.linalg.norm(v) > 1e-8:
                break
        else:
            v = rng.standard_normal(n)
        atoms[:, j] = v / np.linalg.norm(v)
    return LocalDictionary(atoms)


# -- optimizers -----------------------------------------------------------------

OPTIMIZERS = ("sgd", "momentum", "adam")


@dataclass
class OptimizerState:
    kind: str = "adam"
    eta: float = 0.02
    gamma: float = 0.8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Optional[np.ndarray] = field(default=None, repr=False)
    v: Optional[np.ndarray] = field(default=None, repr=False)
    t: int = 0

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.kind!r}; choose from {OPTIMIZERS}")
        if self.eta < 0:
            raise ConfigError("eta must be nonnegative")
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma must be in [0, 1)")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("adam needs 0 < beta1, beta2 < 1 and eps > 0")

    def step(self, grad: np.ndarray, eta: Optional[float] = None) -> np.ndarray:
        """Return the update to subtract from the atoms."""
        eta = self.eta if eta is None else eta
        self.t += 1
        if self.kind == "sgd":
            return eta * grad
        if self.kind == "momentum":
            self.m = eta * grad if self.m is None else self.gamma * self.m + eta * grad
            return self.m
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return eta * mhat / (np.sqrt(vhat) + self.eps)

    def fresh(self) -> "OptimizerState":
        return replace(self, m=None, v=None, t=0)


@dataclass(frozen=True)
class Phase:
    """Optimizer used for epochs ``start..stop`` (1-based, inclusive)."""
    start: int
    stop: int
    optimizer: OptimizerState


@dataclass
class TrainConfig:
    lam: float
    epochs: int = 20
    phases: list = field(default_factory=list)
    auto_eta: Optional[float] = None
    lr_decay: Optional[tuple] = None
    seed: int = 0
    dual_tol: float = 1e-8
    parallel: bool = False
    workers: int = 0
    block_size: int = 256
    refresh_every: int = 10
    # batch mode
    eta: float = 1e-3
    inner_epochs: int = 5
    max_halvings: int = 30

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if not self.phases:
            self.phases = [Phase(1, self.epochs, OptimizerState())]
        spans = sorted((p.start, p.stop) for p in self.phases)
        for (a0, a1), (b0, _) in zip(spans, spans[1:]):
            if b0 <= a1:
                raise ConfigError("optimizer phases overlap")
        if any(a0 > a1 or a0 < 1 for a0, a1 in spans):
            raise ConfigError("phase ranges must satisfy 1 <= start <= stop")
        if self.auto_eta is not None and not 0.01 <= self.auto_eta <= 0.02:
            raise ConfigError("auto_eta is a fraction of the gradient norm in [0.01, 0.02]")
        if self.lr_decay is not None and (len(self.lr_decay) != 2 or self.lr_decay[1] < 1):
            raise ConfigError("lr_decay is (factor, period) with period >= 1")

    def lasso(self) -> LassoConfig:
        return LassoConfig(self.lam, self.dual_tol)

    def phase_for(self, epoch: int) -> Optional[int]:
        for i, p in enumerate(self.phases):
            if p.start <= epoch <= p.stop:
                return i
        return None


def single_phase(kind: str, eta: float, epochs: int, **kw) -> list:
    return [Phase(1, epochs, OptimizerState(kind=kind, eta=eta, **kw))]


@dataclass
class TrainTrace:
    """Per-epoch reports (entry 0 is the start state) summed over images."""
    reports: list
    grad_norms: list
    etas: list
    seed: int
    needles: list = field(default_factory=list, repr=False)

    @property
    def totals(self) -> np.ndarray:
        return np.array([r.total for r in self.reports])

    def __len__(self):
        return len(self.reports)

    def __getitem__(self, i):
        return self.reports[i]


def _sum_reports(reports, t0) -> ObjectiveReport:
    return ObjectiveReport.from_terms(
        sum(r.data_term for r in reports), sum(r.l1_term for r in reports),
        sum(r.nnz for r in reports), time.perf_counter() - t0,
    )


def _exact_report(work: WorkImage, needles: NeedleField, dictionary, lam) -> ObjectiveReport:
    work.set_reconstruction(reconstruct(needles, dictionary))
    data = 0.5 * float(np.vdot(work.residual, work.residual))
    return ObjectiveReport.from_terms(data, lam * needles.l1(), needles.nnz())


def _pad_all(images, s, masks):
    if len(images) == 0:
        raise ConfigError("no training images")
    if masks is None:
        masks = [None] * len(images)
    if len(masks) != len(images):
        raise ConfigError("one mask per image is required")
    return [pad_image(img, s, mk) for img, mk in zip(images, masks)]


def _check_unit(dictionary: LocalDictionary) -> None:
    err = np.abs(dictionary.column_norms() - 1.0).max()
    if err > 1e-12:
        raise NumericError(f"atom norms drifted from 1 by {err:.3g}")


# -- stochastic -------------------------------------------------------------------

def train_stochastic(images: Sequence[np.ndarray], dictionary: LocalDictionary, cfg: TrainConfig,
                     masks: Optional[Sequence[np.ndarray]] = None,
                     needles: Optional[list] = None):
    """Per-layer pursuit followed by a dictionary step on that layer's gradient.

    Images are raw (unpadded) planes; masks, when given, select the masked
    data term. Returns ``(dictionary, needle_fields, trace)``; the needles live
    on the padded grid.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    s = dictionary.filter_side
    works = _pad_all(images, s, masks)
    lasso = cfg.lasso()
    if needles is None:
        needles = [init_needles(w, dictionary, lasso, cfg.block_size) for w in works]
    else:
        needles = [nf.copy() for nf in needles]
    schedules = [build_layers(*w.shape, s) for w in works]
    optimizers = [p.optimizer.fresh() for p in cfg.phases]
    trace = TrainTrace([], [], [], cfg.seed)
    trace.reports.append(_sum_reports(
        [_exact_report(w, nf, dictionary, cfg.lam) for w, nf in zip(works, needles)], t0))
    trace.grad_norms.append(0.0)
    trace.etas.append(float("nan"))

    version, seen = 0, [0] * len(works)  # dictionary version each reconstruction was built with

    def sync(k):
        if seen[k] != version:
            works[k].set_reconstruction(reconstruct(needles[k], dictionary))
            seen[k] = version

    with LayerSolver(dictionary, lasso, cfg.block_size, cfg.parallel, cfg.workers) as solver:
        for epoch in range(1, cfg.epochs + 1):
            pi = cfg.phase_for(epoch)
            opt = None if pi is None else optimizers[pi]
            gnorms, eta_used = [], float("nan")
            for k, (work, nf, sched) in enumerate(zip(works, needles, schedules)):
                for residue in sched:
                    sync(k)
                    solver.dictionary = dictionary
                    layer_update(work, dictionary, nf, residue, solver)
                    if opt is None:
                        continue
                    # the working residual is already masked, so this also covers the masked case
                    grad = dict_gradient(work.residual, nf, residue)
                    gn = float(np.linalg.norm(grad))
                    gnorms.append(gn)
                    eta_used = opt.eta if cfg.auto_eta is None else cfg.auto_eta * gn
                    new_atoms = dictionary.atoms - opt.step(grad, eta_used)
                    if np.array_equal(new_atoms, dictionary.atoms):
                        continue
                    dictionary = project_columns(new_atoms, rng)
                    _check_unit(dictionary)
                    version += 1
            if opt is not None and cfg.lr_decay is not None and epoch % cfg.lr_decay[1] == 0:
                opt.eta = opt.eta / (1.0 + cfg.lr_decay[0] / epoch)
            for k in range(len(works)):
                if epoch % cfg.refresh_every == 0:
                    seen[k] = -1
                sync(k)
            rep = _sum_reports([current_report(w, nf, cfg.lam, t0) for w, nf in zip(works, needles)], t0)
            trace.reports.append(rep)
            trace.grad_norms.append(float(np.mean(gnorms)) if gnorms else 0.0)
            trace.etas.append(eta_used)
            log.info("epoch %d objective %.6g |grad| %.3g", epoch, rep.total, trace.grad_norms[-1])
    trace.needles = needles
    return dictionary, needles, trace


# -- batch -------------------------------------------------------------------------

def _data_term(works, needles, dictionary) -> float:
    tot = 0.0
    for w, nf in zip(works, needles):
        r = w.original - reconstruct(nf, dictionary)
        if w.mask is not None:
            r *= w.mask
        tot += 0.5 * float(np.vdot(r, r))
    return tot


def train_batch(images: Sequence[np.ndarray], dictionary: LocalDictionary, cfg: TrainConfig,
                masks: Optional[Sequence[np.ndarray]] = None):
    """Alternate full pursuit and one projected gradient step.

    The step starts at ``cfg.eta`` and is halved until the data term does not
    increase (at most ``cfg.max_halvings`` times; otherwise the dictionary is
    kept). Returns ``(dictionary, trace)``; the final needles are in
    ``trace.needles``.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    s = dictionary.filter_side
    works = _pad_all(images, s, masks)
    needles = [init_needles(w, dictionary, cfg.lasso(), cfg.block_size) for w in works]
    pcfg = PursuitConfig(cfg.lam, max_epochs=cfg.inner_epochs, rel_obj_tol=0.0,
                         parallel=cfg.parallel, workers=cfg.workers,
                         dual_tol=cfg.dual_tol, block_size=cfg.block_size)
    trace = TrainTrace([], [], [], cfg.seed)
    trace.reports.append(_sum_reports(
        [_exact_report(w, nf, dictionary, cfg.lam) for w, nf in zip(works, needles)], t0))
    trace.grad_norms.append(0.0)
    trace.etas.append(float("nan"))
    for epoch in range(1, cfg.epochs + 1):
        grad = np.zeros_like(dictionary.atoms)
        for k, w in enumerate(works):
            run = pursue_masked if w.mask is not None else pursue_layered
            needles[k], _ = run(w, dictionary, needles[k], None, pcfg)
            grad += dict_gradient(w.residual, needles[k])
        current = _data_term(works, needles, dictionary)
        eta = cfg.eta if cfg.auto_eta is None else cfg.auto_eta * float(np.linalg.norm(grad))
        for _ in range(cfg.max_halvings + 1):
            new_atoms = dictionary.atoms - eta * grad
            if np.array_equal(new_atoms, dictionary.atoms):
                break  # zero step: keep the dictionary untouched
            cand = project_columns(new_atoms, rng)
            if _data_term(works, needles, cand) <= current:
                dictionary = cand
                break
            eta *= 0.5
        else:
            eta = 0.0
        rep = _sum_reports(
            [_exact_report(w, nf, dictionary, cfg.lam) for w, nf in zip(works, needles)], t0)
        trace.reports.append(rep)
        trace.grad_norms.append(float(np.linalg.norm(grad)))
        trace.etas.append(eta)
        log.info("epoch %d objective %.6g step %.3g", epoch, rep.total, eta)
    trace.needles = needles
    return dictionary, trace
