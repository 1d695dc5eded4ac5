"""Core CSC data types and the patch operators they are built on.

Conventions used throughout the package:

* A needle position ``(r, c)`` is the top-left corner of a
  ``filter_side x filter_side`` patch that fits fully inside the padded image,
  so an ``H x W`` plane has ``(H - s + 1) x (W - s + 1)`` needle positions.
* Patches and filters are vectorized row-major: entry ``a * s + b`` of a patch
  vector is pixel ``(r + a, c + b)``.
* Needles are held densely as a ``(P, Q, m)`` coefficient array; a needle's
  sparse form is its nonzero entries.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError, PositionError


@dataclass(frozen=True, eq=False)
class LocalDictionary:
    """The ``n x m`` local dictionary; column ``j`` is the vectorized filter ``d_j``."""

    atoms: np.ndarray

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=np.float64, order="C")
        if atoms.ndim != 2:
            raise ConfigError(f"atoms must be 2-D, got shape {atoms.shape}")
        side = int(round(np.sqrt(atoms.shape[0])))
        if side < 1 or side * side != atoms.shape[0]:
            raise ConfigError(f"atom length {atoms.shape[0]} is not a square")
        if atoms.shape[1] < 1:
            raise ConfigError("dictionary needs at least one atom")
        if not np.all(np.isfinite(atoms)):
            raise NumericError("dictionary contains NaN or Inf")
        atoms.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)

    @property
    def filter_side(self) -> int:
        return int(round(np.sqrt(self.atoms.shape[0])))

    @property
    def patch_size(self) -> int:
        return self.atoms.shape[0]

    @property
    def num_filters(self) -> int:
        return self.atoms.shape[1]

    @cached_property
    def gram(self) -> np.ndarray:
        g = self.atoms.T @ self.atoms
        g.setflags(write=False)
        return g

    def filters(self) -> np.ndarray:
        """Filters as an ``(m, s, s)`` stack."""
        s = self.filter_side
        return self.atoms.T.reshape(self.num_filters, s, s)

    def column_norms(self) -> np.ndarray:
        return np.linalg.norm(self.atoms, axis=0)

    @classmethod
    def random(cls, filter_side: int, num_filters: int, rng=None) -> "LocalDictionary":
        rng = np.random.default_rng(rng)
        atoms = rng.standard_normal((filter_side * filter_side, num_filters))
        return cls(atoms / np.linalg.norm(atoms, axis=0))


@dataclass(eq=False)
class NeedleField:
    """Per-position needles of a padded ``height x width`` image."""

    height: int
    width: int
    filter_side: int
    coeffs: np.ndarray  # (P, Q, m)

    def __post_init__(self):
        p, q = grid_shape(self.height, self.width, self.filter_side)
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.ndim != 3 or self.coeffs.shape[:2] != (p, q):
            raise ConfigError(
                f"coeffs shape {self.coeffs.shape} does not match needle grid {(p, q)}"
            )

    @classmethod
    def zeros(cls, height: int, width: int, filter_side: int, num_filters: int) -> "NeedleField":
        p, q = grid_shape(height, width, filter_side)
        return cls(height, width, filter_side, np.zeros((p, q, num_filters)))

    @classmethod
    def like(cls, img: np.ndarray, dictionary: LocalDictionary) -> "NeedleField":
        h, w = np.shape(img)
        return cls.zeros(h, w, dictionary.filter_side, dictionary.num_filters)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.coeffs.shape[:2]

    @property
    def num_filters(self) -> int:
        return self.coeffs.shape[2]

    @property
    def num_positions(self) -> int:
        p, q = self.grid_shape
        return p * q

    def nnz(self) -> int:
        return int(np.count_nonzero(self.coeffs))

    def l1(self) -> float:
        return float(np.abs(self.coeffs).sum())

    def needle(self, pos) -> tuple[np.ndarray, np.ndarray]:
        """Sparse form ``(indices, values)`` of the needle at ``pos``."""
        r, c = _check_position(pos, self.grid_shape)
        alpha = self.coeffs[r, c]
        idx = np.flatnonzero(alpha)
        return idx, alpha[idx]

    def feature_maps(self) -> np.ndarray:
        """Coefficients rearranged as ``m`` feature maps of shape ``(P, Q)``."""
        return np.moveaxis(self.coeffs, 2, 0)

    def copy(self) -> "NeedleField":
        return NeedleField(self.height, self.width, self.filter_side, self.coeffs.copy())


def grid_shape(height: int, width: int, filter_side: int) -> tuple[int, int]:
    if filter_side < 1:
        raise ConfigError("filter_side must be >= 1")
    p, q = height - filter_side + 1, width - filter_side + 1
    if p < 1 or q < 1:
        raise ConfigError(
            f"image {height}x{width} is smaller than the {filter_side}x{filter_side} filter"
        )
    return p, q


def _check_position(pos, grid) -> tuple[int, int]:
    r, c = (int(v) for v in pos)
    if not (0 <= r < grid[0] and 0 <= c < grid[1]):
        raise PositionError(f"needle position {(r, c)} outside grid {tuple(grid)}")
    return r, c


# -- patch operators ---------------------------------------------------------

def extract_patch(plane: np.ndarray, pos, filter_side: int) -> np.ndarray:
    """Row-major vectorized ``filter_side x filter_side`` window at ``pos``."""
    h, w = plane.shape
    r, c = _check_position(pos, grid_shape(h, w, filter_side))
    return plane[r:r + filter_side, c:c + filter_side].reshape(-1).copy()


def place_add_patch(plane: np.ndarray, v: np.ndarray, pos) -> None:
    """In-place ``plane += P_i^T v`` for the patch vector ``v`` at ``pos``."""
    v = np.asarray(v, dtype=np.float64)
    s = int(round(np.sqrt(v.size)))
    if s * s != v.size:
        raise ConfigError(f"patch vector length {v.size} is not a square")
    h, w = plane.shape
    r, c = _check_position(pos, grid_shape(h, w, s))
    plane[r:r + s, c:c + s] += v.reshape(s, s)


def all_patches(plane: np.ndarray, filter_side: int) -> np.ndarray:
    """Read-only ``(P, Q, n)`` view of every patch (no copy when possible)."""
    win = sliding_window_view(plane, (filter_side, filter_side))
    p, q = win.shape[:2]
    return win.reshape(p, q, filter_side * filter_side)


def layer_patches(plane: np.ndarray, filter_side: int, residue) -> np.ndarray:
    """``(Pr, Qc, n)`` copy of the patches of one layer (disjoint footprints)."""
    r, c = residue
    win = sliding_window_view(plane, (filter_side, filter_side))[r::filter_side, c::filter_side]
    pr, qc = win.shape[:2]
    return win.reshape(pr, qc, filter_side * filter_side)


def place_layer(plane: np.ndarray, slices: np.ndarray, residue) -> None:
    """In-place ``plane += sum_i P_i^T slices[i]`` over one layer.

    The footprints of a layer tile a contiguous block, so the addition is a
    single reshaped slice assignment touching every pixel at most once.
    """
    pr, qc, n = slices.shape
    s = int(round(np.sqrt(n)))
    r, c = residue
    block = slices.reshape(pr, qc, s, s).transpose(0, 2, 1, 3).reshape(pr * s, qc * s)
    plane[r:r + pr * s, c:c + qc * s] += block


def reconstruct(needles: NeedleField, dictionary: LocalDictionary) -> np.ndarray:
    """``sum_i P_i^T D_L alpha_i`` by overlap-add of all slices."""
    if needles.filter_side != dictionary.filter_side or needles.num_filters != dictionary.num_filters:
        raise ConfigError(
            f"needles ({needles.filter_side}, m={needles.num_filters}) do not match "
            f"dictionary ({dictionary.filter_side}, m={dictionary.num_filters})"
        )
    s = dictionary.filter_side
    p, q = needles.grid_shape
    slices = (needles.coeffs.reshape(p * q, -1) @ dictionary.atoms.T).reshape(p, q, s, s)
    out = np.zeros((needles.height, needles.width))
    for a in range(s):
        for b in range(s):
            out[a:a + p, b:b + q] += slices[:, :, a, b]
    return out


# -- layers -------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSchedule:
    """Partition of the needle grid into ``s*s`` residue classes.

    Layer ``j`` holds the positions with ``(row % s, col % s) == residues[j]``;
    residues are ordered row-major. Two positions of one layer differ by a
    multiple of ``s`` in each coordinate, so their footprints never overlap.
    """

    grid: tuple[int, int]
    filter_side: int
    residues: tuple[tuple[int, int], ...] = field(repr=False)

    def __len__(self) -> int:
        return len(self.residues)

    def __iter__(self) -> Iterator[tuple[int, int]]:
        return iter(self.residues)

    def positions(self, j: int) -> np.ndarray:
        """``(K, 2)`` array of the positions of layer ``j`` in row-major order."""
        r, c = self.residues[j]
        rows = np.arange(r, self.grid[0], self.filter_side)
        cols = np.arange(c, self.grid[1], self.filter_side)
        rr, cc = np.meshgrid(rows, cols, indexing="ij")
        return np.stack([rr.ravel(), cc.ravel()], axis=1)

    @property
    def layers(self) -> list[np.ndarray]:
        return [self.positions(j) for j in range(len(self))]


def build_layers(height: int, width: int, filter_side: int) -> LayerSchedule:
    grid = grid_shape(height, width, filter_side)
    residues = tuple((r, c) for r in range(filter_side) for c in range(filter_side))
    return LayerSchedule(grid, filter_side, residues)


# -- padded working image ----------------------------------------------------

@dataclass(eq=False)
class WorkImage:
    """Padded signal with its running reconstruction and residual.

    With a mask the residual is ``mask * (original - reconstruction)``;
    ``original`` is zero wherever the mask is zero.
    """

    original: np.ndarray
    reconstruction: np.ndarray
    residual: np.ndarray
    pad: int
    mask: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.original.shape

    def refresh(self) -> None:
        """Recompute the residual from scratch."""
        r = self.original - self.reconstruction
        if self.mask is not None:
            r *= self.mask
        self.residual = r

    def set_reconstruction(self, recon: np.ndarray) -> None:
        self.reconstruction = np.array(recon, dtype=np.float64)
        self.refresh()

    def consistency_error(self) -> float:
        """max |X - X_hat - R| over observed pixels."""
        err = self.original - self.reconstruction - self.residual
        if self.mask is not None:
            err = err * self.mask
        return float(np.abs(err).max()) if err.size else 0.0

    def copy(self) -> "WorkImage":
        return WorkImage(
            self.original.copy(), self.reconstruction.copy(), self.residual.copy(),
            self.pad, None if self.mask is None else self.mask.copy(),
        )


def pad_image(raw: np.ndarray, filter_side: int, mask: Optional[np.ndarray] = None) -> WorkImage:
    """Zero-pad each border by ``filter_side - 1`` pixels.

    When a mask is given the padded border is marked unobserved and observed
    pixels keep their values; masked-out pixels of the signal are zeroed.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2:
        raise ConfigError(f"expected a 2-D plane, got shape {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise NumericError("image contains NaN or Inf")
    pad = filter_side - 1
    x = np.pad(raw, pad)
    m = None
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != raw.shape:
            raise ConfigError(f"mask shape {mask.shape} != image shape {raw.shape}")
        m = np.pad((mask != 0).astype(np.float64), pad)
        x = x * m
    work = WorkImage(x, np.zeros_like(x), x.copy(), pad, m)
    return work


def crop_result(plane: np.ndarray, filter_side: int) -> np.ndarray:
    pad = filter_side - 1
    if pad == 0:
        return np.array(plane, copy=True)
    return np.array(plane[pad:-pad, pad:-pad], copy=True)


# -- objective ---------------------------------------------------------------

@dataclass(frozen=True)
class ObjectiveReport:
    data_term: float
    l1_term: float
    total: float
    nnz: int
    wall_time: float = 0.0

    @classmethod
    def from_terms(cls, data_term: float, l1_term: float, nnz: int, wall_time: float = 0.0):
        return cls(float(data_term), float(l1_term), float(data_term + l1_term), int(nnz), wall_time)

    def as_row(self, epoch: int) -> list:
        return [epoch, self.wall_time, self.data_term, self.l1_term, self.total, self.nnz]


def objective(img, needles: NeedleField, dictionary: LocalDictionary, lam: float,
              start_time: Optional[float] = None) -> ObjectiveReport:
    """Exact global objective on the padded domain (masked when ``img`` has a mask)."""
    if lam < 0:
        raise ConfigError(f"lambda must be nonnegative, got {lam}")
    if isinstance(img, WorkImage):
        x, mask = img.original, img.mask
    else:
        x, mask = np.asarray(img, dtype=np.float64), None
    if x.shape != (needles.height, needles.width):
        raise ConfigError(f"image shape {x.shape} does not match needles {(needles.height, needles.width)}")
    r = x - reconstruct(needles, dictionary)
    if mask is not None:
        r = r * mask
    wall = 0.0 if start_time is None else time.perf_counter() - start_time
    return ObjectiveReport.from_terms(0.5 * float(np.vdot(r, r)), lam * needles.l1(), needles.nnz(), wall)
