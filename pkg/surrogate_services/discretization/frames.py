"""
Multilevel hat-function frames on the dyadic hierarchy of (0, 1).

Level j carries the nodes x = k * 2**-j. The H1_0 frame uses the interior hats
(k = 1 .. 2**j - 1), the H1 frame adds the two boundary half-hats
(k = 0 .. 2**j). Coefficients of all levels are stacked level-major with
levels ascending, so ``w = (w_1, ..., w_J)``.

With ``normalized=True`` every hat is divided by its H1 norm, which is
computed once in binary64 and rounded into the working precision on demand.
The synthesis ``H`` maps stacked coefficients to the coefficients of the
finest level in the same (normalized or raw) basis; ``to_nodal`` turns those
into point values.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from surrogate_services.errors import UsageError

logger = logging.getLogger(__name__)

MAX_LEVEL = 16

# reference 2-point Gauss-Legendre rule on (0, 1)
GAUSS_OFFSETS = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
GAUSS_WEIGHTS = np.array([0.5, 0.5])


class Space(str, Enum):
    """Function space spanned by the hats of a level."""

    H10 = "H10"
    H1 = "H1"

    @classmethod
    def parse(cls, name: "str | Space") -> "Space":
        if isinstance(name, cls):
            return name
        key = str(name).strip().upper().replace("_", "").replace("¹", "1").replace("₀", "0")
        for space in cls:
            if key == space.value:
                return space
        raise UsageError(f"unknown space '{name}' (expected H10 or H1)")


def level_size(space: Space, j: int) -> int:
    return 2 ** j - 1 if space is Space.H10 else 2 ** j + 1


def level_nodes(space: Space, j: int) -> np.ndarray:
    """Mesh indices k of the hats of level j (node x = k * 2**-j)."""
    start, stop = (1, 2 ** j) if space is Space.H10 else (0, 2 ** j + 1)
    return np.arange(start, stop)


def h1_norm_hat(j: int, boundary: bool = False) -> float:
    """
    Closed-form H1 norm of a unit-height hat on level j.

    Interior hats: sqrt(2/h + 2h/3) = sqrt(2**(j+1) + 2**(1-j)/3).
    Boundary half-hats (H1 space only): sqrt(1/h + h/3).
    """
    if j < 1:
        raise UsageError(f"level must be >= 1, got {j}")
    h = 2.0 ** -j
    if boundary:
        return float(np.sqrt(1.0 / h + h / 3.0))
    return float(np.sqrt(2.0 / h + 2.0 * h / 3.0))


def _h1_norms_by_quadrature(space: Space, j: int) -> np.ndarray:
    """
    H1 norms of all hats of level j, integrated element by element with the
    2-point Gauss rule (exact for the quadratic integrands) in binary64.
    """
    h = 2.0 ** -j
    # one element: hat rising 0 -> 1 (mirror image has the same integrals)
    values = GAUSS_OFFSETS
    per_element = float(np.sum(GAUSS_WEIGHTS * h * (values ** 2 + (1.0 / h) ** 2)))
    nodes = level_nodes(space, j)
    support = np.where((nodes == 0) | (nodes == 2 ** j), 1, 2)
    return np.sqrt(support * per_element)


def hat_values(space: Space, j: int, x: np.ndarray, derivative: bool = False) -> np.ndarray:
    """
    Unit-height hats (or their derivatives) of level j evaluated at the points x.

    Returns an array of shape ``x.shape + (n_j,)``. Derivatives at mesh nodes
    take the right-sided value.
    """
    x = np.asarray(x, dtype=np.float64)
    scale = 2.0 ** j
    t = x[..., None] * scale - level_nodes(space, j)
    if not derivative:
        return np.maximum(0.0, 1.0 - np.abs(t))
    slope = np.where((t >= -1.0) & (t < 0.0), scale, 0.0)
    return np.where((t >= 0.0) & (t < 1.0), -scale, slope)


@dataclass(frozen=True)
class FrameDescriptor:
    """
    Index sets, H1 normalization and prolongation stencils of a multilevel frame.

    ``norms[j-1]`` holds the binary64 H1 norms of level j; for an unnormalized
    frame they are still stored but the stencils ignore them.
    """

    space: Space
    J: int
    normalized: bool
    level_sizes: tuple
    offsets: tuple
    norms: tuple = field(compare=False)
    _tables: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    @property
    def total_size(self) -> int:
        return self.offsets[-1]

    @property
    def finest_size(self) -> int:
        return self.level_sizes[-1]

    def level_slice(self, j: int) -> slice:
        if not 1 <= j <= self.J:
            raise UsageError(f"level {j} outside 1..{self.J}")
        return slice(self.offsets[j - 1], self.offsets[j])

    def split(self, w: np.ndarray) -> list:
        """Per-level views of stacked coefficients (last axis)."""
        if w.shape[-1] != self.total_size:
            raise UsageError(f"stacked coefficients have length {w.shape[-1]}, expected {self.total_size}")
        return [w[..., self.level_slice(j)] for j in range(1, self.J + 1)]

    def scale(self, j: int) -> np.ndarray:
        """Basis scaling 1/||phi_{j,k}|| (ones when unnormalized), binary64."""
        if self.normalized:
            return 1.0 / self.norms[j - 1]
        return np.ones(self.level_sizes[j - 1])

    def prolongation_matrix(self, j: int) -> sp.csr_matrix:
        """Sparse binary64 P_j : R^{n_{j-1}} -> R^{n_j} (j >= 2)."""
        if not 2 <= j <= self.J:
            raise UsageError(f"prolongation is defined for levels 2..{self.J}, got {j}")
        coarse_nodes = level_nodes(self.space, j - 1)
        fine_nodes = level_nodes(self.space, j)
        rows, cols, vals = [], [], []
        for c, k in enumerate(coarse_nodes):
            for offset, weight in ((-1, 0.5), (0, 1.0), (1, 0.5)):
                i = 2 * k + offset
                r = i - fine_nodes[0]
                if 0 <= r < fine_nodes.size:
                    rows.append(r)
                    cols.append(c)
                    vals.append(weight)
        rows = np.asarray(rows)
        cols = np.asarray(cols)
        vals = np.asarray(vals)
        if self.normalized:
            vals = vals * self.norms[j - 1][rows] / self.norms[j - 2][cols]
        shape = (self.level_sizes[j - 1], self.level_sizes[j - 2])
        return sp.csr_matrix((vals, (rows, cols)), shape=shape)

    def synthesis_matrix(self) -> sp.csr_matrix:
        """Sparse binary64 H = [P_J...P_2, ..., P_J, I] for oracles and densification."""
        blocks = []
        chain = sp.identity(self.finest_size, format="csr")
        for j in range(self.J, 0, -1):
            blocks.append(chain)
            if j >= 2:
                chain = (chain @ self.prolongation_matrix(j)).tocsr()
        return sp.hstack(blocks[::-1], format="csr")

    def tables(self, dtype) -> list:
        """
        Gather stencils of P_j and P_j^T for j = 2..J, weights rounded once into ``dtype``.

        Entry ``j - 2`` is ``(idx, val, idx_t, val_t)`` with padded rows of width 2
        (prolongation) and 3 (restriction).
        """
        key = np.dtype(dtype)
        if key not in self._tables:
            stencils = []
            for j in range(2, self.J + 1):
                p = self.prolongation_matrix(j)
                idx, val = _padded_rows(p, 2)
                idx_t, val_t = _padded_rows(p.T.tocsr(), 3)
                stencils.append((idx, val.astype(key), idx_t, val_t.astype(key)))
            self._tables[key] = stencils
        return self._tables[key]

    def finest_norms(self, dtype=np.float64) -> np.ndarray:
        if not self.normalized:
            return np.ones(self.finest_size, dtype=dtype)
        return self.norms[-1].astype(dtype)


def _padded_rows(m: sp.csr_matrix, width: int) -> tuple[np.ndarray, np.ndarray]:
    m = m.tocsr()
    m.sort_indices()
    n = m.shape[0]
    idx = np.zeros((n, width), dtype=np.intp)
    val = np.zeros((n, width), dtype=np.float64)
    for r in range(n):
        start, stop = m.indptr[r], m.indptr[r + 1]
        if stop - start > width:
            raise UsageError(f"row {r} has {stop - start} entries, table width is {width}")
        idx[r, :stop - start] = m.indices[start:stop]
        val[r, :stop - start] = m.data[start:stop]
    return idx, val


@lru_cache(maxsize=64)
def build_frame(space: "Space | str", J: int, normalized: bool = True) -> FrameDescriptor:
    """
    Builds the multilevel frame of ``space`` on levels 1..J.

    Args:
        space: H10 (interior hats) or H1 (with boundary half-hats).
        J: Finest level, 1 <= J <= 16.
        normalized: Divide every hat by its H1 norm.

    Raises:
        UsageError: J out of range or unknown space.
    """
    space = Space.parse(space)
    if not 1 <= J <= MAX_LEVEL:
        raise UsageError(f"J must be in 1..{MAX_LEVEL}, got {J}")
    sizes = tuple(level_size(space, j) for j in range(1, J + 1))
    offsets = tuple(int(o) for o in np.concatenate([[0], np.cumsum(sizes)]))
    norms = []
    for j in range(1, J + 1):
        n = _h1_norms_by_quadrature(space, j)
        n.setflags(write=False)
        norms.append(n)
    logger.debug("built %s frame J=%d with %d coefficients", space.value, J, offsets[-1])
    return FrameDescriptor(space=space, J=J, normalized=normalized, level_sizes=sizes,
                           offsets=offsets, norms=tuple(norms))


def _gather(x: np.ndarray, idx: np.ndarray, val: np.ndarray) -> np.ndarray:
    out = x[..., idx[:, 0]] * val[:, 0]
    for col in range(1, idx.shape[1]):
        out = out + x[..., idx[:, col]] * val[:, col]
    return out


def prolongate(frame: FrameDescriptor, j: int, coarse: np.ndarray) -> np.ndarray:
    """
    Applies P_j to level j-1 coefficients (last axis), in the dtype of ``coarse``.

    Raises:
        UsageError: ``coarse`` does not have length n_{j-1}.
    """
    coarse = np.asarray(coarse)
    if not 2 <= j <= frame.J:
        raise UsageError(f"prolongation is defined for levels 2..{frame.J}, got {j}")
    if coarse.shape[-1] != frame.level_sizes[j - 2]:
        raise UsageError(f"coarse vector has length {coarse.shape[-1]}, "
                         f"expected {frame.level_sizes[j - 2]}")
    idx, val, _, _ = frame.tables(coarse.dtype)[j - 2]
    return _gather(coarse, idx, val)


def restrict(frame: FrameDescriptor, j: int, fine: np.ndarray) -> np.ndarray:
    """Applies P_j^T to level j coefficients (last axis)."""
    fine = np.asarray(fine)
    if fine.shape[-1] != frame.level_sizes[j - 1]:
        raise UsageError(f"fine vector has length {fine.shape[-1]}, expected {frame.level_sizes[j - 1]}")
    _, _, idx_t, val_t = frame.tables(fine.dtype)[j - 2]
    return _gather(fine, idx_t, val_t)


def bpx_synthesize(frame: FrameDescriptor, w: np.ndarray) -> np.ndarray:
    """
    Synthesis H: stacked coefficients (..., N_hat) -> finest-level coefficients (..., n_J).

    Runs the recursion v <- P_j v + w_j from the coarsest level up, entirely in
    the dtype of ``w``.
    """
    w = np.asarray(w)
    blocks = frame.split(w)
    v = blocks[0]
    for j in range(2, frame.J + 1):
        v = prolongate(frame, j, v) + blocks[j - 1]
    return np.array(v, dtype=w.dtype, copy=True)


def bpx_adjoint(frame: FrameDescriptor, v: np.ndarray) -> np.ndarray:
    """Adjoint H^T: finest-level coefficients (..., n_J) -> stacked coefficients (..., N_hat)."""
    v = np.asarray(v)
    if v.shape[-1] != frame.finest_size:
        raise UsageError(f"finest vector has length {v.shape[-1]}, expected {frame.finest_size}")
    blocks = [v]
    for j in range(frame.J, 1, -1):
        blocks.append(restrict(frame, j, blocks[-1]))
    return np.concatenate(blocks[::-1], axis=-1)


def to_nodal(frame: FrameDescriptor, v: np.ndarray) -> np.ndarray:
    """Finest-level coefficients to point values at the finest nodes."""
    v = np.asarray(v)
    return v / frame.finest_norms(v.dtype) if frame.normalized else v.copy()


def from_nodal(frame: FrameDescriptor, values: np.ndarray) -> np.ndarray:
    values = np.asarray(values)
    return values * frame.finest_norms(values.dtype) if frame.normalized else values.copy()


def evaluate(frame: FrameDescriptor, w: np.ndarray, x: np.ndarray, derivative: bool = False) -> np.ndarray:
    """
    Binary64 point evaluation of sum_{j,k} w_{j,k} phi_{j,k}(x) level by level,
    without synthesis.
    """
    w = np.asarray(w, dtype=np.float64)
    total = 0.0
    for j, block in enumerate(frame.split(w), start=1):
        basis = hat_values(frame.space, j, x, derivative=derivative) * frame.scale(j)
        total = total + basis @ block
    return np.asarray(total)
