"""
Matrix-free evaluation of the preconditioned quadratic forms.

Two paths compute the same numbers in exact arithmetic:

* stable:   w -> D w (derivative/value samples at the Gauss points) -> pointwise form C_y
* unstable: w -> H w (finest-level coefficients) -> element blocks of A_y

``StableOperator`` realizes D by gathering, for every level, the two hats whose
support contains each Gauss point. Nothing global is assembled; every product
and sum runs in the dtype of the coefficients. Sums over points and elements
use ``tree_sum`` so that the order is fixed.

Sample layout: ``(batch, components, points)`` with components
(u', sigma, sigma') for the least-squares form and (u',) for the energy form.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp

from surrogate_services.discretization import frames as fr
from surrogate_services.discretization.frames import FrameDescriptor, Space
from surrogate_services.discretization.mesh_fem import (assemble_load, build_mesh, coefficient_values,
                                                        energy_blocks, fosls_blocks)
from surrogate_services.errors import UsageError
from surrogate_services.numerics.linalg import make_operator
from surrogate_services.numerics.precision import tree_sum

logger = logging.getLogger(__name__)

U_PRIME, SIGMA, SIGMA_PRIME = 0, 1, 2


class Formulation(str, Enum):
    fosls = "fosls"
    energy = "energy"

    @classmethod
    def parse(cls, name: "str | Formulation") -> "Formulation":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            raise UsageError(f"unknown formulation '{name}' (expected fosls or energy)") from None


def frames_for(formulation: Formulation, J: int, normalized: bool = True) -> tuple:
    """(u frame,) for the energy form, (u frame, sigma frame) for the least-squares form."""
    formulation = Formulation.parse(formulation)
    u_frame = fr.build_frame(Space.H10, J, normalized)
    if formulation is Formulation.energy:
        return (u_frame,)
    return u_frame, fr.build_frame(Space.H1, J, normalized)


def _as_batch(w: np.ndarray, width: int, what: str) -> tuple[np.ndarray, bool]:
    w = np.asarray(w)
    single = w.ndim == 1
    w = w[None, :] if single else w
    if w.ndim != 2 or w.shape[-1] != width:
        raise UsageError(f"{what} must have trailing length {width}, got shape {w.shape}")
    return w, single


@dataclass(frozen=True)
class _Stencil:
    offset: int        # start of the level block inside the field block
    size: int
    idx: np.ndarray    # (points, 2) coefficient of the left/right hat covering the point
    val: np.ndarray    # (points, 2) scaled hat values, zero for clamped hats
    der: np.ndarray    # (points, 2) scaled hat slopes


class StableOperator:
    """
    The sampling operator D from stacked frame coefficients of (u[, sigma]) to
    Gauss-point samples.

    Args:
        J: Finest level.
        formulation: ``fosls`` samples (u', sigma, sigma'), ``energy`` samples u'.
        coarsest: Lowest level carried by the coefficients. ``coarsest=J`` gives a
            single-level sampler of finest-level coefficients.
        normalized: Use H1-normalized hats.
    """

    def __init__(self, J: int, formulation: "Formulation | str" = Formulation.fosls,
                 coarsest: int = 1, normalized: bool = True):
        self.formulation = Formulation.parse(formulation)
        self.mesh = build_mesh(J)
        if not 1 <= coarsest <= J:
            raise UsageError(f"coarsest level must be in 1..{J}, got {coarsest}")
        self.J = J
        self.coarsest = coarsest
        self.normalized = normalized
        self.frames = frames_for(self.formulation, J, normalized)
        self.levels = tuple(range(coarsest, J + 1))
        self.n_points = 2 * 2 ** J
        self.n_components = 3 if self.formulation is Formulation.fosls else 1
        self.field_sizes = tuple(sum(frame.level_sizes[j - 1] for j in self.levels)
                                 for frame in self.frames)
        self.dim_in = sum(self.field_sizes)
        self.dim_out = self.n_components * self.n_points
        # (field, table) producing each sample component
        if self.formulation is Formulation.fosls:
            self.components = ((0, "der"), (1, "val"), (1, "der"))
        else:
            self.components = ((0, "der"),)
        self._stencils = tuple(self._field_stencils(frame) for frame in self.frames)
        self._transposed = tuple(self._transposed_tables(f) for f in range(len(self.frames)))
        self._cast_cache = {}

    def _field_stencils(self, frame: FrameDescriptor) -> tuple:
        element = np.arange(self.n_points) // 2
        stencils = []
        offset = 0
        for j in self.levels:
            size = frame.level_sizes[j - 1]
            e = element >> (self.J - j)
            t = self.mesh.gauss_points * 2.0 ** j - e
            idx = np.stack([e, e + 1], axis=1) - fr.level_nodes(frame.space, j)[0]
            valid = (idx >= 0) & (idx < size)
            idx = np.where(valid, idx, 0)
            scale = np.where(valid, frame.scale(j)[idx], 0.0)
            val = np.stack([1.0 - t, t], axis=1) * scale
            der = np.array([-1.0, 1.0]) * 2.0 ** j * scale
            for array in (idx, val, der):
                array.setflags(write=False)
            stencils.append(_Stencil(offset=offset, size=size, idx=idx, val=val, der=der))
            offset += size
        return tuple(stencils)

    def _transposed_tables(self, field_index: int) -> tuple:
        """Per level: padded (coefficient, entry) tables into the flattened samples."""
        tables = []
        for level, stencil in enumerate(self._stencils[field_index]):
            keys, positions, weights = [], [], []
            for c, (owner, table) in enumerate(self.components):
                if owner != field_index:
                    continue
                coef = stencil.val if table == "val" else stencil.der
                nonzero = coef != 0.0
                q = np.broadcast_to(np.arange(self.n_points)[:, None], coef.shape)
                keys.append(stencil.idx[nonzero])
                positions.append(c * self.n_points + q[nonzero])
                weights.append(coef[nonzero])
            keys = np.concatenate(keys)
            positions = np.concatenate(positions)
            weights = np.concatenate(weights)
            order = np.lexsort((positions, keys))
            keys, positions, weights = keys[order], positions[order], weights[order]
            counts = np.bincount(keys, minlength=stencil.size)
            starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
            rank = np.arange(keys.size) - starts[keys]
            width = int(counts.max())
            # padded slots point at an extra zero column appended after the samples
            idx_t = np.full((stencil.size, width), self.n_components * self.n_points, dtype=np.intp)
            wt_t = np.zeros((stencil.size, width))
            idx_t[keys, rank] = positions
            wt_t[keys, rank] = weights
            tables.append((idx_t, wt_t))
        return tuple(tables)

    def _cast(self, dtype) -> dict:
        key = np.dtype(dtype)
        if key not in self._cast_cache:
            self._cast_cache[key] = {
                "stencils": tuple(tuple((s.offset, s.size, s.idx, s.val.astype(key), s.der.astype(key))
                                        for s in stencils) for stencils in self._stencils),
                "transposed": tuple(tuple((idx_t, wt_t.astype(key)) for idx_t, wt_t in tables)
                                    for tables in self._transposed),
            }
        return self._cast_cache[key]

    def split(self, w: np.ndarray) -> list:
        return np.split(w, np.cumsum(self.field_sizes)[:-1], axis=-1)

    def apply(self, w: np.ndarray) -> np.ndarray:
        """D w: stacked coefficients (batch, dim_in) -> samples (batch, components, points)."""
        w, single = _as_batch(w, self.dim_in, "coefficients")
        tables = self._cast(w.dtype)["stencils"]
        blocks = self.split(w)
        out = np.empty((w.shape[0], self.n_components, self.n_points), dtype=w.dtype)
        with np.errstate(over="ignore", invalid="ignore"):
            for c, (owner, table) in enumerate(self.components):
                acc = None
                for offset, size, idx, val, der in tables[owner]:
                    coef = val if table == "val" else der
                    level = blocks[owner][:, offset:offset + size]
                    for side in range(2):
                        term = level[:, idx[:, side]] * coef[:, side]
                        acc = term if acc is None else acc + term
                out[:, c] = acc
        return out[0] if single else out

    def adjoint(self, s: np.ndarray) -> np.ndarray:
        """D^T s: samples (batch, components, points) -> stacked coefficients (batch, dim_in)."""
        s = np.asarray(s)
        single = s.ndim == 2
        s = s[None] if single else s
        if s.shape[1:] != (self.n_components, self.n_points):
            raise UsageError(f"samples must have shape (batch, {self.n_components}, {self.n_points}), "
                             f"got {s.shape}")
        flat = s.reshape(s.shape[0], -1)
        flat = np.concatenate([flat, np.zeros((flat.shape[0], 1), dtype=flat.dtype)], axis=-1)
        parts = []
        with np.errstate(over="ignore", invalid="ignore"):
            for tables in self._cast(s.dtype)["transposed"]:
                for idx_t, wt_t in tables:
                    parts.append(tree_sum(flat[:, idx_t] * wt_t, axis=-1))
        out = np.concatenate(parts, axis=-1)
        return out[0] if single else out

    def as_linear_operator(self):
        """Binary64 scipy operator on flattened samples, for densification."""
        return make_operator(self.dim_in, self.dim_out,
                             lambda w: self.apply(w.astype(np.float64)).reshape(w.shape[0], -1),
                             lambda s: self.adjoint(s.astype(np.float64).reshape(
                                 s.shape[0], self.n_components, self.n_points)))

    def energy_load(self, f: float, dtype=np.float64) -> np.ndarray:
        """
        <f, phi_{j,k}> for every hat of the carried levels, computed in binary64 and
        rounded once into ``dtype``. Equals H^T applied to the finest load.
        """
        parts = []
        for j in self.levels:
            load = assemble_load(build_mesh(j), f, self.frames[0].space)
            parts.append(load * self.frames[0].scale(j))
        return np.concatenate(parts).astype(dtype)


def apply_D(op: StableOperator, w: np.ndarray) -> np.ndarray:
    return op.apply(w)


def apply_D_adjoint(op: StableOperator, s: np.ndarray) -> np.ndarray:
    return op.adjoint(s)


@dataclass
class FormCy:
    """
    Pointwise form C_y on Gauss-point samples for one or a batch of parameter vectors.

    Least squares, per point q: w_q [[1, -1/a, 0], [-1/a, 1/a^2, 0], [0, 0, 1]]
    on (u', sigma, sigma'). Energy: w_q a(x_q) on (u',).
    """

    formulation: Formulation
    a: np.ndarray           # (batch, points) binary64
    weights: np.ndarray     # (points,) binary64
    _cast_cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, op: StableOperator, y) -> "FormCy":
        a = np.atleast_2d(coefficient_values(y, op.mesh.gauss_points))
        return cls(formulation=op.formulation, a=a, weights=op.mesh.gauss_weights.copy())

    @property
    def batch_size(self) -> int:
        return self.a.shape[0]

    def blocks(self, index: int = 0) -> np.ndarray:
        """Per-point blocks of parameter ``index``, shape (points, m, m)."""
        a = self.a[index]
        w = self.weights
        if self.formulation is Formulation.energy:
            return (w * a)[:, None, None]
        inv = 1.0 / a
        out = np.zeros((a.size, 3, 3))
        out[:, 0, 0] = w
        out[:, 0, 1] = out[:, 1, 0] = -w * inv
        out[:, 1, 1] = w * inv * inv
        out[:, 2, 2] = w
        return out

    def dense(self, index: int = 0) -> sp.csr_matrix:
        """Sparse binary64 matrix on component-major flattened samples."""
        blocks = self.blocks(index)
        n, m, _ = blocks.shape
        q = np.arange(n)
        rows = (np.arange(m)[:, None, None] * n + q[None, None, :]).repeat(m, axis=1)
        cols = (np.arange(m)[None, :, None] * n + q[None, None, :]).repeat(m, axis=0)
        vals = np.moveaxis(blocks, 0, -1)
        return sp.csr_matrix((vals.reshape(-1), (rows.reshape(-1), cols.reshape(-1))), shape=(m * n, m * n))

    def apply(self, s: np.ndarray) -> np.ndarray:
        """C s in binary64 for samples (batch, m, points)."""
        s = np.asarray(s, dtype=np.float64)
        if self.formulation is Formulation.energy:
            return s * (self.weights * self.a)[:, None, :]
        inv = 1.0 / self.a
        r2 = s[:, SIGMA] * inv - s[:, U_PRIME]
        return np.stack([-self.weights * r2, self.weights * r2 * inv,
                         self.weights * s[:, SIGMA_PRIME]], axis=1)

    def cast(self, dtype) -> tuple:
        """(w_q, 1/a, w_q a, sqrt(w_q)) rounded once into ``dtype``."""
        key = np.dtype(dtype)
        if key not in self._cast_cache:
            self._cast_cache[key] = (self.weights.astype(key), (1.0 / self.a).astype(key),
                                     (self.weights * self.a).astype(key),
                                     np.sqrt(self.weights).astype(key))
        return self._cast_cache[key]


def _element_reduce(e: np.ndarray) -> np.ndarray:
    """Point contributions (batch, points) -> per element pairs -> tree over elements."""
    return tree_sum(e[:, 0::2] + e[:, 1::2], axis=-1)


def _fosls_pointwise(form: FormCy, s: np.ndarray, f: float) -> tuple:
    wq, a_inv, _, _ = form.cast(s.dtype)
    r1 = s[:, SIGMA_PRIME] + s.dtype.type(f)
    r2 = s[:, SIGMA] * a_inv - s[:, U_PRIME]
    return r1, r2, (r1 * r1 + r2 * r2) * wq


def fosls_loss_stable(op: StableOperator, form: FormCy, w: np.ndarray, f: float = 1.0,
                      with_grad: bool = False):
    """
    Least-squares loss sum_q w_q [(sigma' + f)^2 + (sigma/a - u')^2] from the samples D w.

    Args:
        op: Sampling operator of the least-squares formulation.
        form: Pointwise form for the parameter vector(s); broadcast over ``w`` when it holds one.
        w: Stacked (u, sigma) frame coefficients, (dim_in,) or (batch, dim_in).
        f: Constant source term.
        with_grad: Also return the gradient D^T (dL/ds).

    Returns:
        Loss per batch entry, and the gradient of the same shape as ``w`` when requested.
    """
    if op.formulation is not Formulation.fosls:
        raise UsageError("fosls_loss_stable needs a least-squares operator")
    w, single = _as_batch(w, op.dim_in, "coefficients")
    with np.errstate(over="ignore", invalid="ignore"):
        s = op.apply(w)
        r1, r2, e = _fosls_pointwise(form, s, f)
        loss = _element_reduce(e)
        if not with_grad:
            return loss[0] if single else loss
        wq, a_inv, _, _ = form.cast(w.dtype)
        two_w = wq + wq
        cotangent = np.stack([-(two_w * r2), two_w * r2 * a_inv, two_w * r1], axis=1)
        grad = op.adjoint(cotangent)
    return (loss[0], grad[0]) if single else (loss, grad)


def energy_loss_stable(op: StableOperator, form: FormCy, w_u: np.ndarray, f: float = 1.0,
                       with_grad: bool = False):
    """1/2 sum_q w_q a_q u'(x_q)^2 - <H^T l, w> with the load pulled back in binary64."""
    if op.formulation is not Formulation.energy:
        raise UsageError("energy_loss_stable needs an energy operator")
    w, single = _as_batch(w_u, op.dim_in, "coefficients")
    load = op.energy_load(f, w.dtype)
    _, _, wq_a, _ = form.cast(w.dtype)
    half = w.dtype.type(0.5)
    with np.errstate(over="ignore", invalid="ignore"):
        s = op.apply(w)[:, U_PRIME]
        flux = wq_a * s
        loss = half * _element_reduce(flux * s) - tree_sum(w * load, axis=-1)
        if not with_grad:
            return loss[0] if single else loss
        grad = op.adjoint(flux[:, None, :]) - load
    return (loss[0], grad[0]) if single else (loss, grad)


def quadratic_form_stable(op: StableOperator, form: FormCy, w: np.ndarray) -> np.ndarray:
    """(D w)^T C_y (D w) in the dtype of ``w``."""
    w, single = _as_batch(w, op.dim_in, "coefficients")
    with np.errstate(over="ignore", invalid="ignore"):
        s = op.apply(w)
        if op.formulation is Formulation.fosls:
            value = _element_reduce(_fosls_pointwise(form, s, 0.0)[2])
        else:
            _, _, wq_a, _ = form.cast(w.dtype)
            value = _element_reduce(wq_a * s[:, U_PRIME] * s[:, U_PRIME])
    return value[0] if single else value


# --- residual form for Gauss-Newton ---

def fosls_residuals(op: StableOperator, form: FormCy, w: np.ndarray, f: float = 1.0) -> np.ndarray:
    """sqrt(w_q) (sigma' + f, sigma/a - u') per point, shape (batch, 2, points); loss = sum of squares."""
    w, _ = _as_batch(w, op.dim_in, "coefficients")
    _, a_inv, _, root_w = form.cast(w.dtype)
    with np.errstate(over="ignore", invalid="ignore"):
        s = op.apply(w)
        r1 = s[:, SIGMA_PRIME] + w.dtype.type(f)
        r2 = s[:, SIGMA] * a_inv - s[:, U_PRIME]
        return np.stack([root_w * r1, root_w * r2], axis=1)


def residual_jvp(op: StableOperator, form: FormCy, dw: np.ndarray) -> np.ndarray:
    """Derivative of ``fosls_residuals`` in direction ``dw`` (independent of f and w)."""
    dw, _ = _as_batch(dw, op.dim_in, "direction")
    _, a_inv, _, root_w = form.cast(dw.dtype)
    ds = op.apply(dw)
    return np.stack([root_w * ds[:, SIGMA_PRIME], root_w * (ds[:, SIGMA] * a_inv - ds[:, U_PRIME])], axis=1)


def residual_vjp(op: StableOperator, form: FormCy, dr: np.ndarray) -> np.ndarray:
    """Transpose of ``residual_jvp``: (batch, 2, points) -> (batch, dim_in)."""
    dr = np.asarray(dr)
    _, a_inv, _, root_w = form.cast(dr.dtype)
    r2 = root_w * dr[:, 1]
    cotangent = np.stack([-r2, r2 * a_inv, root_w * dr[:, 0]], axis=1)
    return op.adjoint(cotangent)


# --- unstable path: synthesis followed by element blocks ---

class NodalForm:
    """
    Element blocks of A_y on finest-level coefficients, scaled to the basis in use.

    With ``normalized=True`` the blocks act on coefficients of the H1-normalized
    finest hats (the output of ``bpx_synthesize``); otherwise on nodal values.
    Clamped u nodes carry zero rows and columns.
    """

    def __init__(self, J: int, formulation: "Formulation | str", y, normalized: bool = True):
        self.formulation = Formulation.parse(formulation)
        self.mesh = build_mesh(J)
        self.frames = frames_for(self.formulation, J, normalized)
        a = np.atleast_2d(coefficient_values(y, self.mesh.midpoints))
        u_scale = np.pad(1.0 / self.frames[0].finest_norms(), 1)
        if self.formulation is Formulation.fosls:
            s_scale = 1.0 / self.frames[1].finest_norms()
            local = np.stack([u_scale[:-1], u_scale[1:], s_scale[:-1], s_scale[1:]], axis=1)
            blocks = fosls_blocks(self.mesh.h, a)
            # least-squares linear term b^T x: -f sigma(0) + f sigma(1), per unit f
            linear = np.zeros(self.frames[1].finest_size)
            linear[0], linear[-1] = -s_scale[0], s_scale[-1]
        else:
            local = np.stack([u_scale[:-1], u_scale[1:]], axis=1)
            blocks = energy_blocks(self.mesh.h, a)
            linear = assemble_load(self.mesh, 1.0, Space.H10) * u_scale[1:-1]
        self.blocks = blocks * local[:, :, None] * local[:, None, :]
        self.linear = linear
        self.sizes = tuple(frame.finest_size for frame in self.frames)
        self._cast_cache = {}

    def cast(self, dtype, f: float) -> tuple:
        """Blocks, scaled linear term and f^2 rounded once into ``dtype``."""
        key = (np.dtype(dtype), float(f))
        if key not in self._cast_cache:
            factor = 2.0 * f if self.formulation is Formulation.fosls else f
            self._cast_cache[key] = (self.blocks.astype(key[0]), (factor * self.linear).astype(key[0]),
                                     np.asarray(f * f).astype(key[0]))
        return self._cast_cache[key]

    def local_vectors(self, v: list) -> list:
        u = np.pad(v[0], ((0, 0), (1, 1)))
        local = [u[:, :-1], u[:, 1:]]
        if self.formulation is Formulation.fosls:
            local += [v[1][:, :-1], v[1][:, 1:]]
        return local

    def scatter(self, g_local: list) -> list:
        """Adds element contributions back onto the finest coefficients (left, then right)."""
        dtype = g_local[0].dtype
        batch, n = g_local[0].shape
        u = np.zeros((batch, n + 1), dtype=dtype)
        u[:, :-1] += g_local[0]
        u[:, 1:] += g_local[1]
        out = [u[:, 1:-1]]
        if self.formulation is Formulation.fosls:
            sigma = np.zeros((batch, n + 1), dtype=dtype)
            sigma[:, :-1] += g_local[2]
            sigma[:, 1:] += g_local[3]
            out.append(sigma)
        return out


def _element_products(blocks: np.ndarray, x: list) -> tuple:
    """Per element y = K x and x^T K x with explicit multiply-adds in the working dtype."""
    m = len(x)
    y = []
    for i in range(m):
        acc = blocks[..., i, 0] * x[0]
        for k in range(1, m):
            acc = acc + blocks[..., i, k] * x[k]
        y.append(acc)
    e = x[0] * y[0]
    for i in range(1, m):
        e = e + x[i] * y[i]
    return y, e


def _finest_coefficients(frames, form: NodalForm, w: np.ndarray) -> tuple:
    if frames is None:
        width = sum(form.sizes)
        w, single = _as_batch(w, width, "nodal coefficients")
        return np.split(w, np.cumsum(form.sizes)[:-1], axis=-1), w, single
    width = sum(frame.total_size for frame in frames)
    w, single = _as_batch(w, width, "coefficients")
    blocks = np.split(w, np.cumsum([frame.total_size for frame in frames])[:-1], axis=-1)
    return [fr.bpx_synthesize(frame, b) for frame, b in zip(frames, blocks)], w, single


def _pull_back(frames, v_grad: list) -> np.ndarray:
    if frames is None:
        return np.concatenate(v_grad, axis=-1)
    return np.concatenate([fr.bpx_adjoint(frame, g) for frame, g in zip(frames, v_grad)], axis=-1)


def _unstable_loss(frames, form: NodalForm, w: np.ndarray, f: float, with_grad: bool):
    with np.errstate(over="ignore", invalid="ignore"):
        v, w, single = _finest_coefficients(frames, form, w)
        blocks, linear, f_sq = form.cast(w.dtype, f)
        y, e = _element_products(blocks, form.local_vectors(v))
        quad = tree_sum(e, axis=-1)
        if form.formulation is Formulation.fosls:
            loss = quad + tree_sum(v[1] * linear, axis=-1) + f_sq
        else:
            loss = w.dtype.type(0.5) * quad - tree_sum(v[0] * linear, axis=-1)
        if not with_grad:
            return loss[0] if single else loss
        if form.formulation is Formulation.fosls:
            g = form.scatter([yi + yi for yi in y])
            g[1] = g[1] + linear
        else:
            g = form.scatter(y)
            g[0] = g[0] - linear
        grad = _pull_back(frames, g)
    return (loss[0], grad[0]) if single else (loss, grad)


def fosls_loss_unstable(frames, form: NodalForm, w: np.ndarray, f: float = 1.0, with_grad: bool = False):
    """
    Least-squares loss through synthesis: v = H w in the working dtype, then the
    element blocks of A_y and the linear term on v; the gradient runs back through H^T.

    Args:
        frames: (u frame, sigma frame) of the coefficients, or None when ``w`` already
            holds finest-level coefficients (no preconditioning).
        form: Element blocks built for the same basis as ``frames``.
    """
    if form.formulation is not Formulation.fosls:
        raise UsageError("fosls_loss_unstable needs a least-squares form")
    return _unstable_loss(frames, form, w, f, with_grad)


def energy_loss_unstable(frames, form: NodalForm, w_u: np.ndarray, f: float = 1.0, with_grad: bool = False):
    """1/2 v^T A v - l^T v with v = H w in the working dtype."""
    if form.formulation is not Formulation.energy:
        raise UsageError("energy_loss_unstable needs an energy form")
    return _unstable_loss(frames, form, w_u, f, with_grad)


def quadratic_form_unstable(frames, form: NodalForm, w: np.ndarray) -> np.ndarray:
    """(H w)^T A_y (H w) in the dtype of ``w``."""
    with np.errstate(over="ignore", invalid="ignore"):
        v, w, single = _finest_coefficients(frames, form, w)
        blocks, _, _ = form.cast(w.dtype, 0.0)
        _, e = _element_products(blocks, form.local_vectors(v))
        value = tree_sum(e, axis=-1)
    return value[0] if single else value
