"""
Dyadic meshes of (0, 1), the piecewise-constant diffusion field, element-local
forms and the binary64 reference solvers.

Model problem: -(a u')' = f on (0, 1), u(0) = u(1) = 0, with the flux
sigma = a u'. The first-order least-squares functional is

    L(u, sigma) = ||sigma' + f||^2 + ||sigma / a - u'||^2

over continuous P1 functions u in H1_0 and sigma in H1. The exact solution
annihilates both residuals.

Elements are indexed 0 .. 2**J - 1 here; element n covers (n h, (n + 1) h).
"""

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from surrogate_services.discretization import frames as fr
from surrogate_services.discretization.frames import GAUSS_OFFSETS, GAUSS_WEIGHTS, Space
from surrogate_services.errors import ConvergenceError, UsageError
from surrogate_services.numerics.linalg import cg_solve, make_operator

logger = logging.getLogger(__name__)

REFERENCE_TOL = 1e-13
REFERENCE_MAX_ITERS = 20000
BREAKPOINTS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])


@dataclass(frozen=True)
class DyadicMesh:
    """Uniform mesh with 2**J elements and two Gauss points per element."""

    J: int

    @property
    def n_elements(self) -> int:
        return 2 ** self.J

    @property
    def h(self) -> float:
        return 2.0 ** -self.J

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_elements + 1) * self.h

    @cached_property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.n_elements) + 0.5) * self.h

    @cached_property
    def gauss_points(self) -> np.ndarray:
        """Shape (2 * 2**J,), element-ascending, left point first."""
        left = np.arange(self.n_elements)[:, None] * self.h
        return (left + GAUSS_OFFSETS[None, :] * self.h).reshape(-1)

    @cached_property
    def gauss_weights(self) -> np.ndarray:
        return np.tile(GAUSS_WEIGHTS * self.h, self.n_elements)

    @cached_property
    def gauss_shape(self) -> np.ndarray:
        """Values of the (left, right) element hats at the two Gauss points, shape (2, 2)."""
        return np.stack([1.0 - GAUSS_OFFSETS, GAUSS_OFFSETS], axis=1)


def build_mesh(J: int) -> DyadicMesh:
    """
    Dyadic mesh with 2**J elements; for J >= 2 the quarter points are nodes.

    Raises:
        UsageError: J outside 1..16.
    """
    if not isinstance(J, (int, np.integer)) or not 1 <= J <= fr.MAX_LEVEL:
        raise UsageError(f"J must be an integer in 1..{fr.MAX_LEVEL}, got {J!r}")
    return DyadicMesh(J=int(J))


def coefficient_values(y, x) -> np.ndarray:
    """
    a(x) for one parameter vector (shape (4,)) or a batch (shape (B, 4)).

    Returns shape ``x.shape`` or ``(B,) + x.shape``.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != 4:
        raise UsageError(f"parameter vectors need 4 entries, got shape {y.shape}")
    x = np.asarray(x, dtype=np.float64)
    piece = np.clip(np.floor(4.0 * x).astype(int), 0, 3)
    return y[..., piece]


@dataclass(frozen=True)
class DiffusionField:
    """
    a(x) = y[i] on the i-th quarter of (0, 1), the last quarter closed.

    Training parameters are drawn from [0.5, 1.5]**4; any positive values are
    accepted so that scaling studies can leave the box.
    """

    y: tuple

    def __post_init__(self):
        y = tuple(float(v) for v in np.asarray(self.y, dtype=np.float64).reshape(-1))
        if len(y) != 4:
            raise UsageError(f"diffusion field needs 4 values, got {len(y)}")
        if not all(np.isfinite(v) and v > 0.0 for v in y):
            raise UsageError(f"diffusion values must be positive and finite, got {y}")
        object.__setattr__(self, "y", y)

    @property
    def in_parameter_box(self) -> bool:
        return all(0.5 <= v <= 1.5 for v in self.y)

    def __call__(self, x) -> np.ndarray:
        return coefficient_values(self.y, x)

    def on_elements(self, mesh: DyadicMesh) -> np.ndarray:
        return self(mesh.midpoints)

    def at_gauss_points(self, mesh: DyadicMesh) -> np.ndarray:
        return self(mesh.gauss_points)


def _check_element(mesh: DyadicMesh, n: int):
    if not 0 <= n < mesh.n_elements:
        raise UsageError(f"element {n} outside 0..{mesh.n_elements - 1}")


def local_stiffness_energy(mesh: DyadicMesh, field: DiffusionField, n: int) -> np.ndarray:
    """a|_n / h * [[1, -1], [-1, 1]] for the raw nodal hats of element n."""
    _check_element(mesh, n)
    return energy_blocks(mesh.h, field((n + 0.5) * mesh.h))


def fosls_blocks(h: float, a: np.ndarray) -> np.ndarray:
    """
    Element forms of the least-squares functional for element values ``a`` (shape (..., n)).

    Returns shape (..., n, 4, 4) on (u_left, u_right, sigma_left, sigma_right).
    Each block is sum_q w_q R_q^T R_q with the residual rows [sigma'] and
    [sigma/a - u'] at the Gauss point q.
    """
    a = np.asarray(a, dtype=np.float64)
    phi = np.stack([1.0 - GAUSS_OFFSETS, GAUSS_OFFSETS], axis=1)
    dphi = np.array([-1.0, 1.0]) / h
    blocks = np.zeros(a.shape + (4, 4))
    for q in range(2):
        rows = np.zeros(a.shape + (2, 4))
        rows[..., 0, 2:] = dphi
        rows[..., 1, :2] = -dphi
        rows[..., 1, 2:] = phi[q] / a[..., None]
        blocks += GAUSS_WEIGHTS[q] * h * np.einsum("...ri,...rk->...ik", rows, rows)
    return blocks


def energy_blocks(h: float, a: np.ndarray) -> np.ndarray:
    """a / h * [[1, -1], [-1, 1]] for element values ``a`` (shape (..., n)) -> (..., n, 2, 2)."""
    a = np.asarray(a, dtype=np.float64)
    return (a / h)[..., None, None] * np.array([[1.0, -1.0], [-1.0, 1.0]])


def fosls_element_blocks(mesh: DyadicMesh, field: DiffusionField) -> np.ndarray:
    """All element forms of one field, shape (2**J, 4, 4), binary64."""
    return fosls_blocks(mesh.h, field.on_elements(mesh))


def local_blocks_fosls(mesh: DyadicMesh, field: DiffusionField, n: int) -> np.ndarray:
    """4x4 least-squares form of element n on (u_l, u_r, sigma_l, sigma_r)."""
    _check_element(mesh, n)
    return fosls_blocks(mesh.h, field((n + 0.5) * mesh.h))


def assemble_load(mesh: DyadicMesh, f: float, space: "Space | str") -> np.ndarray:
    """Load vector <f, phi_{J,k}> of raw finest hats: f h inside, f h / 2 at boundary half-hats."""
    space = Space.parse(space)
    load = np.full(fr.level_size(space, mesh.J), float(f) * mesh.h)
    if space is Space.H1:
        load[[0, -1]] *= 0.5
    return load


def assemble_energy(mesh: DyadicMesh, field: DiffusionField) -> sp.csr_matrix:
    """Global H1_0 stiffness matrix (2**J - 1 square) of raw nodal hats."""
    a = field.on_elements(mesh) / mesh.h
    main = a[:-1] + a[1:]
    off = -a[1:-1]
    return sp.diags([off, main, off], [-1, 0, 1], format="csr")


def fosls_dofs(mesh: DyadicMesh) -> tuple[int, int]:
    """Numbers of nodal unknowns (u interior, sigma all nodes)."""
    return mesh.n_elements - 1, mesh.n_elements + 1


def assemble_fosls(mesh: DyadicMesh, field: DiffusionField, f: float) -> tuple[sp.csr_matrix, np.ndarray, float]:
    """
    Global least-squares system on nodal unknowns x = (u interior, sigma).

    Returns ``(K, b, c)`` with L(x) = x^T K x + 2 b^T x + c.
    """
    n_u, n_s = fosls_dofs(mesh)
    blocks = fosls_element_blocks(mesh, field)
    elements = np.arange(mesh.n_elements)
    # global index of (u_l, u_r, sigma_l, sigma_r); -1 marks the clamped u nodes
    u_left = elements - 1
    u_right = np.where(elements + 1 <= n_u, elements, -1)
    glob = np.stack([u_left, u_right, n_u + elements, n_u + elements + 1], axis=1)
    rows = np.repeat(glob, 4, axis=1)
    cols = np.tile(glob, (1, 4))
    keep = (rows >= 0) & (cols >= 0)
    K = sp.coo_matrix((blocks.reshape(mesh.n_elements, 16)[keep], (rows[keep], cols[keep])),
                      shape=(n_u + n_s, n_u + n_s)).tocsr()
    b = np.zeros(n_u + n_s)
    b[n_u] = -float(f)
    b[-1] += float(f)
    return K, b, float(f) ** 2


def fosls_functional(mesh: DyadicMesh, field: DiffusionField, u_nodal: np.ndarray,
                     sigma_nodal: np.ndarray, f: float = 1.0) -> np.ndarray:
    """
    Binary64 least-squares functional of nodal P1 functions.

    Args:
        u_nodal: Interior values of u, shape (..., 2**J - 1).
        sigma_nodal: Nodal values of sigma, shape (..., 2**J + 1).

    Returns:
        Functional values, shape (...).
    """
    u_nodal = np.asarray(u_nodal, dtype=np.float64)
    sigma_nodal = np.asarray(sigma_nodal, dtype=np.float64)
    n_u, n_s = fosls_dofs(mesh)
    if u_nodal.shape[-1] != n_u or sigma_nodal.shape[-1] != n_s:
        raise UsageError(f"expected nodal lengths ({n_u}, {n_s}), "
                         f"got ({u_nodal.shape[-1]}, {sigma_nodal.shape[-1]})")
    pad = [(0, 0)] * (u_nodal.ndim - 1) + [(1, 1)]
    u = np.pad(u_nodal, pad)
    du = np.diff(u, axis=-1) / mesh.h
    dsigma = np.diff(sigma_nodal, axis=-1) / mesh.h
    a = field.on_elements(mesh)
    value = mesh.h * np.sum((dsigma + f) ** 2, axis=-1)
    for q in range(2):
        left, right = mesh.gauss_shape[q]
        sigma_q = left * sigma_nodal[..., :-1] + right * sigma_nodal[..., 1:]
        value = value + GAUSS_WEIGHTS[q] * mesh.h * np.sum((sigma_q / a - du) ** 2, axis=-1)
    return value


def _nodal_synthesis(frame: fr.FrameDescriptor):
    """Stacked frame coefficients -> finest nodal values, and its adjoint."""
    norms = frame.finest_norms()

    def apply(w):
        return fr.bpx_synthesize(frame, w) / norms

    def adjoint(v):
        return fr.bpx_adjoint(frame, v / norms)

    return apply, adjoint


def _preconditioned_solve(K: sp.csr_matrix, rhs: np.ndarray, frame_list: list, what: str) -> np.ndarray:
    """
    CG on T^T K T w = T^T rhs with T the block-diagonal nodal synthesis, then x = T w.
    """
    maps = [_nodal_synthesis(frame) for frame in frame_list]
    in_sizes = [frame.total_size for frame in frame_list]
    out_sizes = [frame.finest_size for frame in frame_list]
    in_split = np.cumsum(in_sizes)[:-1]
    out_split = np.cumsum(out_sizes)[:-1]

    def synth(w):
        parts = np.split(w, in_split, axis=-1)
        return np.concatenate([m[0](p) for m, p in zip(maps, parts)], axis=-1)

    def synth_t(v):
        parts = np.split(v, out_split, axis=-1)
        return np.concatenate([m[1](p) for m, p in zip(maps, parts)], axis=-1)

    T = make_operator(sum(in_sizes), sum(out_sizes), synth, synth_t)
    gram = make_operator(sum(in_sizes), sum(in_sizes),
                         lambda w: synth_t((K @ synth(w).T).T),
                         lambda w: synth_t((K @ synth(w).T).T))
    result = cg_solve(gram, T.rmatvec(rhs), tol=REFERENCE_TOL, max_iters=REFERENCE_MAX_ITERS)
    if not result.converged:
        raise ConvergenceError(f"{what} reference solve stopped at residual {result.residual:.3e} "
                               f"after {result.iterations} iterations", result.residual)
    logger.debug("%s reference solve: %d CG iterations", what, result.iterations)
    return T.matvec(result.x)


def solve_reference(field: DiffusionField, J: int, f: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """
    Binary64 minimizer of the least-squares functional on level J.

    Returns:
        ``(u_FE, sigma_FE)``: interior nodal values of u and all nodal values of sigma.

    Raises:
        ConvergenceError: CG did not reach the 1e-13 relative residual.
    """
    mesh = build_mesh(J)
    K, b, _ = assemble_fosls(mesh, field, f)
    frames = [fr.build_frame(Space.H10, J), fr.build_frame(Space.H1, J)]
    x = _preconditioned_solve(K, -b, frames, "fosls")
    n_u, _ = fosls_dofs(mesh)
    return x[:n_u], x[n_u:]


def solve_reference_energy(field: DiffusionField, J: int, f: float = 1.0) -> np.ndarray:
    """Binary64 Galerkin solution (interior nodal values) of the energy formulation."""
    mesh = build_mesh(J)
    A = assemble_energy(mesh, field)
    load = assemble_load(mesh, f, Space.H10)
    return _preconditioned_solve(A, load, [fr.build_frame(Space.H10, J)], "energy")


@dataclass(frozen=True)
class ExactSolution:
    """Closed-form solution for piecewise-constant a and constant f."""

    field: DiffusionField
    f: float = 1.0

    @cached_property
    def sigma0(self) -> float:
        y = np.asarray(self.field.y)
        lo, hi = BREAKPOINTS[:-1], BREAKPOINTS[1:]
        int_x_over_a = np.sum((hi ** 2 - lo ** 2) / 2.0 / y)
        int_inv_a = np.sum((hi - lo) / y)
        return float(self.f * int_x_over_a / int_inv_a)

    def sigma(self, x) -> np.ndarray:
        return self.sigma0 - self.f * np.asarray(x, dtype=np.float64)

    def u(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        total = np.zeros_like(x)
        for lo, hi, a in zip(BREAKPOINTS[:-1], BREAKPOINTS[1:], self.field.y):
            t = np.clip(x, lo, hi)
            total = total + (self.sigma0 * (t - lo) - self.f * (t ** 2 - lo ** 2) / 2.0) / a
        return total

    def __call__(self, x) -> tuple[np.ndarray, np.ndarray]:
        return self.u(x), self.sigma(x)


def exact_solution_oracle(field: DiffusionField, f: float = 1.0) -> ExactSolution:
    return ExactSolution(field=field, f=float(f))


def interpolate_exact(field: DiffusionField, J: int, f: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Nodal interpolant of the exact solution on level J: (u interior, sigma)."""
    mesh = build_mesh(J)
    exact = exact_solution_oracle(field, f)
    return exact.u(mesh.nodes[1:-1]), exact.sigma(mesh.nodes)
