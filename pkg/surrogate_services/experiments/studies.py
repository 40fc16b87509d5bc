"""
Numerical studies outside of training. Each returns a pandas DataFrame; the CLI
writes them as CSV.

    cond_report           spectra of A_y, H^T A_y H, D and C_y over levels
    precision_experiment  stable vs synthesized evaluation of the quadratic form
    init_demo             initial network fields with and without frame synthesis
    error_equivalence     least-squares functional vs squared solution error
"""

import logging

import numpy as np
import pandas as pd
import scipy.sparse as sp

from surrogate_services.discretization import frames as fr
from surrogate_services.discretization import stable_op as so
from surrogate_services.discretization.mesh_fem import (
    DiffusionField, assemble_energy, assemble_fosls, build_mesh, exact_solution_oracle, fosls_functional,
    solve_reference,
)
from surrogate_services.errors import UsageError
from surrogate_services.experiments.sampling import sample_parameters
from surrogate_services.networks.resnet import build_network
from surrogate_services.networks.schemas import ArchitectureKind, ArchitectureSpec
from surrogate_services.numerics.linalg import condition_number, densify, singular_value_ratio
from surrogate_services.numerics.precision import ScalarKind, round_to

logger = logging.getLogger(__name__)

DENSE_MAX_LEVEL = 8
PRECISIONS = (ScalarKind.binary16, ScalarKind.binary32, ScalarKind.binary64)


def _parameter_rows(count: int, seed: int, include_constant: bool) -> np.ndarray:
    rows = sample_parameters(count, seed)
    if include_constant:
        rows = np.vstack([np.ones((1, 4)), rows])
    return rows


def _nodal_synthesis_matrix(frames: tuple) -> sp.csr_matrix:
    """Stacked frame coefficients -> nodal values, block diagonal over the fields."""
    blocks = [sp.diags(1.0 / frame.finest_norms()) @ frame.synthesis_matrix() for frame in frames]
    return sp.block_diag(blocks, format="csr")


def cond_report(j_min: int, j_max: int, samples: int, seed: int = 0,
                formulation: "so.Formulation | str" = so.Formulation.fosls) -> pd.DataFrame:
    """
    Condition numbers per (J, y) in binary64: the finite element matrix A_y, the
    preconditioned H^T A_y H and D^T C_y D (nonzero spectrum), D (nonzero singular
    values) and the pointwise form C_y (nonzero spectrum). The first row per level
    uses a = 1.
    """
    formulation = so.Formulation.parse(formulation)
    if not 2 <= j_min <= j_max <= DENSE_MAX_LEVEL:
        raise UsageError(f"levels must satisfy 2 <= jmin <= jmax <= {DENSE_MAX_LEVEL}, got {j_min}..{j_max}")
    ys = _parameter_rows(samples, seed, include_constant=True)
    rows = []
    for J in range(j_min, j_max + 1):
        mesh = build_mesh(J)
        op = so.StableOperator(J, formulation)
        D = densify(op.as_linear_operator())
        cond_D = singular_value_ratio(D)
        T = _nodal_synthesis_matrix(so.frames_for(formulation, J, normalized=True))
        for k, y in enumerate(ys):
            field = DiffusionField(tuple(y))
            if formulation is so.Formulation.fosls:
                A = assemble_fosls(mesh, field, 0.0)[0]
            else:
                A = assemble_energy(mesh, field)
            HAH = (T.T @ A @ T).toarray()
            C = so.FormCy.build(op, y).dense(0)
            DCD = D.T @ (C @ D)
            rows.append({
                "J": J, "sample": k, "y1": y[0], "y2": y[1], "y3": y[2], "y4": y[3],
                "cond_A": condition_number(A.toarray()),
                "cond_HAH": condition_number(HAH, nonzero_only=True),
                "cond_DCD": condition_number(DCD, nonzero_only=True),
                "cond_D": cond_D,
                "cond_C": condition_number(C.toarray(), nonzero_only=True),
            })
        logger.info("cond J=%d: A %.3e, H^T A H %.3e (a = 1)", J, rows[-len(ys)]["cond_A"], rows[-len(ys)]["cond_HAH"])
    return pd.DataFrame(rows)


def precision_experiment(J: int, trials: int, seed: int = 0,
                         formulation: "so.Formulation | str" = so.Formulation.fosls) -> pd.DataFrame:
    """
    Relative errors of (D w)^T C_y (D w) and (H w)^T A_y (H w) evaluated in each
    precision, for random unit coefficient vectors w.

    The binary64 value at the rounded ``w`` is the truth, so only the evaluation
    error is measured. The linear term is left out (f = 0).
    """
    formulation = so.Formulation.parse(formulation)
    rng = np.random.default_rng(seed)
    op = so.StableOperator(J, formulation)
    frames = so.frames_for(formulation, J, normalized=True)
    ys = sample_parameters(trials, seed)
    rows = []
    for trial, y in enumerate(ys):
        form = so.FormCy.build(op, y)
        nodal = so.NodalForm(J, formulation, y, normalized=True)
        w = rng.standard_normal(op.dim_in)
        w /= np.linalg.norm(w)
        for kind in PRECISIONS:
            w_k = round_to(kind, w)
            truth = float(so.quadratic_form_stable(op, form, w_k.astype(np.float64)))
            stable = float(so.quadratic_form_stable(op, form, w_k))
            unstable = float(so.quadratic_form_unstable(frames, nodal, w_k))
            rows.append({
                "trial": trial, "precision": kind.value, "truth": truth, "stable": stable, "unstable": unstable,
                "error_stable": abs(stable - truth) / abs(truth),
                "error_unstable": abs(unstable - truth) / abs(truth),
            })
    return pd.DataFrame(rows)


def summarize_precision(frame: pd.DataFrame) -> pd.DataFrame:
    """Median errors and median unstable/stable error ratio per precision."""
    ratio = frame["error_unstable"] / frame["error_stable"].where(frame["error_stable"] > 0)
    summary = frame.assign(ratio=ratio).groupby("precision", sort=False).agg(
        median_error_stable=("error_stable", "median"),
        median_error_unstable=("error_unstable", "median"),
        median_ratio=("ratio", "median"),
    )
    return summary.reset_index()


def discrete_h1_norm(values: np.ndarray, h: float) -> np.ndarray:
    """Discrete H1 norm of interior nodal values with zero boundary values (last axis)."""
    v = np.pad(np.asarray(values, dtype=np.float64), [(0, 0)] * (np.ndim(values) - 1) + [(1, 1)])
    return np.sqrt(h * np.sum(v ** 2, axis=-1) + np.sum(np.diff(v, axis=-1) ** 2, axis=-1) / h)


def init_demo(kind: "ArchitectureKind | str", count: int, seed: int = 0, J: int = 10,
              theta: np.ndarray = None) -> tuple[pd.DataFrame, pd.DataFrame]:
    """
    Initial u fields of freshly initialized networks on the finest grid.

    Draw i initializes the network with seed ``seed + i`` and evaluates it at one
    sampled parameter vector. The frame path synthesizes the u coefficients; the
    raw path reads the finest-level u block as nodal values.

    Args:
        theta: Use these parameters for every draw instead of fresh initializations.

    Returns:
        (fields, norms): long-format values per draw and node, and both discrete
        H1 norms per draw.
    """
    spec = ArchitectureSpec(kind=ArchitectureKind(kind), J=J, output="frame")
    network = build_network(spec)
    frame = network.frames[0]
    h = build_mesh(J).h
    x = fr.level_nodes(frame.space, J) * h
    ys = sample_parameters(count, seed)
    fields, norms = [], []
    for i, y in enumerate(ys):
        params = network.init_params(seed + i) if theta is None else theta
        u_coeffs = network.forward(params, y)[:frame.total_size]
        frame_values = fr.to_nodal(frame, fr.bpx_synthesize(frame, u_coeffs))
        raw_values = u_coeffs[frame.level_slice(J)]
        fields.append(pd.DataFrame({"draw": i, "x": x, "frame": frame_values, "raw": raw_values}))
        norms.append({"draw": i, "h1_frame": float(discrete_h1_norm(frame_values, h)),
                      "h1_raw": float(discrete_h1_norm(raw_values, h))})
    return pd.concat(fields, ignore_index=True), pd.DataFrame(norms)


def _solution_error_squared(mesh, exact, u_nodal: np.ndarray, sigma_nodal: np.ndarray) -> float:
    """||u_h - u||_{H1}^2 + ||sigma_h - sigma||_{H(div)}^2 with 4-point Gauss per element."""
    points, weights = np.polynomial.legendre.leggauss(4)
    t = 0.5 * (points + 1.0)
    left = mesh.nodes[:-1, None]
    x = left + mesh.h * t[None, :]
    w = 0.5 * mesh.h * weights[None, :]
    u = np.pad(u_nodal, 1)
    u_h = u[:-1, None] * (1 - t) + u[1:, None] * t
    du_h = (np.diff(u) / mesh.h)[:, None]
    s_h = sigma_nodal[:-1, None] * (1 - t) + sigma_nodal[1:, None] * t
    ds_h = (np.diff(sigma_nodal) / mesh.h)[:, None]
    field = exact.field
    sigma = exact.sigma(x)
    du = sigma / field(x)
    total = (u_h - exact.u(x)) ** 2 + (du_h - du) ** 2 + (s_h - sigma) ** 2 + (ds_h + exact.f) ** 2
    return float(np.sum(w * total))


def error_equivalence(J: int = 8, perturbations: int = 30, seed: int = 0, f: float = 1.0) -> pd.DataFrame:
    """
    Least-squares functional against the squared H1 x H(div) error of perturbed
    reference solutions; the ratio stays within a band for every perturbation.

    Perturbation i adds a Gaussian nodal vector with amplitude 10^U(-4, 0) to the
    reference (u, sigma) of a sampled parameter vector.
    """
    rng = np.random.default_rng(seed)
    mesh = build_mesh(J)
    ys = sample_parameters(perturbations, seed)
    rows = []
    for i, y in enumerate(ys):
        field = DiffusionField(tuple(y))
        exact = exact_solution_oracle(field, f)
        u_ref, sigma_ref = solve_reference(field, J, f)
        amplitude = 10.0 ** rng.uniform(-4.0, 0.0)
        u = u_ref + amplitude * rng.standard_normal(u_ref.shape)
        sigma = sigma_ref + amplitude * rng.standard_normal(sigma_ref.shape)
        loss = float(fosls_functional(mesh, field, u, sigma, f))
        error_sq = _solution_error_squared(mesh, exact, u, sigma)
        rows.append({"perturbation": i, "amplitude": amplitude, "loss": loss, "error_sq": error_sq,
                     "ratio": loss / error_sq})
    frame = pd.DataFrame(rows)
    logger.info("loss / error^2 within [%.3e, %.3e]", frame["ratio"].min(), frame["ratio"].max())
    return frame
