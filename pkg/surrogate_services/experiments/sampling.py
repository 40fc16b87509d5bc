"""Parameter samples, binary64 finite element references and the MRE/MSE metrics."""

import logging

import numpy as np

from surrogate_services.discretization.mesh_fem import DiffusionField, solve_reference, solve_reference_energy
from surrogate_services.discretization.stable_op import Formulation
from surrogate_services.errors import UsageError

logger = logging.getLogger(__name__)

PARAMETER_BOX = (0.5, 1.5)
PARAMETER_DIM = 4


def sample_parameters(count: int, seed: int) -> np.ndarray:
    """``count`` i.i.d. uniform draws on [0.5, 1.5]^4, shape (count, 4)."""
    if count < 0:
        raise UsageError(f"sample count must be non-negative, got {count}")
    rng = np.random.default_rng(seed)
    return rng.uniform(PARAMETER_BOX[0], PARAMETER_BOX[1], size=(count, PARAMETER_DIM))


def reference_solutions(y: np.ndarray, J: int, formulation: "Formulation | str" = Formulation.fosls,
                        f: float = 1.0) -> list:
    """
    Binary64 references for every row of ``y``.

    Returns:
        One array per field, each of shape (len(y), n_field): [u, sigma] for the
        least-squares formulation, [u] for the energy formulation.
    """
    formulation = Formulation.parse(formulation)
    y = np.atleast_2d(y)
    if formulation is Formulation.fosls:
        pairs = [solve_reference(DiffusionField(tuple(row)), J, f) for row in y]
        return [np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])]
    return [np.stack([solve_reference_energy(DiffusionField(tuple(row)), J, f) for row in y])]


def _stacked(fields) -> np.ndarray:
    if isinstance(fields, np.ndarray):
        return np.atleast_2d(np.asarray(fields, dtype=np.float64))
    return np.concatenate([np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in fields], axis=-1)


def zero_reference_count(references) -> int:
    """Number of test references with zero norm; these are left out of the MRE."""
    r = _stacked(references)
    return int(np.sum(np.linalg.norm(r, axis=-1) == 0.0))


def compute_mre_mse(predictions, references) -> tuple[float, float]:
    """
    Mean relative l2 error and mean squared l2 error over the test set.

    Both arguments are nodal values per field (list of (N, n_field) arrays) or an
    already stacked (N, n) array; fields are concatenated per sample. Samples with
    a zero reference norm are left out of the MRE.
    """
    p = _stacked(predictions)
    r = _stacked(references)
    if p.shape != r.shape:
        raise UsageError(f"predictions {p.shape} and references {r.shape} differ in shape")
    if p.shape[0] == 0:
        raise UsageError("cannot compute metrics on an empty test set")
    diff = np.linalg.norm(p - r, axis=-1)
    ref = np.linalg.norm(r, axis=-1)
    keep = ref > 0.0
    if not np.all(keep):
        logger.warning("%d test reference(s) with zero norm left out of the MRE", int(np.sum(~keep)))
    mre = float(np.mean(diff[keep] / ref[keep])) if np.any(keep) else float("nan")
    mse = float(np.mean(diff ** 2))
    return mre, mse
