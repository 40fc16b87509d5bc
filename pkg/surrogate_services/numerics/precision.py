"""Working-precision abstraction over IEEE binary16/32/64.

Native arithmetic runs on numpy's float16/float32/float64 dtypes, which round
every elementary operation to nearest-even in the target format. An
independent bit-level emulation of the rounding step is kept next to it so the
native path can be checked against it.
"""

import logging
import operator
from enum import Enum

import numpy as np

from surrogate_services.errors import UsageError

logger = logging.getLogger(__name__)

# significand bits (hidden bit included) and maximal exponent per format
_FORMAT_PARAMETERS = {
    "f16": (11, 15),
    "f32": (24, 127),
    "f64": (53, 1023),
}

_DTYPES = {"f16": np.float16, "f32": np.float32, "f64": np.float64}

_OPERATORS = {
    "+": operator.add,
    "-": operator.sub,
    "−": operator.sub,
    "*": operator.mul,
    "×": operator.mul,
    "/": operator.truediv,
    "÷": operator.truediv,
}


class ScalarKind(Enum):
    """IEEE interchange format used as working precision of a run."""

    binary16 = "f16"
    binary32 = "f32"
    binary64 = "f64"

    @classmethod
    def parse(cls, name: "str | ScalarKind") -> "ScalarKind":
        """Accepts CLI names (f16/f32/f64), member names and numpy dtype names."""
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower()
        aliases = {"float16": "f16", "half": "f16", "float32": "f32", "single": "f32",
                   "float64": "f64", "double": "f64"}
        key = aliases.get(key, key)
        for kind in cls:
            if key in (kind.value, kind.name):
                return kind
        raise UsageError(f"unknown precision '{name}' (expected f16, f32 or f64)")

    @property
    def dtype(self) -> type:
        return _DTYPES[self.value]

    @property
    def precision(self) -> int:
        return _FORMAT_PARAMETERS[self.value][0]

    @property
    def emax(self) -> int:
        return _FORMAT_PARAMETERS[self.value][1]

    @property
    def emin(self) -> int:
        return 1 - self.emax

    @property
    def eps(self) -> float:
        """Machine epsilon, the spacing of the format just above 1."""
        return 2.0 ** (1 - self.precision)

    @property
    def max_finite(self) -> float:
        return (2.0 - 2.0 ** (1 - self.precision)) * 2.0 ** self.emax

    @property
    def min_subnormal(self) -> float:
        return 2.0 ** (self.emin - self.precision + 1)


def round_to(kind: ScalarKind, x) -> np.ndarray:
    """
    Rounds binary64 values into ``kind`` (round-to-nearest-even).

    Overflow yields signed infinity and tiny values become subnormals or
    signed zero, exactly as the hardware conversion does.

    Args:
        kind: Target format.
        x: Scalar or array of binary64 values.

    Returns:
        Array of dtype ``kind.dtype``.
    """
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        return np.asarray(x, dtype=np.float64).astype(kind.dtype)


def round_to_emulated(kind: ScalarKind, x) -> np.ndarray:
    """
    Software rounding of binary64 values into ``kind``, returned as binary64.

    The value is scaled by the quantum of its binade (or the subnormal quantum),
    rounded half-to-even with ``np.rint`` and scaled back. Values that round
    past the largest finite number become infinities.
    """
    x = np.asarray(x, dtype=np.float64)
    if kind is ScalarKind.binary64:
        return x.copy()
    magnitude = np.abs(x)
    finite = np.isfinite(magnitude)
    safe = np.where(finite, magnitude, 0.0)
    _, exponent = np.frexp(safe)
    # frexp gives |x| = m * 2**e with m in [0.5, 1), so the binade quantum is 2**(e - p)
    quantum_exp = np.maximum(exponent - kind.precision, kind.emin - kind.precision + 1)
    rounded = np.ldexp(np.rint(np.ldexp(safe, -quantum_exp)), quantum_exp)
    rounded = np.where(rounded > kind.max_finite, np.inf, rounded)
    result = np.copysign(rounded, x)
    return np.where(finite, result, x)


def arith(kind: ScalarKind, op: str, a, b) -> np.ndarray:
    """
    One elementary operation in the working precision.

    Args:
        kind: Working precision.
        op: One of ``+ - * /`` (the symbols − × ÷ are accepted too).
        a, b: Operands, rounded into ``kind`` first.

    Returns:
        ``round_to(kind, a op b)`` as an array of ``kind.dtype``.
    """
    if op not in _OPERATORS:
        raise UsageError(f"unsupported operation '{op}'")
    lhs = round_to(kind, a)
    rhs = round_to(kind, b)
    with np.errstate(over="ignore", under="ignore", invalid="ignore", divide="ignore"):
        return np.asarray(_OPERATORS[op](lhs, rhs), dtype=kind.dtype)


def ordered_sum(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """
    Left-to-right sum along ``axis`` with every partial sum rounded to the dtype of ``x``.

    ``np.add.accumulate`` stores each running total in the array dtype, so no
    wider accumulator can hide rounding errors.
    """
    x = np.asarray(x)
    if x.shape[axis] == 0:
        return np.zeros(np.delete(x.shape, axis % x.ndim), dtype=x.dtype)
    with np.errstate(over="ignore", invalid="ignore"):
        return np.take(np.add.accumulate(x, axis=axis), -1, axis=axis)


def tree_sum(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """
    Sum along ``axis`` by a fixed binary tree: neighbours (0,1), (2,3), ... are
    added level by level, odd lengths padded with one zero.

    Every addition is rounded to the dtype of ``x``; the pairing depends only on
    the length, so results are reproducible bit for bit.
    """
    x = np.moveaxis(np.asarray(x), axis, -1)
    if x.shape[-1] == 0:
        return np.zeros(x.shape[:-1], dtype=x.dtype)
    with np.errstate(over="ignore", invalid="ignore"):
        while x.shape[-1] > 1:
            if x.shape[-1] % 2:
                x = np.concatenate([x, np.zeros(x.shape[:-1] + (1,), dtype=x.dtype)], axis=-1)
            x = x[..., 0::2] + x[..., 1::2]
    return x[..., 0]


def is_finite(value) -> bool:
    return bool(np.all(np.isfinite(np.asarray(value, dtype=np.float64))))
