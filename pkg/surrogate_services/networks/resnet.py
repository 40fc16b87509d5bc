"""
Coefficient networks y -> stacked frame coefficients, written out in numpy.

Every network is a set of chains. A chain starts with the input layer
Lambda_0(y) = silu(W0 y + b0) and applies a sequence of ResBlocks
z -> z + A silu(W z + b) [+ c] and, for the frame representation, prolongation
layers z -> P_i z. Each chain writes one contiguous slice of the output.

Forward, reverse (``backward``) and forward mode (``jvp``) derivatives are
exact; all arithmetic runs in the dtype of theta. Batches are row-stacked:
``y`` has shape (batch, 4), outputs (batch, out_dim).
"""

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import expit

from surrogate_services.discretization import frames as fr
from surrogate_services.discretization.stable_op import frames_for
from surrogate_services.errors import UsageError
from surrogate_services.networks.schemas import ArchitectureKind, ArchitectureSpec, ParamEntry

logger = logging.getLogger(__name__)


def silu(x: np.ndarray) -> np.ndarray:
    """x * sigmoid(x), returned in the dtype of x."""
    x = np.asarray(x)
    return (x * expit(x)).astype(x.dtype, copy=False)


def silu_prime(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    s = expit(x)
    return (s * (1 + x * (1 - s))).astype(x.dtype, copy=False)


def xavier_init(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Gaussian entries with mean 0 and std sqrt(2 / (rows + cols)), binary64."""
    return rng.normal(0.0, np.sqrt(2.0 / (rows + cols)), size=(rows, cols))


class ParamLayout:
    """Index map between the flat parameter vector and named tensors."""

    def __init__(self):
        self.entries: list[ParamEntry] = []
        self.size = 0

    def add(self, name: str, *shape: int) -> str:
        self.entries.append(ParamEntry(name=name, offset=self.size, shape=list(shape)))
        self.size += int(np.prod(shape))
        return name

    def unflatten(self, theta: np.ndarray) -> dict:
        """Named views into ``theta``."""
        if theta.shape != (self.size,):
            raise UsageError(f"parameter vector has shape {theta.shape}, expected ({self.size},)")
        return {e.name: theta[e.offset:e.offset + int(np.prod(e.shape))].reshape(e.shape)
                for e in self.entries}

    def flatten(self, tensors: dict, dtype=None) -> np.ndarray:
        first = next(iter(tensors.values()))
        out = np.empty(self.size, dtype=dtype or first.dtype)
        for e in self.entries:
            out[e.offset:e.offset + int(np.prod(e.shape))] = np.asarray(tensors[e.name]).reshape(-1)
        return out


@dataclass(frozen=True)
class _Block:
    prefix: str
    width: int
    rank: int


@dataclass(frozen=True)
class _Prolong:
    frame: fr.FrameDescriptor
    level: int


@dataclass(frozen=True)
class _Chain:
    prefix: str
    width: int          # width of the input layer
    ops: tuple
    out_offset: int
    out_size: int


class CoefficientNetwork:
    """Network for one ``ArchitectureSpec``; parameters live outside in a flat vector."""

    def __init__(self, spec: ArchitectureSpec):
        self.spec = spec
        self.frames = frames_for(spec.formulation, spec.J)
        if spec.output == "frame":
            self.field_sizes = tuple(frame.total_size for frame in self.frames)
        else:
            self.field_sizes = tuple(frame.finest_size for frame in self.frames)
        self.out_dim = sum(self.field_sizes)
        self.layout = ParamLayout()
        self.chains = tuple(self._build_chains())

    # --- structure ---

    def _input_layer(self, prefix: str, width: int):
        self.layout.add(f"{prefix}.W0", width, self.spec.input_dim)
        self.layout.add(f"{prefix}.b0", width)

    def _blocks(self, prefix: str, width: int, count: int) -> list:
        rank = min(self.spec.rank, width)
        ops = []
        for i in range(count):
            name = f"{prefix}.block{i}"
            self.layout.add(f"{name}.A", width, rank)
            self.layout.add(f"{name}.W", rank, width)
            self.layout.add(f"{name}.b", rank)
            if self.spec.output_bias:
                self.layout.add(f"{name}.c", width)
            ops.append(_Block(prefix=name, width=width, rank=rank))
        return ops

    def _build_chains(self):
        spec = self.spec
        if spec.kind is ArchitectureKind.full:
            self._input_layer("net", self.out_dim)
            yield _Chain("net", self.out_dim, tuple(self._blocks("net", self.out_dim, spec.blocks)),
                         0, self.out_dim)
            return
        field_offset = 0
        for f, frame in enumerate(self.frames):
            if spec.output == "nodal":
                prefix = f"field{f}"
                self._input_layer(prefix, frame.finest_size)
                yield _Chain(prefix, frame.finest_size,
                             tuple(self._blocks(prefix, frame.finest_size, spec.subnet_blocks)),
                             field_offset, frame.finest_size)
                field_offset += frame.finest_size
                continue
            for j in range(1, spec.J + 1):
                prefix = f"field{f}.level{j}"
                out_offset = field_offset + frame.offsets[j - 1]
                out_size = frame.level_sizes[j - 1]
                if spec.kind is ArchitectureKind.separate_resnet:
                    self._input_layer(prefix, out_size)
                    yield _Chain(prefix, out_size, tuple(self._blocks(prefix, out_size, spec.subnet_blocks)),
                                 out_offset, out_size)
                    continue
                self._input_layer(prefix, frame.level_sizes[0])
                ops = []
                for i in range(1, j + 1):
                    if i >= 2:
                        ops.append(_Prolong(frame=frame, level=i))
                    ops += self._blocks(f"{prefix}.stage{i}", frame.level_sizes[i - 1], spec.level_blocks)
                yield _Chain(prefix, frame.level_sizes[0], tuple(ops), out_offset, out_size)
            field_offset += frame.total_size

    @property
    def param_count(self) -> int:
        return self.layout.size

    def init_params(self, seed: int, dtype=np.float64) -> np.ndarray:
        """Xavier Gaussian matrices, zero biases, drawn in binary64 and rounded once."""
        rng = np.random.default_rng(seed)
        theta = np.zeros(self.layout.size)
        for e in self.layout.entries:
            if len(e.shape) == 2:
                theta[e.offset:e.offset + e.shape[0] * e.shape[1]] = xavier_init(e.shape[0], e.shape[1], rng).reshape(-1)
        return theta.astype(dtype)

    def _check(self, theta: np.ndarray, y: np.ndarray) -> tuple[dict, np.ndarray, bool]:
        theta = np.asarray(theta)
        y = np.asarray(y)
        single = y.ndim == 1
        y = y[None, :] if single else y
        if y.ndim != 2 or y.shape[1] != self.spec.input_dim:
            raise UsageError(f"inputs must have shape (batch, {self.spec.input_dim}), got {y.shape}")
        return self.layout.unflatten(theta), y.astype(theta.dtype), single

    # --- evaluation ---

    def forward(self, theta: np.ndarray, y: np.ndarray, keep: bool = False):
        """
        Evaluates the network.

        Args:
            theta: Flat parameters; their dtype is the working precision.
            y: Inputs (4,) or (batch, 4).
            keep: Also return the intermediates needed by ``backward``.
        """
        theta = np.asarray(theta)
        p, y, single = self._check(theta, y)
        out = np.zeros((y.shape[0], self.out_dim), dtype=theta.dtype)
        tape = []
        with np.errstate(over="ignore", invalid="ignore"):
            for chain in self.chains:
                pre0 = y @ p[f"{chain.prefix}.W0"].T + p[f"{chain.prefix}.b0"]
                z = silu(pre0)
                records = []
                for op in chain.ops:
                    if isinstance(op, _Prolong):
                        records.append((z, None))
                        z = fr.prolongate(op.frame, op.level, z)
                        continue
                    pre = z @ p[f"{op.prefix}.W"].T + p[f"{op.prefix}.b"]
                    records.append((z, pre))
                    z = z + silu(pre) @ p[f"{op.prefix}.A"].T
                    if self.spec.output_bias:
                        z = z + p[f"{op.prefix}.c"]
                out[:, chain.out_offset:chain.out_offset + chain.out_size] = z
                tape.append((pre0, records))
        result = out[0] if single else out
        return (result, (y, tape)) if keep else result

    def backward(self, theta: np.ndarray, y: np.ndarray, cotangent: np.ndarray, tape=None) -> np.ndarray:
        """Gradient of sum_batch <output, cotangent> with respect to theta."""
        theta = np.asarray(theta)
        if tape is None:
            _, tape = self.forward(theta, y, keep=True)
        p = self.layout.unflatten(theta)
        inputs, chain_tapes = tape
        cot = np.asarray(cotangent, dtype=theta.dtype)
        cot = cot[None, :] if cot.ndim == 1 else cot
        if cot.shape != (inputs.shape[0], self.out_dim):
            raise UsageError(f"cotangent has shape {cot.shape}, expected ({inputs.shape[0]}, {self.out_dim})")
        grads = {e.name: np.zeros(e.shape, dtype=theta.dtype) for e in self.layout.entries}
        with np.errstate(over="ignore", invalid="ignore"):
            for chain, (pre0, records) in zip(self.chains, chain_tapes):
                g = cot[:, chain.out_offset:chain.out_offset + chain.out_size]
                for op, (z, pre) in zip(chain.ops[::-1], records[::-1]):
                    if isinstance(op, _Prolong):
                        g = fr.restrict(op.frame, op.level, g)
                        continue
                    act = silu(pre)
                    if self.spec.output_bias:
                        grads[f"{op.prefix}.c"] += g.sum(axis=0)
                    grads[f"{op.prefix}.A"] += g.T @ act
                    d_pre = (g @ p[f"{op.prefix}.A"]) * silu_prime(pre)
                    grads[f"{op.prefix}.W"] += d_pre.T @ z
                    grads[f"{op.prefix}.b"] += d_pre.sum(axis=0)
                    g = g + d_pre @ p[f"{op.prefix}.W"]
                d_pre0 = g * silu_prime(pre0)
                grads[f"{chain.prefix}.W0"] += d_pre0.T @ inputs
                grads[f"{chain.prefix}.b0"] += d_pre0.sum(axis=0)
        return self.layout.flatten(grads, dtype=theta.dtype)

    def jvp(self, theta: np.ndarray, y: np.ndarray, direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Output and its directional derivative along ``direction`` (forward mode)."""
        theta = np.asarray(theta)
        p, y, single = self._check(theta, y)
        direction = np.asarray(direction, dtype=theta.dtype)
        d = self.layout.unflatten(direction)
        out = np.zeros((y.shape[0], self.out_dim), dtype=theta.dtype)
        tangent = np.zeros_like(out)
        with np.errstate(over="ignore", invalid="ignore"):
            for chain in self.chains:
                pre = y @ p[f"{chain.prefix}.W0"].T + p[f"{chain.prefix}.b0"]
                d_pre = y @ d[f"{chain.prefix}.W0"].T + d[f"{chain.prefix}.b0"]
                z, dz = silu(pre), silu_prime(pre) * d_pre
                for op in chain.ops:
                    if isinstance(op, _Prolong):
                        z = fr.prolongate(op.frame, op.level, z)
                        dz = fr.prolongate(op.frame, op.level, dz)
                        continue
                    W, A = p[f"{op.prefix}.W"], p[f"{op.prefix}.A"]
                    pre = z @ W.T + p[f"{op.prefix}.b"]
                    d_pre = dz @ W.T + z @ d[f"{op.prefix}.W"].T + d[f"{op.prefix}.b"]
                    act = silu(pre)
                    d_act = silu_prime(pre) * d_pre
                    z, dz = z + act @ A.T, dz + d_act @ A.T + act @ d[f"{op.prefix}.A"].T
                    if self.spec.output_bias:
                        z, dz = z + p[f"{op.prefix}.c"], dz + d[f"{op.prefix}.c"]
                window = slice(chain.out_offset, chain.out_offset + chain.out_size)
                out[:, window] = z
                tangent[:, window] = dz
        return (out[0], tangent[0]) if single else (out, tangent)

    def zero_residual_branches(self, theta: np.ndarray) -> np.ndarray:
        """Copy of theta with every ResBlock A (and c) set to zero."""
        theta = np.array(theta, copy=True)
        for e in self.layout.entries:
            if e.name.endswith(".A") or e.name.endswith(".c"):
                theta[e.offset:e.offset + int(np.prod(e.shape))] = 0
        return theta


@lru_cache(maxsize=32)
def build_network(spec: ArchitectureSpec) -> CoefficientNetwork:
    network = CoefficientNetwork(spec)
    logger.debug("built %s network J=%d with %d parameters", spec.kind.value, spec.J, network.param_count)
    return network


def forward(arch: ArchitectureSpec, theta: np.ndarray, y: np.ndarray) -> np.ndarray:
    return build_network(arch).forward(theta, y)


def backward(arch: ArchitectureSpec, theta: np.ndarray, y: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    return build_network(arch).backward(theta, y, cotangent)


def jvp(arch: ArchitectureSpec, theta: np.ndarray, y: np.ndarray, direction: np.ndarray) -> np.ndarray:
    return build_network(arch).jvp(theta, y, direction)[1]


def param_count(arch: ArchitectureSpec) -> int:
    return build_network(arch).param_count
