"""
Training objective: network output -> discretized loss for one preconditioning mode.

    none            network emits nodal values, element blocks of A_y act on them
    frame_unstable  network emits frame coefficients, v = H w, element blocks on v
    frame_stable    network emits frame coefficients, samples D w, pointwise C_y

The training loss is the mean of the per-parameter losses, evaluated in the
working precision of theta. For Gauss-Newton the least-squares loss is written
as ||r||^2 with r = sqrt(w_q / B) (sigma' + f, sigma/a - u') over all samples.
"""

import logging
from enum import Enum
from typing import Optional

import numpy as np

from surrogate_services.discretization import frames as fr
from surrogate_services.discretization import stable_op as so
from surrogate_services.discretization.mesh_fem import DiffusionField, assemble_energy, build_mesh, fosls_functional
from surrogate_services.errors import UsageError
from surrogate_services.networks.resnet import CoefficientNetwork
from surrogate_services.numerics.precision import is_finite, ordered_sum

logger = logging.getLogger(__name__)


class Preconditioning(str, Enum):
    none = "none"
    frame_unstable = "frame_unstable"
    frame_stable = "frame_stable"

    @property
    def uses_frames(self) -> bool:
        return self is not Preconditioning.none


class SurrogateObjective:
    """
    Mean loss over a fixed set of parameter vectors ``y`` (shape (K, 4)).

    ``batch`` arguments select rows of ``y`` (an index array); ``None`` means all.
    """

    def __init__(self, network: CoefficientNetwork, preconditioning: "Preconditioning | str",
                 y: np.ndarray, f: float = 1.0):
        self.network = network
        self.spec = network.spec
        self.preconditioning = Preconditioning(preconditioning)
        self.formulation = self.spec.formulation
        self.J = self.spec.J
        self.f = float(f)
        self.y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        expected = "nodal" if self.preconditioning is Preconditioning.none else "frame"
        if self.spec.output != expected:
            raise UsageError(f"preconditioning {self.preconditioning.value} needs {expected} network output, "
                             f"got {self.spec.output}")
        self.frames = so.frames_for(self.formulation, self.J, normalized=True)
        self.events: list = []
        self._forms = {}

    # --- per-batch discretization data ---

    def _rows(self, batch) -> np.ndarray:
        return self.y if batch is None else self.y[np.asarray(batch)]

    def _data(self, batch) -> dict:
        key = None if batch is None else tuple(np.asarray(batch).tolist())
        if key not in self._forms:
            y = self._rows(batch)
            data = {}
            if self.preconditioning is Preconditioning.frame_stable:
                data["op"] = so.StableOperator(self.J, self.formulation)
                data["form"] = so.FormCy.build(data["op"], y)
            else:
                normalized = self.preconditioning is Preconditioning.frame_unstable
                data["nodal"] = so.NodalForm(self.J, self.formulation, y, normalized=normalized)
            if self.formulation is so.Formulation.fosls:
                # single-level sampler of the finest coefficients, for the residual form
                if self.preconditioning is Preconditioning.frame_stable:
                    data["sampler"], data["sampler_form"] = data["op"], data["form"]
                else:
                    sampler = so.StableOperator(self.J, self.formulation, coarsest=self.J,
                                                normalized=self.preconditioning.uses_frames)
                    data["sampler"], data["sampler_form"] = sampler, so.FormCy.build(sampler, y)
            self._forms[key] = data
        return self._forms[key]

    def _record(self, message: str):
        self.events.append(message)
        logger.warning(message)

    # --- losses ---

    def per_sample(self, output: np.ndarray, batch=None, with_grad: bool = False):
        """Loss of each row of the network output (and d loss / d output)."""
        data = self._data(batch)
        stable = self.preconditioning is Preconditioning.frame_stable
        frames = self.frames if self.preconditioning is Preconditioning.frame_unstable else None
        if self.formulation is so.Formulation.fosls:
            if stable:
                return so.fosls_loss_stable(data["op"], data["form"], output, self.f, with_grad)
            return so.fosls_loss_unstable(frames, data["nodal"], output, self.f, with_grad)
        if stable:
            return so.energy_loss_stable(data["op"], data["form"], output, self.f, with_grad)
        return so.energy_loss_unstable(frames, data["nodal"], output, self.f, with_grad)

    def loss(self, theta: np.ndarray, batch=None) -> float:
        output = self.network.forward(theta, self._rows(batch))
        losses = self.per_sample(output, batch)
        value = float(ordered_sum(losses) * theta.dtype.type(1.0 / losses.shape[0]))
        if not np.isfinite(value):
            self._record(f"non-finite training loss {value}")
        return value

    def loss_and_grad(self, theta: np.ndarray, batch=None) -> tuple[float, np.ndarray]:
        y = self._rows(batch)
        output, tape = self.network.forward(theta, y, keep=True)
        losses, g_out = self.per_sample(output, batch, with_grad=True)
        scale = theta.dtype.type(1.0 / losses.shape[0])
        with np.errstate(over="ignore", invalid="ignore"):
            value = float(ordered_sum(losses) * scale)
            grad = self.network.backward(theta, y, g_out * scale, tape=tape)
        if not np.isfinite(value):
            self._record(f"non-finite training loss {value}")
        elif not is_finite(grad):
            self._record("non-finite gradient entries")
        return value, grad

    # --- residual form ---

    def _check_residual_form(self):
        if self.formulation is not so.Formulation.fosls:
            raise UsageError("the residual form (Gauss-Newton) is only available for the least-squares formulation")

    def _to_sampler(self, output: np.ndarray) -> np.ndarray:
        if self.preconditioning is not Preconditioning.frame_unstable:
            return output
        u, sigma = np.split(output, [self.frames[0].total_size], axis=-1)
        return np.concatenate([fr.bpx_synthesize(self.frames[0], u), fr.bpx_synthesize(self.frames[1], sigma)],
                              axis=-1)

    def _from_sampler(self, g: np.ndarray) -> np.ndarray:
        if self.preconditioning is not Preconditioning.frame_unstable:
            return g
        u, sigma = np.split(g, [self.frames[0].finest_size], axis=-1)
        return np.concatenate([fr.bpx_adjoint(self.frames[0], u), fr.bpx_adjoint(self.frames[1], sigma)], axis=-1)

    def _residual_scale(self, theta: np.ndarray, batch) -> np.generic:
        return theta.dtype.type(np.sqrt(1.0 / self._rows(batch).shape[0]))

    def residuals(self, theta: np.ndarray, batch=None) -> np.ndarray:
        self._check_residual_form()
        data = self._data(batch)
        output = self.network.forward(theta, self._rows(batch))
        r = so.fosls_residuals(data["sampler"], data["sampler_form"], self._to_sampler(output), self.f)
        return (r * self._residual_scale(theta, batch)).reshape(-1)

    def jvp(self, theta: np.ndarray, batch, direction: np.ndarray) -> np.ndarray:
        self._check_residual_form()
        data = self._data(batch)
        _, tangent = self.network.jvp(theta, self._rows(batch), direction)
        dr = so.residual_jvp(data["sampler"], data["sampler_form"], self._to_sampler(tangent))
        return (dr * self._residual_scale(theta, batch)).reshape(-1)

    def vjp(self, theta: np.ndarray, batch, cotangent: np.ndarray) -> np.ndarray:
        self._check_residual_form()
        data = self._data(batch)
        y = self._rows(batch)
        sampler = data["sampler"]
        dr = np.asarray(cotangent, dtype=theta.dtype).reshape(y.shape[0], 2, sampler.n_points)
        g = so.residual_vjp(sampler, data["sampler_form"], dr * self._residual_scale(theta, batch))
        return self.network.backward(theta, y, self._from_sampler(g))

    # --- evaluation in binary64 ---

    def predict_nodal(self, theta: np.ndarray, y: np.ndarray) -> list:
        """Finest-level point values per field (u interior[, sigma]) in binary64."""
        output = np.asarray(self.network.forward(theta, np.atleast_2d(y)), dtype=np.float64)
        if self.preconditioning is Preconditioning.none:
            return np.split(output, np.cumsum([f.finest_size for f in self.frames])[:-1], axis=-1)
        parts = np.split(output, np.cumsum([f.total_size for f in self.frames])[:-1], axis=-1)
        return [fr.to_nodal(frame, fr.bpx_synthesize(frame, w)) for frame, w in zip(self.frames, parts)]

    def test_loss(self, theta: np.ndarray, y: np.ndarray, nodal: Optional[list] = None) -> float:
        """
        Mean binary64 functional of the predicted fields: the least-squares functional,
        or the energy 1/2 u^T A u - l^T u for the energy formulation.
        """
        nodal = self.predict_nodal(theta, y) if nodal is None else nodal
        mesh = build_mesh(self.J)
        values = []
        for k, params in enumerate(np.atleast_2d(y)):
            field = DiffusionField(tuple(params))
            if self.formulation is so.Formulation.fosls:
                values.append(float(fosls_functional(mesh, field, nodal[0][k], nodal[1][k], self.f)))
            else:
                u = nodal[0][k]
                A = assemble_energy(mesh, field)
                values.append(0.5 * float(u @ (A @ u)) - self.f * mesh.h * float(np.sum(u)))
        return float(np.mean(values))

