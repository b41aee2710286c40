"""Variational cost terms and gradients in latent coordinates.

The control variable z maps to a physical state either linearly through
the background factor (traditional) or through the trained decoder (the
learned variant, which adds the volume-change log-determinant term).
Observation terms cover single-time and windowed settings; the windowed
gradient is pulled back through the forecast with the RK4 adjoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .background import BackgroundCovariance
from .dynamics import IntegratorConfig, integrate, rk4_adjoint_step
from .errors import CostSingularError
from .observation import ObservationBatch, ObservationOperator, apply_operator, operator_jacobian
from .tinynn import MlpParams, input_jacobian_batch, mlp_forward, mlp_input_jacobian

# doublings applied by the determinant guard across this process
_det_guard_count = 0


def det_guard_count() -> int:
    return _det_guard_count


def obs_term_3d(x: np.ndarray, op: ObservationOperator, y: np.ndarray, r_std: float):
    """0.5 ||y - H(x)||^2 / r_std^2 and its gradient w.r.t. x."""
    if not r_std > 0:
        raise ValueError(f"r_std must be positive, got {r_std}")
    x = np.asarray(x, dtype=float)
    resid = np.asarray(y, dtype=float) - apply_operator(op, x)
    inv = 1.0 / (r_std * r_std)
    value = 0.5 * float(resid @ resid) * inv
    grad = -(operator_jacobian(op, x).T @ resid) * inv
    return value, grad


def obs_term_4d(x: np.ndarray, op: ObservationOperator, batch: ObservationBatch,
                model, step_size: float):
    """Windowed observation misfit summed over the batch times.

    The forecast uses the prediction model from x; the gradient is
    accumulated by one adjoint sweep from the last window time back to 0.
    """
    if not step_size > 0:
        raise ValueError(f"step_size must be positive, got {step_size}")
    x = np.asarray(x, dtype=float)
    times = batch.time_indices
    last = max(times)
    traj = integrate(model.rhs, x, IntegratorConfig(step_size, last))
    at_time = dict(zip(times, batch.values))
    inv = 1.0 / (batch.r_std * batch.r_std)

    value = 0.0
    grad = np.zeros_like(x)
    for t in range(last, -1, -1):
        if t in at_time:
            resid = at_time[t] - apply_operator(op, traj[t])
            value += 0.5 * float(resid @ resid) * inv
            grad += -(operator_jacobian(op, traj[t]).T @ resid) * inv
        if t > 0:
            grad = rk4_adjoint_step(model.rhs, model.jacobian, traj[t - 1], step_size, grad)
    return value, grad


def bg_term_traditional(z: np.ndarray):
    """Latent-space quadratic prior 0.5 ||z||^2."""
    z = np.asarray(z, dtype=float)
    return 0.5 * float(z @ z), z.copy()


def _gram_half_logdet(decoder: MlpParams, zs: np.ndarray, epsilon: float) -> np.ndarray:
    """0.5 log det(J^T J + eps I) at each row of zs, via batched Cholesky."""
    global _det_guard_count
    jac = input_jacobian_batch(decoder, zs)
    gram = np.swapaxes(jac, -1, -2) @ jac
    if not np.all(np.isfinite(gram)):
        raise CostSingularError("non-finite Jacobian Gram matrix")
    eye = np.eye(gram.shape[-1])
    eps = epsilon
    for _ in range(60):
        try:
            chol = np.linalg.cholesky(gram + eps * eye)
        except np.linalg.LinAlgError:
            eps *= 2.0
            _det_guard_count += 1
            continue
        return np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)
    raise CostSingularError(f"Gram matrix stayed non-positive-definite up to eps={eps}")


def det_term(z: np.ndarray, decoder: MlpParams, epsilon: float, fd_step: float = 1e-5):
    """Log-determinant volume term and its central-difference gradient."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    z = np.asarray(z, dtype=float)
    k = z.size
    points = np.tile(z, (2 * k + 1, 1))
    for j in range(k):
        points[1 + 2 * j, j] += fd_step
        points[2 + 2 * j, j] -= fd_step
    vals = _gram_half_logdet(decoder, points, epsilon)
    if not np.all(np.isfinite(vals)):
        raise CostSingularError("non-finite log-determinant")
    grad = (vals[1::2] - vals[2::2]) / (2.0 * fd_step)
    return float(vals[0]), grad


def bg_term_vae(z: np.ndarray, decoder: MlpParams, epsilon: float):
    """Learned background term: latent quadratic plus the volume term.

    Returns (value, gradient, (reg, det)) so ablations can expose the
    per-term breakdown.
    """
    reg_v, reg_g = bg_term_traditional(z)
    det_v, det_g = det_term(z, decoder, epsilon)
    return reg_v + det_v, reg_g + det_g, (reg_v, det_v)


@dataclass(eq=False)
class CostSpec:
    """Everything one cost evaluation needs.

    variant "traditional" maps x = U z + x_b and always uses the
    quadratic prior; variant "vae" maps x = D(z) + x_b and honors the
    use_reg / use_det ablation switches.  A window with more than one
    time needs the prediction model and its step size.
    """

    variant: str
    x_b: np.ndarray
    operator: ObservationOperator
    batch: ObservationBatch
    background: BackgroundCovariance | None = None
    decoder: MlpParams | None = None
    epsilon: float = 1e-2
    use_reg: bool = True
    use_det: bool = True
    model: object = None
    step_size: float | None = None

    def __post_init__(self):
        self.x_b = np.asarray(self.x_b, dtype=float)
        if self.variant not in ("traditional", "vae"):
            raise ValueError(f"unknown cost variant {self.variant!r}")
        if self.variant == "vae":
            if self.decoder is None:
                raise ValueError("vae variant needs a decoder")
            if self.use_det and not self.epsilon > 0:
                raise ValueError("vae variant needs epsilon > 0")
            if self.decoder.A3.shape[0] != self.x_b.size:
                raise ValueError("decoder output dim does not match state dim")
        else:
            if self.background is None:
                raise ValueError("traditional variant needs a background covariance")
            if self.background.dim != self.x_b.size:
                raise ValueError("background dim does not match state dim")
        if self.operator.mask.size != self.x_b.size:
            raise ValueError("operator mask does not match state dim")
        for y in self.batch.values:
            if y.size != self.operator.n_observed:
                raise ValueError("observation dim does not match operator mask")
        if self.is_windowed and (self.model is None or self.step_size is None):
            raise ValueError("a multi-time window needs the prediction model and step size")

    @property
    def window(self) -> tuple:
        return self.batch.time_indices

    @property
    def is_windowed(self) -> bool:
        return len(self.batch.time_indices) > 1 or (
            len(self.batch.time_indices) == 1 and self.batch.time_indices[0] != 0
        )

    @property
    def control_dim(self) -> int:
        if self.variant == "vae":
            return self.decoder.A1.shape[1]
        return self.background.dim


@dataclass(frozen=True)
class CostEval:
    total: float
    obs_term: float
    reg_term: float
    det_term: float
    gradient: np.ndarray


def _obs_value_grad(x: np.ndarray, spec: CostSpec):
    if spec.batch.n_times == 0:
        return 0.0, np.zeros_like(x)
    if not spec.is_windowed:
        return obs_term_3d(x, spec.operator, spec.batch.values[0], spec.batch.r_std)
    return obs_term_4d(x, spec.operator, spec.batch, spec.model, spec.step_size)


def total_cost(z: np.ndarray, spec: CostSpec) -> CostEval:
    """Evaluate the configured cost and its gradient w.r.t. z."""
    z = np.asarray(z, dtype=float)
    if z.shape != (spec.control_dim,):
        raise ValueError(f"control vector must have dim {spec.control_dim}, got shape {z.shape}")
    reg_v = det_v = 0.0
    if spec.variant == "vae":
        x = mlp_forward(spec.decoder, z) + spec.x_b
        obs_v, g_x = _obs_value_grad(x, spec)
        grad = mlp_input_jacobian(spec.decoder, z).T @ g_x
        if spec.use_reg:
            reg_v, g_reg = bg_term_traditional(z)
            grad = grad + g_reg
        if spec.use_det:
            det_v, g_det = det_term(z, spec.decoder, spec.epsilon)
            grad = grad + g_det
    else:
        x = spec.background.U @ z + spec.x_b
        obs_v, g_x = _obs_value_grad(x, spec)
        grad = spec.background.U.T @ g_x
        reg_v, g_reg = bg_term_traditional(z)
        grad = grad + g_reg
    return CostEval(obs_v + reg_v + det_v, obs_v, reg_v, det_v, grad)


def make_objective(spec: CostSpec):
    """Callable z -> (value, gradient) for the minimizer."""

    def objective(z):
        ev = total_cost(z, spec)
        return ev.total, ev.gradient

    return objective
