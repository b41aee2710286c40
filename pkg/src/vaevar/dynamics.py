"""Lorenz 63/96 dynamics with RK4 integration and a hand-coded adjoint.

Right-hand sides broadcast over a leading batch axis, so a whole set of
states can be integrated in one sweep.  Jacobians and the adjoint step
operate on single states; they back the 4DVar gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import IntegrationDivergedError


@dataclass(frozen=True)
class Lorenz63Params:
    """Parameters of the three-variable convection system."""

    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.sigma, self.rho, self.beta)):
            raise ValueError("Lorenz 63 parameters must be finite")
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")

    @property
    def dim(self) -> int:
        return 3

    def rhs(self, x: np.ndarray) -> np.ndarray:
        return rhs_lorenz63(self, x)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        return jacobian_lorenz63(self, x)


@dataclass(eq=False)
class Lorenz96Params:
    """Cyclic Lorenz 96 system with one forcing value per equation."""

    dim: int
    forcing: np.ndarray

    def __post_init__(self):
        if self.dim < 4:
            raise ValueError(f"Lorenz 96 needs dim >= 4, got {self.dim}")
        f = np.asarray(self.forcing, dtype=float)
        if f.ndim == 0:
            f = np.full(self.dim, float(f))
        if f.shape != (self.dim,):
            raise ValueError(f"forcing shape {f.shape} does not match dim {self.dim}")
        if not np.all(np.isfinite(f)):
            raise ValueError("forcing must be finite")
        self.forcing = f

    @classmethod
    def uniform(cls, dim: int, forcing: float) -> "Lorenz96Params":
        return cls(dim, np.full(dim, float(forcing)))

    def with_first_forcing(self, value: float) -> "Lorenz96Params":
        """Copy with the first equation's forcing replaced (the perturbable one)."""
        f = self.forcing.copy()
        f[0] = float(value)
        return Lorenz96Params(self.dim, f)

    def rhs(self, x: np.ndarray) -> np.ndarray:
        return rhs_lorenz96(self, x)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        return jacobian_lorenz96(self, x)


@dataclass(frozen=True)
class IntegratorConfig:
    """Fixed-step RK4 settings: step size and number of steps."""

    step_size: float = 0.01
    n_steps: int = 10

    def __post_init__(self):
        if not (self.step_size > 0 and math.isfinite(self.step_size)):
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.n_steps < 0:
            raise ValueError(f"n_steps must be >= 0, got {self.n_steps}")


def rhs_lorenz63(p: Lorenz63Params, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 3:
        raise ValueError(f"Lorenz 63 state must have dim 3, got {x.shape[-1]}")
    a, b, c = x[..., 0], x[..., 1], x[..., 2]
    return np.stack(
        [p.sigma * (b - a), a * (p.rho - c) - b, a * b - p.beta * c], axis=-1
    )


def jacobian_lorenz63(p: Lorenz63Params, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (3,):
        raise ValueError(f"expected a single dim-3 state, got shape {x.shape}")
    a, b, c = x
    return np.array(
        [
            [-p.sigma, p.sigma, 0.0],
            [p.rho - c, -1.0, -a],
            [b, a, -p.beta],
        ]
    )


def rhs_lorenz96(p: Lorenz96Params, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != p.dim:
        raise ValueError(f"state dim {x.shape[-1]} does not match system dim {p.dim}")
    xp1 = np.roll(x, -1, axis=-1)
    xm1 = np.roll(x, 1, axis=-1)
    xm2 = np.roll(x, 2, axis=-1)
    return (xp1 - xm2) * xm1 - x + p.forcing


def jacobian_lorenz96(p: Lorenz96Params, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (p.dim,):
        raise ValueError(f"expected a single dim-{p.dim} state, got shape {x.shape}")
    d = p.dim
    jac = -np.eye(d)
    i = np.arange(d)
    # stencil indices are pairwise distinct for d >= 4
    jac[i, (i + 1) % d] += x[(i - 1) % d]
    jac[i, (i - 2) % d] += -x[(i - 1) % d]
    jac[i, (i - 1) % d] += x[(i + 1) % d] - x[(i - 2) % d]
    return jac


def rk4_step(rhs, x: np.ndarray, h: float, check: bool = True) -> np.ndarray:
    """One classical four-stage Runge-Kutta step."""
    k1 = rhs(x)
    k2 = rhs(x + 0.5 * h * k1)
    k3 = rhs(x + 0.5 * h * k2)
    k4 = rhs(x + h * k3)
    out = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if check and not np.all(np.isfinite(out)):
        raise IntegrationDivergedError(
            f"non-finite state after RK4 step (h={h})"
        )
    return out


def integrate(rhs, x0: np.ndarray, cfg: IntegratorConfig, check: bool = True) -> np.ndarray:
    """Integrate with fixed-step RK4, returning all n_steps+1 states.

    `x0` may carry leading batch axes; the trajectory is stacked along a
    new first axis.  Composition holds bitwise: integrating a+b steps
    equals integrating a steps and continuing for b more.
    """
    x = np.asarray(x0, dtype=float)
    traj = np.empty((cfg.n_steps + 1,) + x.shape)
    traj[0] = x
    for k in range(cfg.n_steps):
        x = rk4_step(rhs, x, cfg.step_size, check=check)
        traj[k + 1] = x
    return traj


def propagate(rhs, x0: np.ndarray, cfg: IntegratorConfig, check: bool = True) -> np.ndarray:
    """Final state of `integrate` without keeping the trajectory."""
    x = np.asarray(x0, dtype=float)
    for _ in range(cfg.n_steps):
        x = rk4_step(rhs, x, cfg.step_size, check=check)
    return x


def rk4_adjoint_step(rhs, rhs_jacobian, x: np.ndarray, h: float, grad_out: np.ndarray) -> np.ndarray:
    """Pull a gradient back through one RK4 step: returns (d step/d x)^T v.

    Recomputes the four stage states, then runs the reverse sweep with the
    analytic RHS Jacobian at each stage.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(grad_out, dtype=float)
    k1 = rhs(x)
    x2 = x + 0.5 * h * k1
    k2 = rhs(x2)
    x3 = x + 0.5 * h * k2
    x4 = x + h * rhs(x3)

    g_x = v.copy()
    g_k1 = (h / 6.0) * v
    g_k2 = (h / 3.0) * v
    g_k3 = (h / 3.0) * v
    g_k4 = (h / 6.0) * v

    g_x4 = rhs_jacobian(x4).T @ g_k4
    g_x += g_x4
    g_k3 += h * g_x4

    g_x3 = rhs_jacobian(x3).T @ g_k3
    g_x += g_x3
    g_k2 += 0.5 * h * g_x3

    g_x2 = rhs_jacobian(x2).T @ g_k2
    g_x += g_x2
    g_k1 += 0.5 * h * g_x2

    g_x += rhs_jacobian(x).T @ g_k1
    return g_x
