"""The three assimilation procedures the harness compares.

Both variational routes minimize a latent-space cost from z = 0 and map
the minimizer back to physical space; the naive substitute just copies
observed values into the background state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cost import CostEval, CostSpec, total_cost
from .errors import CostSingularError, IntegrationDivergedError, UnsupportedOperatorError
from .observation import ObservationOperator
from .solver import LbfgsConfig, MinimizeReport, minimize
from .tinynn import mlp_forward


@dataclass(eq=False)
class AssimilationResult:
    x_a: np.ndarray
    z_star: np.ndarray | None = None
    cost: CostEval | None = None
    report: MinimizeReport | None = None


def _safe_objective(spec: CostSpec):
    """Cost callable that reports +inf (instead of raising) on numeric blowups,
    so the line search can shrink the step."""

    dim = spec.control_dim

    def objective(z):
        try:
            ev = total_cost(z, spec)
        except (IntegrationDivergedError, CostSingularError):
            return math.inf, np.zeros(dim)
        return ev.total, ev.gradient

    return objective


def _run(spec: CostSpec, solver: LbfgsConfig | None) -> AssimilationResult:
    z0 = np.zeros(spec.control_dim)
    z_star, report = minimize(_safe_objective(spec), z0, solver or LbfgsConfig())
    ev = total_cost(z_star, spec)
    if spec.variant == "vae":
        x_a = mlp_forward(spec.decoder, z_star) + spec.x_b
    else:
        x_a = spec.background.U @ z_star + spec.x_b
    return AssimilationResult(x_a=x_a, z_star=z_star, cost=ev, report=report)


def assimilate_traditional(spec: CostSpec, solver: LbfgsConfig | None = None) -> AssimilationResult:
    """Gaussian-prior analysis: minimize 0.5||z||^2 plus the misfit, x = U z + x_b."""
    if spec.variant != "traditional":
        raise ValueError("spec.variant must be 'traditional'")
    return _run(spec, solver)


def assimilate_vae(spec: CostSpec, solver: LbfgsConfig | None = None) -> AssimilationResult:
    """Learned-prior analysis through the decoder, honoring ablation flags."""
    if spec.variant != "vae":
        raise ValueError("spec.variant must be 'vae'")
    return _run(spec, solver)


def assimilate_naive(x_b: np.ndarray, op: ObservationOperator, y: np.ndarray) -> AssimilationResult:
    """Overwrite the observed coordinates of x_b with their observed values."""
    if op.nonlinearity != "identity":
        raise UnsupportedOperatorError(
            f"naive substitution needs an identity operator, got {op.nonlinearity!r}"
        )
    x_b = np.asarray(x_b, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.shape != (op.n_observed,):
        raise ValueError(f"observation dim {y.shape} does not match mask count {op.n_observed}")
    x_a = x_b.copy()
    x_a[op.mask] = y
    return AssimilationResult(x_a=x_a)
