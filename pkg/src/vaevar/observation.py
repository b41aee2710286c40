"""Observation operators, their Jacobians, and simulated observations.

An operator selects the masked coordinates of a state and applies an
elementwise nonlinearity: identity, absolute value, or the saturating
map x / (1 + |x|).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import IntegratorConfig, integrate
from .seeding import rng_from

NONLINEARITIES = ("identity", "absolute", "saturated")


@dataclass(eq=False)
class ObservationOperator:
    mask: np.ndarray
    nonlinearity: str = "identity"

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.dtype != bool:
            m = m.astype(bool)
        if m.ndim != 1 or not m.any():
            raise ValueError("mask must be a 1-d boolean vector observing at least one coordinate")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        self.mask = m

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    @classmethod
    def from_indices(cls, indices, dim: int, nonlinearity: str = "identity") -> "ObservationOperator":
        mask = np.zeros(dim, dtype=bool)
        mask[list(indices)] = True
        return cls(mask, nonlinearity)


def apply_operator(h: ObservationOperator, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != h.mask.size:
        raise ValueError(f"state dim {x.shape[-1]} does not match mask size {h.mask.size}")
    v = x[..., h.mask]
    if h.nonlinearity == "identity":
        return v
    if h.nonlinearity == "absolute":
        return np.abs(v)
    return v / (1.0 + np.abs(v))


def operator_jacobian(h: ObservationOperator, x: np.ndarray) -> np.ndarray:
    """Jacobian of apply_operator at x, shape (n_observed, dim)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (h.mask.size,):
        raise ValueError(f"expected a single dim-{h.mask.size} state, got shape {x.shape}")
    v = x[h.mask]
    if h.nonlinearity == "identity":
        deriv = np.ones_like(v)
    elif h.nonlinearity == "absolute":
        deriv = np.sign(v)  # sign(0) == 0 by convention
    else:
        deriv = 1.0 / (1.0 + np.abs(v)) ** 2
    jac = np.zeros((v.size, x.size))
    jac[np.arange(v.size), np.flatnonzero(h.mask)] = deriv
    return jac


@dataclass(eq=False)
class ObservationBatch:
    """Observations over an assimilation window, one value vector per time."""

    time_indices: tuple
    values: tuple
    noise_std: float
    r_std: float

    def __post_init__(self):
        idx = tuple(int(t) for t in self.time_indices)
        vals = tuple(np.asarray(v, dtype=float) for v in self.values)
        if len(idx) != len(vals):
            raise ValueError("one value vector per time index required")
        if idx:
            if idx[0] != 0:
                raise ValueError("first window time index must be 0")
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise ValueError("window time indices must be strictly increasing")
            n = vals[0].size
            if any(v.shape != (n,) for v in vals):
                raise ValueError("all observation vectors must share one dimension")
        if not (self.noise_std >= 0 and math.isfinite(self.noise_std)):
            raise ValueError("noise_std must be finite and >= 0")
        if not (self.r_std > 0 and math.isfinite(self.r_std)):
            raise ValueError("r_std must be finite and positive")
        self.time_indices = idx
        self.values = vals

    @property
    def n_times(self) -> int:
        return len(self.time_indices)


def simulate_observations(pair, x_gt: np.ndarray, h: ObservationOperator, window,
                          sigma_noise: float, seed=None, rng=None) -> ObservationBatch:
    """Observe the truth trajectory from x_gt at the window's step indices.

    Each observation is H(state) plus N(0, sigma_noise^2 I) noise; the
    error covariance std r_std is set to sigma_noise (or 1 when noise-free
    observations are requested, to keep R invertible).
    """
    window = tuple(int(t) for t in window)
    if not window or window[0] != 0:
        raise ValueError("window must start at time index 0")
    if rng is None:
        keys = seed if isinstance(seed, (tuple, list)) else (0 if seed is None else seed,)
        rng = rng_from(*keys)
    x_gt = np.asarray(x_gt, dtype=float)
    traj = integrate(pair.truth.rhs, x_gt,
                     IntegratorConfig(step_size=pair.integrator.step_size, n_steps=max(window)))
    values = []
    for t in window:
        clean = apply_operator(h, traj[t])
        noise = sigma_noise * rng.standard_normal(clean.size) if sigma_noise > 0 else 0.0
        values.append(clean + noise)
    r_std = sigma_noise if sigma_noise > 0 else 1.0
    return ObservationBatch(window, tuple(values), float(sigma_noise), float(r_std))


def observation_rows(batch: ObservationBatch, trial: int) -> list[str]:
    """CSV rows `trial,window_index,time_index,coord,value` for a batch."""
    rows = []
    for w, (t, y) in enumerate(zip(batch.time_indices, batch.values)):
        for c, val in enumerate(y):
            rows.append(f"{trial},{w},{t},{c},{val!r}")
    return rows
