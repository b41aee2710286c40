"""Background error machinery: forecast-pair error samples and the Gaussian
covariance with its square-root factor used by the traditional cost.

Error samples follow the forecast-pair recipe: start both models from the
same random state, integrate the first leg with the truth model on one
branch and the prediction model on the other, continue both branches with
the prediction model, and record the difference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import IntegratorConfig, integrate
from .errors import FactorizationError, IntegrationDivergedError
from .seeding import TAG_TRAIN_SAMPLE, rng_from


@dataclass(eq=False)
class ErrorSampleSet:
    """Background error samples, one row per sample."""

    samples: np.ndarray
    n_resampled: int = 0

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 2 or s.shape[0] < 1:
            raise ValueError("samples must be a non-empty (n, dim) array")
        if not np.all(np.isfinite(s)):
            raise ValueError("samples must be finite")
        self.samples = s

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


@dataclass(eq=False)
class TwinModelPair:
    """Truth and prediction models of the same family, plus the leg length."""

    truth: object
    prediction: object
    integrator: IntegratorConfig

    def __post_init__(self):
        if type(self.truth) is not type(self.prediction):
            raise ValueError("truth and prediction must be the same system family")
        if self.truth.dim != self.prediction.dim:
            raise ValueError("truth and prediction dims differ")

    @property
    def dim(self) -> int:
        return self.truth.dim


@dataclass(eq=False)
class BackgroundCovariance:
    """Sample covariance B with a symmetric square root U, B + ridge*I = U U = U^T U."""

    B: np.ndarray
    U: np.ndarray
    ridge: float

    @property
    def dim(self) -> int:
        return self.B.shape[0]


def _draw_initial_states(dim: int, seed: int, index_attempts) -> np.ndarray:
    rows = [rng_from(seed, TAG_TRAIN_SAMPLE, i, attempt).standard_normal(dim)
            for i, attempt in index_attempts]
    return np.asarray(rows)


def generate_error_samples(pair: TwinModelPair, n_samples: int, seed: int,
                           truth_full_horizon: bool = False) -> ErrorSampleSet:
    """Forecast-pair error samples; diverged draws are resampled.

    With `truth_full_horizon` the truth branch keeps the truth model for
    its second leg instead of switching to the prediction model.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    dim = pair.dim
    cfg = pair.integrator
    second_leg = pair.truth if truth_full_horizon else pair.prediction

    samples = np.empty((n_samples, dim))
    pending = [(i, 0) for i in range(n_samples)]
    n_resampled = 0
    while pending:
        idx = [i for i, _ in pending]
        x0 = _draw_initial_states(dim, seed, pending)
        a = integrate(pair.truth.rhs, x0, cfg, check=False)[-1]
        x1 = integrate(second_leg.rhs, a, cfg, check=False)[-1]
        b = integrate(pair.prediction.rhs, x0, cfg, check=False)[-1]
        x2 = integrate(pair.prediction.rhs, b, cfg, check=False)[-1]
        delta = x1 - x2
        good = np.all(np.isfinite(delta), axis=1)
        for row, i in enumerate(idx):
            if good[row]:
                samples[i] = delta[row]
        pending = [(i, attempt + 1) for (i, attempt), g in zip(pending, good) if not g]
        n_resampled += len(pending)
        if pending and pending[0][1] > 50:
            raise IntegrationDivergedError(
                "sample generation keeps diverging; check the model setup"
            )
    return ErrorSampleSet(samples, n_resampled=n_resampled)


def estimate_covariance(samples, ridge: float | None = None) -> BackgroundCovariance:
    """Unbiased sample covariance and its symmetric square-root factor.

    The default ridge 1e-6 * trace(B) / dim is added before factorization
    so the factor always exists.
    """
    arr = samples.samples if isinstance(samples, ErrorSampleSet) else np.asarray(samples, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ValueError("need at least 2 samples to estimate a covariance")
    centered = arr - arr.mean(axis=0)
    b = centered.T @ centered / (arr.shape[0] - 1)
    b = 0.5 * (b + b.T)
    if ridge is None:
        ridge = 1e-6 * np.trace(b) / b.shape[0]
    if not (ridge >= 0 and math.isfinite(ridge)):
        raise ValueError(f"ridge must be finite and >= 0, got {ridge}")
    a = b + ridge * np.eye(b.shape[0])
    w, vecs = np.linalg.eigh(a)
    if w[0] <= 0:
        raise FactorizationError(
            f"ridged covariance is not positive definite (min eigenvalue {w[0]:.3e})"
        )
    u = (vecs * np.sqrt(w)) @ vecs.T
    u = 0.5 * (u + u.T)
    return BackgroundCovariance(B=b, U=u, ridge=float(ridge))


SAMPLES_MAGIC = "VAEVAR-SAMPLES v1"


def save_samples(path, samples: ErrorSampleSet) -> None:
    """Write `VAEVAR-SAMPLES v1 dim=<d> n=<n>` then one CSV row per sample."""
    with open(path, "w") as fh:
        fh.write(f"{SAMPLES_MAGIC} dim={samples.dim} n={samples.n}\n")
        for row in samples.samples:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def load_samples(path) -> ErrorSampleSet:
    with open(path) as fh:
        header = fh.readline().strip()
        parts = header.split()
        if len(parts) != 4 or " ".join(parts[:2]) != SAMPLES_MAGIC:
            raise ValueError(f"not a {SAMPLES_MAGIC} file: {header!r}")
        dim = int(parts[2].removeprefix("dim="))
        n = int(parts[3].removeprefix("n="))
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape != (n, dim):
        raise ValueError(f"sample file body {data.shape} does not match header ({n}, {dim})")
    return ErrorSampleSet(data)
