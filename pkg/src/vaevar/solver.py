"""Limited-memory BFGS with a strong-Wolfe line search.

Plain two-loop recursion over the last `memory` curvature pairs, initial
Hessian scaled by <s,y>/<y,y>, bracketing line search with safeguarded
cubic interpolation.  Non-finite trial values shrink the step instead of
aborting, and a failed line search returns the best point seen so far
with a flagged report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LbfgsConfig:
    memory: int = 10
    max_iters: int = 200
    grad_tol: float = 1e-6
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    max_line_search_steps: int = 25

    def __post_init__(self):
        if self.memory < 1:
            raise ValueError("memory must be >= 1")
        if not (0.0 < self.wolfe_c1 < self.wolfe_c2 < 1.0):
            raise ValueError("need 0 < c1 < c2 < 1")
        if self.max_iters < 0 or self.max_line_search_steps < 1:
            raise ValueError("iteration limits must be positive")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")


@dataclass(frozen=True)
class MinimizeReport:
    iterations: int
    n_evals: int
    grad_norm: float
    reason: str  # "converged" | "max_iters" | "line_search_failed"

    @property
    def converged(self) -> bool:
        return self.reason == "converged"


def _two_loop_direction(g, s_hist, y_hist, rho_hist):
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if y_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
        b = rho * (y @ q)
        q += s * (a - b)
    return -q


def _cubic_step(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi):
    """Minimizer of the cubic through two points with slopes; None if degenerate."""
    if not (math.isfinite(f_hi) and math.isfinite(d_hi)):
        # quadratic through (a_lo, f_lo, d_lo) and (a_hi, f_hi) when f_hi known
        if math.isfinite(f_hi):
            denom = 2.0 * (f_hi - f_lo - d_lo * (a_hi - a_lo))
            if denom != 0:
                a = a_lo - d_lo * (a_hi - a_lo) ** 2 / denom
                return a if math.isfinite(a) else None
        return None
    d1 = d_lo + d_hi - 3.0 * (f_lo - f_hi) / (a_lo - a_hi)
    disc = d1 * d1 - d_lo * d_hi
    if disc < 0:
        return None
    d2 = math.copysign(math.sqrt(disc), a_hi - a_lo)
    denom = d_hi - d_lo + 2.0 * d2
    if denom == 0:
        return None
    a = a_hi - (a_hi - a_lo) * (d_hi + d2 - d1) / denom
    return a if math.isfinite(a) else None


def _zoom(fe, x, d, f0, dphi0, lo, hi, cfg, budget):
    """Strong-Wolfe zoom between bracket ends lo=(a, f, g, dphi) and hi."""
    c1, c2 = cfg.wolfe_c1, cfg.wolfe_c2
    a_lo, f_lo, g_lo, d_lo = lo
    a_hi, f_hi, _, d_hi = hi
    for _ in range(budget):
        a = _cubic_step(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi)
        width = abs(a_hi - a_lo)
        left, right = min(a_lo, a_hi), max(a_lo, a_hi)
        if a is None or not (left + 0.05 * width <= a <= right - 0.05 * width):
            a = 0.5 * (a_lo + a_hi)
        f_a, g_a = fe(x + a * d)
        if not math.isfinite(f_a):
            a_hi, f_hi, d_hi = a, math.inf, math.nan
            continue
        dphi_a = float(g_a @ d)
        if f_a > f0 + c1 * a * dphi0 or f_a >= f_lo:
            a_hi, f_hi, d_hi = a, f_a, dphi_a
        else:
            if abs(dphi_a) <= -c2 * dphi0:
                return a, f_a, g_a, True
            if dphi_a * (a_hi - a_lo) >= 0:
                a_hi, f_hi, d_hi = a_lo, f_lo, d_lo
            a_lo, f_lo, g_lo, d_lo = a, f_a, g_a, dphi_a
        if width < 1e-14 * max(1.0, abs(a_lo)):
            break
    return a_lo, f_lo, g_lo, False


def _line_search(fe, x, f0, g0, d, cfg):
    """Find a strong-Wolfe step along d; returns (alpha, f, g, ok)."""
    c1, c2 = cfg.wolfe_c1, cfg.wolfe_c2
    dphi0 = float(g0 @ d)
    a_prev, f_prev, g_prev, d_prev = 0.0, f0, g0, dphi0
    have_prev = False
    alpha = 1.0
    steps = cfg.max_line_search_steps
    used = 0
    while used < steps:
        used += 1
        f_a, g_a = fe(x + alpha * d)
        if not math.isfinite(f_a):
            alpha *= 0.5
            continue
        dphi_a = float(g_a @ d)
        if f_a > f0 + c1 * alpha * dphi0 or (have_prev and f_a >= f_prev):
            return _zoom(fe, x, d, f0, dphi0,
                         (a_prev, f_prev, g_prev, d_prev),
                         (alpha, f_a, g_a, dphi_a), cfg, steps - used)
        if abs(dphi_a) <= -c2 * dphi0:
            return alpha, f_a, g_a, True
        if dphi_a >= 0:
            return _zoom(fe, x, d, f0, dphi0,
                         (alpha, f_a, g_a, dphi_a),
                         (a_prev, f_prev, g_prev, d_prev), cfg, steps - used)
        a_prev, f_prev, g_prev, d_prev = alpha, f_a, g_a, dphi_a
        have_prev = True
        alpha *= 2.0
    return a_prev, f_prev, g_prev, False


def minimize(f, z0: np.ndarray, cfg: LbfgsConfig | None = None):
    """Minimize f(z) -> (value, gradient) from z0.

    Stops when the gradient 2-norm drops to cfg.grad_tol or the iteration
    cap is reached.  A line-search failure returns the best iterate seen,
    flagged in the report; callers can still use that point.
    """
    cfg = cfg or LbfgsConfig()
    z = np.asarray(z0, dtype=float).copy()
    evals = 0

    def fe(point):
        nonlocal evals
        evals += 1
        value, grad = f(point)
        return float(value), np.asarray(grad, dtype=float)

    fz, gz = fe(z)
    if not (math.isfinite(fz) and np.all(np.isfinite(gz))):
        raise ValueError("objective must be finite at the starting point")
    best_f, best_z = fz, z.copy()

    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []
    iterations = 0
    reason = "max_iters"
    while iterations < cfg.max_iters:
        gnorm = float(np.linalg.norm(gz))
        if gnorm <= cfg.grad_tol:
            reason = "converged"
            break
        iterations += 1
        d = _two_loop_direction(gz, s_hist, y_hist, rho_hist)
        if not np.all(np.isfinite(d)) or float(d @ gz) >= 0.0:
            s_hist.clear(); y_hist.clear(); rho_hist.clear()
            d = -gz
        alpha, f_new, g_new, ok = _line_search(fe, z, fz, gz, d, cfg)
        if not ok or alpha == 0.0:
            reason = "line_search_failed"
            if alpha > 0.0 and f_new < best_f:
                best_f, best_z = f_new, z + alpha * d
            break
        z_new = z + alpha * d
        s = z_new - z
        y = g_new - gz
        sy = float(s @ y)
        if sy > 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > cfg.memory:
                s_hist.pop(0); y_hist.pop(0); rho_hist.pop(0)
        z, fz, gz = z_new, f_new, g_new
        if fz < best_f:
            best_f, best_z = fz, z.copy()

    gnorm = float(np.linalg.norm(gz))
    if reason == "max_iters" and gnorm <= cfg.grad_tol:
        reason = "converged"
    out = z if reason != "line_search_failed" else (best_z if best_f < fz else z)
    return out, MinimizeReport(iterations, evals, gnorm, reason)
