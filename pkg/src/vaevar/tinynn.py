"""Three-layer dense network kernels with hand-derived gradients, plus AdamW.

All kernels accept either a single vector or a batch stacked along the
first axis.  Parameter gradients are for <grad_out, forward(z)>, summed
over the batch when one is given.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=float)
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_deriv(x: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _identity(x):
    return x


def _identity_deriv(x):
    return np.ones_like(x)


ACTIVATIONS = {
    "silu": (silu, silu_deriv),
    "identity": (_identity, _identity_deriv),
}


@dataclass(frozen=True)
class MlpShape:
    n_in: int
    h1: int
    h2: int
    n_out: int

    def __post_init__(self):
        for name in ("n_in", "h1", "h2", "n_out"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass(eq=False)
class MlpParams:
    """Weights and biases of out = A3 act2(A2 act1(A1 z + b1) + b2) + b3."""

    A1: np.ndarray
    b1: np.ndarray
    A2: np.ndarray
    b2: np.ndarray
    A3: np.ndarray
    b3: np.ndarray
    act1: str = "silu"
    act2: str = "silu"

    def __post_init__(self):
        for name in ("A1", "b1", "A2", "b2", "A3", "b3"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        h1, n_in = self.A1.shape
        h2 = self.A2.shape[0]
        n_out = self.A3.shape[0]
        ok = (
            self.b1.shape == (h1,)
            and self.A2.shape == (h2, h1)
            and self.b2.shape == (h2,)
            and self.A3.shape == (n_out, h2)
            and self.b3.shape == (n_out,)
        )
        if not ok:
            raise ValueError("layer shapes do not chain")
        for a in (self.act1, self.act2):
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        for name in ("A1", "b1", "A2", "b2", "A3", "b3"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")

    @property
    def shape(self) -> MlpShape:
        return MlpShape(self.A1.shape[1], self.A1.shape[0], self.A2.shape[0], self.A3.shape[0])

    def tensors(self) -> dict[str, np.ndarray]:
        """Named tensors in a fixed order (the serialization order)."""
        return {
            "A1": self.A1, "b1": self.b1,
            "A2": self.A2, "b2": self.b2,
            "A3": self.A3, "b3": self.b3,
        }

    def copy(self) -> "MlpParams":
        return MlpParams(
            self.A1.copy(), self.b1.copy(), self.A2.copy(),
            self.b2.copy(), self.A3.copy(), self.b3.copy(),
            act1=self.act1, act2=self.act2,
        )


def init_dense(rng: np.random.Generator, n_out: int, n_in: int):
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weight matrix and bias."""
    bound = 1.0 / np.sqrt(n_in)
    w = rng.uniform(-bound, bound, size=(n_out, n_in))
    b = rng.uniform(-bound, bound, size=n_out)
    return w, b


def init_mlp(shape: MlpShape, rng: np.random.Generator, act: str = "silu") -> MlpParams:
    a1, b1 = init_dense(rng, shape.h1, shape.n_in)
    a2, b2 = init_dense(rng, shape.h2, shape.h1)
    a3, b3 = init_dense(rng, shape.n_out, shape.h2)
    return MlpParams(a1, b1, a2, b2, a3, b3, act1=act, act2=act)


def _forward_trace(p: MlpParams, z: np.ndarray):
    act1 = ACTIVATIONS[p.act1][0]
    act2 = ACTIVATIONS[p.act2][0]
    pre1 = z @ p.A1.T + p.b1
    a1 = act1(pre1)
    pre2 = a1 @ p.A2.T + p.b2
    a2 = act2(pre2)
    out = a2 @ p.A3.T + p.b3
    return out, (pre1, a1, pre2, a2)


def mlp_forward(p: MlpParams, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != p.A1.shape[1]:
        raise ValueError(f"input dim {z.shape[-1]} does not match A1 columns {p.A1.shape[1]}")
    return _forward_trace(p, z)[0]


def mlp_input_jacobian(p: MlpParams, z: np.ndarray) -> np.ndarray:
    """Jacobian of the forward map at z: A3 diag(act2') A2 diag(act1') A1."""
    z = np.asarray(z, dtype=float)
    if z.shape != (p.A1.shape[1],):
        raise ValueError(f"expected a single input of dim {p.A1.shape[1]}, got shape {z.shape}")
    d1 = ACTIVATIONS[p.act1][1]
    d2 = ACTIVATIONS[p.act2][1]
    pre1 = p.A1 @ z + p.b1
    pre2 = p.A2 @ ACTIVATIONS[p.act1][0](pre1) + p.b2
    return (p.A3 * d2(pre2)) @ ((p.A2 * d1(pre1)) @ p.A1)


def input_jacobian_batch(p: MlpParams, zs: np.ndarray) -> np.ndarray:
    """Input Jacobians for a stack of inputs, shape (batch, n_out, n_in)."""
    zs = np.asarray(zs, dtype=float)
    d1 = ACTIVATIONS[p.act1][1]
    d2 = ACTIVATIONS[p.act2][1]
    pre1 = zs @ p.A1.T + p.b1
    pre2 = ACTIVATIONS[p.act1][0](pre1) @ p.A2.T + p.b2
    # scale A2 rows by act1'(pre1) per batch element, then chain
    inner = (p.A2 * d1(pre1)[:, None, :]) @ p.A1
    return (p.A3 * d2(pre2)[:, None, :]) @ inner


def mlp_backward(p: MlpParams, z: np.ndarray, grad_out: np.ndarray):
    """Gradients of <grad_out, forward(z)> w.r.t. parameters and input.

    Returns (param_grads, input_grad) where param_grads is keyed like
    `MlpParams.tensors()`.  Batched inputs sum parameter gradients over
    the batch; the input gradient keeps the batch shape.
    """
    z = np.asarray(z, dtype=float)
    g = np.asarray(grad_out, dtype=float)
    if g.shape[-1] != p.A3.shape[0]:
        raise ValueError(f"grad_out dim {g.shape[-1]} does not match output dim {p.A3.shape[0]}")
    single = z.ndim == 1
    zb = z[None, :] if single else z
    gb = g[None, :] if single else g
    _, trace = _forward_trace(p, zb)
    grads, g_z = _backward_from_trace(p, zb, gb, trace)
    return grads, (g_z[0] if single else g_z)


def _backward_from_trace(p: MlpParams, zb: np.ndarray, gb: np.ndarray, trace):
    pre1, a1, pre2, a2 = trace
    d1 = ACTIVATIONS[p.act1][1]
    d2 = ACTIVATIONS[p.act2][1]

    g_b3 = gb.sum(axis=0)
    g_a3 = gb.T @ a2
    g_pre2 = (gb @ p.A3) * d2(pre2)
    g_b2 = g_pre2.sum(axis=0)
    g_a2 = g_pre2.T @ a1
    g_pre1 = (g_pre2 @ p.A2) * d1(pre1)
    g_b1 = g_pre1.sum(axis=0)
    g_a1 = g_pre1.T @ zb
    g_z = g_pre1 @ p.A1

    grads = {"A1": g_a1, "b1": g_b1, "A2": g_a2, "b2": g_b2, "A3": g_a3, "b3": g_b3}
    return grads, g_z


@dataclass
class AdamWConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 300

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


class AdamWState:
    """First/second moment buffers and step counter for a named parameter set."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def adamw_step(state: AdamWState, params: dict[str, np.ndarray],
               grads: dict[str, np.ndarray], cfg: AdamWConfig) -> None:
    """In-place decoupled-weight-decay Adam update with bias correction."""
    state.t += 1
    t = state.t
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for k, p in params.items():
        g = grads[k]
        if cfg.weight_decay != 0.0:
            p *= 1.0 - cfg.learning_rate * cfg.weight_decay
        m = state.m[k]
        v = state.v[k]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * np.square(g)
        p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
