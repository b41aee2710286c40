"""Variational autoencoder over background error samples.

The encoder is two shared SiLU layers with separate linear mean and
log-variance heads; the decoder is the three-layer MLP whose input
Jacobian the assimilation cost needs.  Training uses the reparameterized
evidence bound with a fixed decoder noise scale sigma0 and AdamW, with
all gradients derived by hand.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .background import ErrorSampleSet
from .errors import ModelFormatError, TrainingDivergedError
from .seeding import TAG_VAE_EPOCH, TAG_VAE_INIT, rng_from
from .tinynn import (
    AdamWConfig,
    AdamWState,
    MlpParams,
    MlpShape,
    _backward_from_trace,
    _forward_trace,
    adamw_step,
    init_dense,
    init_mlp,
    mlp_forward,
    silu,
    silu_deriv,
)

FORMAT_MAGIC = "VAEVAR-MODEL v1"

# serialization order of all trainable tensors
TENSOR_NAMES = (
    "enc_w1", "enc_b1", "enc_w2", "enc_b2",
    "mu_w", "mu_b", "logvar_w", "logvar_b",
    "dec_A1", "dec_b1", "dec_A2", "dec_b2", "dec_A3", "dec_b3",
)


@dataclass(eq=False)
class VaeModel:
    enc_w1: np.ndarray
    enc_b1: np.ndarray
    enc_w2: np.ndarray
    enc_b2: np.ndarray
    mu_w: np.ndarray
    mu_b: np.ndarray
    logvar_w: np.ndarray
    logvar_b: np.ndarray
    decoder: MlpParams
    sigma0: float
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.sigma0 > 0:
            raise ValueError(f"sigma0 must be positive, got {self.sigma0}")
        if self.enc_w1.shape[1] != self.decoder.A3.shape[0]:
            raise ValueError("encoder input dim must equal decoder output dim")
        if self.mu_w.shape[0] != self.decoder.A1.shape[1]:
            raise ValueError("mu head dim must equal decoder input dim")
        if self.logvar_w.shape != self.mu_w.shape:
            raise ValueError("mu and logvar heads must share a shape")

    @property
    def state_dim(self) -> int:
        return self.enc_w1.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.mu_w.shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        """All trainable tensors in serialization order."""
        out = {
            "enc_w1": self.enc_w1, "enc_b1": self.enc_b1,
            "enc_w2": self.enc_w2, "enc_b2": self.enc_b2,
            "mu_w": self.mu_w, "mu_b": self.mu_b,
            "logvar_w": self.logvar_w, "logvar_b": self.logvar_b,
        }
        for name, t in self.decoder.tensors().items():
            out[f"dec_{name}"] = t
        return out


def init_vae(state_dim: int, hidden1: int, hidden2: int, latent_dim: int,
             sigma0: float, rng: np.random.Generator) -> VaeModel:
    enc_w1, enc_b1 = init_dense(rng, hidden1, state_dim)
    enc_w2, enc_b2 = init_dense(rng, hidden2, hidden1)
    mu_w, mu_b = init_dense(rng, latent_dim, hidden2)
    logvar_w, logvar_b = init_dense(rng, latent_dim, hidden2)
    decoder = init_mlp(MlpShape(latent_dim, hidden2, hidden1, state_dim), rng, act="silu")
    return VaeModel(enc_w1, enc_b1, enc_w2, enc_b2, mu_w, mu_b, logvar_w, logvar_b,
                    decoder, float(sigma0))


def _encode_trace(m: VaeModel, delta: np.ndarray):
    pre1 = delta @ m.enc_w1.T + m.enc_b1
    t1 = silu(pre1)
    pre2 = t1 @ m.enc_w2.T + m.enc_b2
    t2 = silu(pre2)
    mu = t2 @ m.mu_w.T + m.mu_b
    logvar = t2 @ m.logvar_w.T + m.logvar_b
    return mu, logvar, (pre1, t1, pre2, t2)


def encode(m: VaeModel, delta: np.ndarray):
    """Latent mean and log-variance for an error vector (or batch)."""
    delta = np.asarray(delta, dtype=float)
    if delta.shape[-1] != m.state_dim:
        raise ValueError(f"input dim {delta.shape[-1]} does not match model dim {m.state_dim}")
    mu, logvar, _ = _encode_trace(m, delta)
    return mu, logvar


def decode(m: VaeModel, z: np.ndarray) -> np.ndarray:
    return mlp_forward(m.decoder, z)


def reconstruct(m: VaeModel, delta: np.ndarray) -> np.ndarray:
    """Decode the latent mean of delta (no sampling)."""
    return decode(m, encode(m, delta)[0])


def decoder_cloud(m: VaeModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """Map n standard-normal latent draws through the decoder."""
    return decode(m, rng.standard_normal((n, m.latent_dim)))


def kl_to_prior(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """KL(N(mu, diag e^logvar) || N(0, I)) per row."""
    return 0.5 * np.sum(np.exp(logvar) + np.square(mu) - 1.0 - logvar, axis=-1)


def elbo_loss(m: VaeModel, delta: np.ndarray, noise: np.ndarray):
    """Single-sample training loss and its (reconstruction, KL) breakdown."""
    delta = np.asarray(delta, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if noise.shape != (m.latent_dim,):
        raise ValueError(f"noise must have latent dim {m.latent_dim}, got shape {noise.shape}")
    mu, logvar = encode(m, delta)
    z = mu + np.exp(0.5 * logvar) * noise
    resid = delta - decode(m, z)
    recon = float(resid @ resid) / (2.0 * m.sigma0 ** 2)
    kl = float(kl_to_prior(mu, logvar))
    loss = recon + kl
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss (recon={recon}, kl={kl})")
    return loss, recon, kl


def _batch_loss_and_grads(m: VaeModel, delta: np.ndarray, noise: np.ndarray):
    """Mean loss over a batch plus gradients for every tensor."""
    bsz = delta.shape[0]
    mu, logvar, (pre1, t1, pre2, t2) = _encode_trace(m, delta)
    std = np.exp(0.5 * logvar)
    z = mu + std * noise
    out, dec_trace = _forward_trace(m.decoder, z)
    resid = delta - out

    inv = 1.0 / (2.0 * m.sigma0 ** 2)
    recon = float(np.sum(resid * resid)) * inv / bsz
    kl = float(np.sum(kl_to_prior(mu, logvar))) / bsz
    loss = recon + kl

    g_out = -resid * (2.0 * inv / bsz)
    dec_grads, g_z = _backward_from_trace(m.decoder, z, g_out, dec_trace)

    g_mu = g_z + mu / bsz
    g_logvar = g_z * noise * 0.5 * std + 0.5 * (np.exp(logvar) - 1.0) / bsz

    g_t2 = g_mu @ m.mu_w + g_logvar @ m.logvar_w
    g_pre2 = g_t2 * silu_deriv(pre2)
    g_t1 = g_pre2 @ m.enc_w2
    g_pre1 = g_t1 * silu_deriv(pre1)

    grads = {
        "enc_w1": g_pre1.T @ delta, "enc_b1": g_pre1.sum(axis=0),
        "enc_w2": g_pre2.T @ t1, "enc_b2": g_pre2.sum(axis=0),
        "mu_w": g_mu.T @ t2, "mu_b": g_mu.sum(axis=0),
        "logvar_w": g_logvar.T @ t2, "logvar_b": g_logvar.sum(axis=0),
    }
    for name, g in dec_grads.items():
        grads[f"dec_{name}"] = g
    return loss, recon, kl, grads


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss: float
    recon: float
    kl: float


def train_vae(samples: ErrorSampleSet, hidden1: int, hidden2: int, latent_dim: int,
              cfg: AdamWConfig, sigma0: float, seed: int):
    """Train a VAE on an error sample set.

    Returns the trained model and the per-epoch loss trace.  A fixed seed
    makes the run bitwise reproducible: initialization, shuffling, and
    latent noise all derive from it.
    """
    data = samples.samples
    n, dim = data.shape
    model = init_vae(dim, hidden1, hidden2, latent_dim, sigma0,
                     rng_from(seed, TAG_VAE_INIT))
    params = model.parameters()
    state = AdamWState(params)
    trace = []
    for epoch in range(cfg.epochs):
        rng = rng_from(seed, TAG_VAE_EPOCH, epoch)
        order = rng.permutation(n)
        tot = np.zeros(3)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            noise = rng.standard_normal((idx.size, latent_dim))
            loss, recon, kl, grads = _batch_loss_and_grads(model, data[idx], noise)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} (recon={recon}, kl={kl})"
                )
            adamw_step(state, params, grads, cfg)
            tot += (loss * idx.size, recon * idx.size, kl * idx.size)
        trace.append(EpochStats(epoch, tot[0] / n, tot[1] / n, tot[2] / n))
    model.manifest = _training_manifest(samples, hidden1, hidden2, latent_dim, cfg, sigma0, seed)
    return model, trace


def _training_manifest(samples, hidden1, hidden2, latent_dim, cfg, sigma0, seed) -> dict:
    return {
        "n_train": samples.n,
        "state_dim": samples.dim,
        "hidden1": hidden1,
        "hidden2": hidden2,
        "latent_dim": latent_dim,
        "sigma0": float(sigma0),
        "seed": int(seed),
        "learning_rate": cfg.learning_rate,
        "beta1": cfg.beta1,
        "beta2": cfg.beta2,
        "eps": cfg.eps,
        "weight_decay": cfg.weight_decay,
        "batch_size": cfg.batch_size,
        "epochs": cfg.epochs,
        "init": "uniform_fan_in",
        "normalization": "none",
    }


def loss_trace_csv(trace) -> str:
    lines = ["epoch,mean_loss,recon,kl"]
    lines += [f"{s.epoch},{s.mean_loss!r},{s.recon!r},{s.kl!r}" for s in trace]
    return "\n".join(lines) + "\n"


def _format_value(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def save_model(m: VaeModel, path) -> None:
    """Write the portable model file: ASCII header, then raw float64 tensors."""
    params = m.parameters()
    buf = io.StringIO()
    buf.write(FORMAT_MAGIC + "\n")
    buf.write(f"state_dim = {m.state_dim}\n")
    buf.write(f"latent_dim = {m.latent_dim}\n")
    buf.write(f"sigma0 = {m.sigma0!r}\n")
    for key in sorted(m.manifest):
        buf.write(f"manifest.{key} = {_format_value(m.manifest[key])}\n")
    buf.write(f"decoder_act = {m.decoder.act1} {m.decoder.act2}\n")
    buf.write("tensors = " + " ".join(TENSOR_NAMES) + "\n")
    for name in TENSOR_NAMES:
        dims = " ".join(str(d) for d in params[name].shape)
        buf.write(f"shape {name} = {dims}\n")
    buf.write("data\n")
    with open(path, "wb") as fh:
        fh.write(buf.getvalue().encode("ascii"))
        for name in TENSOR_NAMES:
            fh.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def _parse_number(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def load_model(path, expected_dim: int | None = None) -> VaeModel:
    """Read a model file; optionally enforce the physical state dimension."""
    with open(path, "rb") as fh:
        blob = fh.read()
    marker = b"\ndata\n"
    cut = blob.find(marker)
    if cut < 0:
        raise ModelFormatError("missing data section")
    try:
        header = blob[:cut].decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise ModelFormatError("header is not ASCII") from exc
    if not header or header[0] != FORMAT_MAGIC:
        raise ModelFormatError(f"bad magic line {header[0]!r}" if header else "empty file")

    fields: dict[str, str] = {}
    shapes: dict[str, tuple] = {}
    for line in header[1:]:
        key, _, value = line.partition(" = ")
        if not value:
            raise ModelFormatError(f"malformed header line {line!r}")
        if key.startswith("shape "):
            shapes[key.removeprefix("shape ")] = tuple(int(d) for d in value.split())
        else:
            fields[key] = value

    try:
        state_dim = int(fields["state_dim"])
        latent_dim = int(fields["latent_dim"])
        sigma0 = float(fields["sigma0"])
        names = tuple(fields["tensors"].split())
        act1, act2 = fields["decoder_act"].split()
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(f"incomplete header: {exc}") from exc
    if names != TENSOR_NAMES or set(shapes) != set(TENSOR_NAMES):
        raise ModelFormatError("tensor list does not match this format version")
    if expected_dim is not None and state_dim != expected_dim:
        raise ModelFormatError(
            f"model has state dim {state_dim}, assimilation needs {expected_dim}"
        )

    body = blob[cut + len(marker):]
    expected_bytes = 8 * sum(int(np.prod(shapes[n])) for n in TENSOR_NAMES)
    if len(body) != expected_bytes:
        raise ModelFormatError(f"tensor data is {len(body)} bytes, expected {expected_bytes}")
    tensors = {}
    offset = 0
    for name in TENSOR_NAMES:
        count = int(np.prod(shapes[name]))
        tensors[name] = np.frombuffer(body, dtype="<f8", count=count,
                                      offset=offset).reshape(shapes[name]).copy()
        offset += 8 * count

    manifest = {k.removeprefix("manifest."): _parse_number(v) if _is_number(v) else v
                for k, v in fields.items() if k.startswith("manifest.")}
    try:
        decoder = MlpParams(tensors["dec_A1"], tensors["dec_b1"], tensors["dec_A2"],
                            tensors["dec_b2"], tensors["dec_A3"], tensors["dec_b3"],
                            act1=act1, act2=act2)
        model = VaeModel(tensors["enc_w1"], tensors["enc_b1"], tensors["enc_w2"],
                         tensors["enc_b2"], tensors["mu_w"], tensors["mu_b"],
                         tensors["logvar_w"], tensors["logvar_b"], decoder, sigma0,
                         manifest=manifest)
    except ValueError as exc:
        raise ModelFormatError(f"shape-inconsistent header: {exc}") from exc
    if model.state_dim != state_dim or model.latent_dim != latent_dim:
        raise ModelFormatError("header dims disagree with tensor shapes")
    return model


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True
