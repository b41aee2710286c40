"""Twin-experiment driver: data generation, training, noise sweeps, metrics.

A run fixes the validation truth/background pairs once per configuration,
then sweeps observation masks, noise levels, and repeats.  All methods in
a cell see identical truths and observations, so comparisons are paired.
Output is a metric row per (method, mask, noise level, repeat) plus a
manifest of every setting and seed.
"""

from __future__ import annotations

import dataclasses
import json
import math
import multiprocessing
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .assimilation import assimilate_naive, assimilate_traditional, assimilate_vae
from .background import (
    BackgroundCovariance,
    ErrorSampleSet,
    TwinModelPair,
    estimate_covariance,
    generate_error_samples,
)
from .cost import CostSpec
from .dynamics import IntegratorConfig, Lorenz63Params, Lorenz96Params, propagate
from .errors import ConfigError, ModelFormatError, VaevarError
from .observation import NONLINEARITIES, ObservationOperator, simulate_observations
from .seeding import TAG_OBS_NOISE, TAG_VAL_STATE, rng_from
from .solver import LbfgsConfig
from .tinynn import AdamWConfig
from .vae import VaeModel, train_vae

METHODS = ("traditional", "vae_full", "vae_obs_reg", "vae_obs", "naive")

# ablation switches (use_reg, use_det) per learned-prior method
_VAE_FLAGS = {"vae_full": (True, True), "vae_obs_reg": (True, False), "vae_obs": (False, False)}


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    """Root-mean-square difference of two states."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return float(np.sqrt(np.mean(d * d)))


def excess_kurtosis(samples: np.ndarray) -> np.ndarray:
    """Per-coordinate excess kurtosis (0 for a Gaussian)."""
    x = np.asarray(samples, dtype=float)
    c = x - x.mean(axis=0)
    m2 = np.mean(c * c, axis=0)
    m4 = np.mean(c ** 4, axis=0)
    return m4 / (m2 * m2) - 3.0


def imp_metric(r_bg: float, r_vae: float, r_trad: float,
               denom_floor: float | None = None):
    """Relative assimilation-gain improvement, with degeneracy handling.

    Clamped to 0 when either analysis is worse than the background;
    None (suppressed) when the traditional gain is below the floor,
    which defaults to 1e-3 * r_bg.
    """
    if min(r_bg, r_vae, r_trad) < 0:
        raise ValueError("RMSE inputs must be non-negative")
    if denom_floor is None:
        denom_floor = 1e-3 * r_bg
    if r_vae >= r_bg or r_trad >= r_bg:
        return 0.0
    if r_bg - r_trad < denom_floor:
        return None
    return (r_bg - r_vae) / (r_bg - r_trad) - 1.0


def lorenz63_masks() -> list:
    """All seven non-empty observation subsets of (X, Y, Z)."""
    return [[0, 1, 2], [0, 1], [0, 2], [1, 2], [0], [1], [2]]


def lorenz96_first_three_masks() -> list:
    """All seven non-empty subsets of the first three coordinates."""
    return [[0, 1, 2], [0, 1], [0, 2], [1, 2], [0], [1], [2]]


def mask_label(mask, dim: int) -> str:
    idx = sorted(int(i) for i in mask)
    if dim == 3:
        return "".join("XYZ"[i] for i in idx)
    if len(idx) == dim:
        return "all"
    return "-".join(str(i + 1) for i in idx)


def parse_mask_token(token: str, dim: int) -> list:
    """Inverse of mask_label: 'XY', '1-2-3', or 'all'."""
    token = token.strip()
    if token == "all":
        return list(range(dim))
    if set(token) <= set("XYZ") and token:
        return sorted("XYZ".index(c) for c in token)
    try:
        return sorted(int(p) - 1 for p in token.split("-"))
    except ValueError:
        raise ConfigError(f"cannot parse mask token {token!r}") from None


@dataclass
class ExperimentConfig:
    """Full description of one twin-experiment sweep."""

    system: str = "lorenz63"
    dim: int = 3
    truth: dict = field(default_factory=dict)
    prediction: dict = field(default_factory=dict)
    step_size: float = 0.01
    tau: int = 10
    n_train: int = 4000
    n_val: int = 1000
    masks: list = field(default_factory=lorenz63_masks)
    nonlinearity: str = "identity"
    sigma_noise: list = field(default_factory=lambda: [0.1, 0.3, 0.5])
    repeats: int = 10
    window: list = field(default_factory=lambda: [0])
    methods: list = field(default_factory=lambda: ["traditional", "vae_full", "naive"])
    hidden1: int = 8
    hidden2: int = 8
    latent_dim: int = 3
    sigma0: float = 0.3
    det_epsilon: float = 1e-2
    learning_rate: float = 1e-3
    epochs: int = 300
    batch_size: int = 32
    weight_decay: float = 0.01
    seed: int = 20240
    denom_floor_rel: float = 1e-3
    solver: dict = field(default_factory=dict)
    workers: int = 1
    truth_full_horizon: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.system not in ("lorenz63", "lorenz96"):
            raise ConfigError(f"unknown system {self.system!r}")
        if self.system == "lorenz63" and self.dim != 3:
            raise ConfigError("lorenz63 has dim 3")
        if self.system == "lorenz96" and self.dim < 4:
            raise ConfigError("lorenz96 needs dim >= 4")
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError("n_train and n_val must be >= 1")
        if not self.masks:
            raise ConfigError("at least one observation mask is required")
        for m in self.masks:
            if not m or any(not (0 <= int(i) < self.dim) for i in m):
                raise ConfigError(f"mask {m} is not a non-empty set of coordinates < {self.dim}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")
        if not self.sigma_noise:
            raise ConfigError("sigma_noise grid must be non-empty")
        if any(s < 0 for s in self.sigma_noise):
            raise ConfigError("sigma_noise values must be >= 0")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if not self.window or self.window[0] != 0 or any(
            b <= a for a, b in zip(self.window, self.window[1:])
        ):
            raise ConfigError("window must start at 0 and strictly increase")
        unknown = set(self.methods) - set(METHODS)
        if unknown or not self.methods:
            raise ConfigError(f"unknown methods {sorted(unknown)}; pick from {METHODS}")
        if "naive" in self.methods and self.nonlinearity != "identity":
            raise ConfigError("the naive substitute needs the identity operator")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.tau < 1 or self.step_size <= 0:
            raise ConfigError("tau must be >= 1 and step_size positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def adamw(self) -> AdamWConfig:
        return AdamWConfig(learning_rate=self.learning_rate, weight_decay=self.weight_decay,
                           batch_size=self.batch_size, epochs=self.epochs)

    def lbfgs(self) -> LbfgsConfig:
        try:
            return LbfgsConfig(**self.solver)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad solver settings: {exc}") from exc


def lorenz63_sigma_config(**overrides) -> ExperimentConfig:
    """Lorenz 63 benchmark with the convection parameter perturbed 10 -> 11."""
    base = dict(system="lorenz63", dim=3, truth={}, prediction={"sigma": 11.0},
                hidden1=8, hidden2=8, latent_dim=3, sigma0=0.3, det_epsilon=1e-2,
                epochs=300, masks=lorenz63_masks())
    base.update(overrides)
    return ExperimentConfig(**base)


def lorenz63_rho_config(**overrides) -> ExperimentConfig:
    """Lorenz 63 with rho perturbed 28 -> 29 (wider latent space, smaller epsilon)."""
    base = dict(system="lorenz63", dim=3, truth={}, prediction={"rho": 29.0},
                hidden1=10, hidden2=10, latent_dim=5, sigma0=0.2, det_epsilon=1e-5,
                epochs=300, masks=lorenz63_masks())
    base.update(overrides)
    return ExperimentConfig(**base)


def lorenz96_forcing_config(**overrides) -> ExperimentConfig:
    """Lorenz 96 (d=20) with the first equation's forcing perturbed 8 -> 13."""
    base = dict(system="lorenz96", dim=20, truth={"forcing": 8.0},
                prediction={"forcing": 8.0, "first_forcing": 13.0},
                hidden1=35, hidden2=35, latent_dim=15, sigma0=0.1, det_epsilon=1e-2,
                epochs=1000, masks=lorenz96_first_three_masks(), n_val=200)
    base.update(overrides)
    return ExperimentConfig(**base)


PRESETS = {
    "lorenz63-sigma": lorenz63_sigma_config,
    "lorenz63-rho": lorenz63_rho_config,
    "lorenz96-forcing": lorenz96_forcing_config,
}


def build_models(cfg: ExperimentConfig):
    """Truth and prediction dynamics from the config dicts."""
    if cfg.system == "lorenz63":
        try:
            return Lorenz63Params(**cfg.truth), Lorenz63Params(**cfg.prediction)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad lorenz63 parameters: {exc}") from exc
    truth_f = cfg.truth.get("forcing", 8.0)
    pred_f = cfg.prediction.get("forcing", truth_f)
    truth = Lorenz96Params.uniform(cfg.dim, truth_f)
    pred = Lorenz96Params.uniform(cfg.dim, pred_f)
    if "first_forcing" in cfg.prediction:
        pred = pred.with_first_forcing(cfg.prediction["first_forcing"])
    if "first_forcing" in cfg.truth:
        truth = truth.with_first_forcing(cfg.truth["first_forcing"])
    return truth, pred


@dataclass(frozen=True)
class MetricRow:
    method: str
    mask: str
    nonlin: str
    sigma_noise: float
    repeat: int
    rmse_bg: float
    rmse: float
    imp: float | None = None


CSV_HEADER = "method,mask,nonlin,sigma_noise,repeat,rmse_bg,rmse,imp"


def metrics_csv(rows) -> str:
    lines = [CSV_HEADER]
    for r in rows:
        imp = "" if r.imp is None else repr(r.imp)
        lines.append(f"{r.method},{r.mask},{r.nonlin},{r.sigma_noise!r},"
                     f"{r.repeat},{r.rmse_bg!r},{r.rmse!r},{imp}")
    return "\n".join(lines) + "\n"


@dataclass(eq=False)
class ExperimentResult:
    rows: list
    manifest: dict
    model: VaeModel
    background: BackgroundCovariance
    samples: ErrorSampleSet
    loss_trace: list | None
    n_failed: int

    def csv(self) -> str:
        return metrics_csv(self.rows)

    def manifest_json(self) -> str:
        return json.dumps(self.manifest, sort_keys=True, indent=2) + "\n"


# worker-process context, set once per pool worker
_CTX: dict = {}


def _set_context(payload: dict) -> None:
    _CTX.clear()
    _CTX.update(payload)


def _sigma_key(sigma: float) -> int:
    return int(round(sigma * 1_000_000))


def _mask_bits(mask) -> int:
    return sum(1 << int(i) for i in mask)


def _assimilate_one(ctx: dict, op: ObservationOperator, x_b_i: np.ndarray, batch, method: str):
    cfg: ExperimentConfig = ctx["cfg"]
    if method == "naive":
        return assimilate_naive(x_b_i, op, batch.values[0]).x_a
    windowed = len(cfg.window) > 1
    common = dict(x_b=x_b_i, operator=op, batch=batch,
                  model=ctx["pred"] if windowed else None,
                  step_size=cfg.step_size if windowed else None)
    if method == "traditional":
        spec = CostSpec("traditional", background=ctx["background"], **common)
        return assimilate_traditional(spec, ctx["solver"]).x_a
    use_reg, use_det = _VAE_FLAGS[method]
    spec = CostSpec("vae", decoder=ctx["model"].decoder, epsilon=cfg.det_epsilon,
                    use_reg=use_reg, use_det=use_det, **common)
    return assimilate_vae(spec, ctx["solver"]).x_a


def _run_chunk(task):
    """Per-state RMSE for one (mask, sigma, repeat) cell chunk of states."""
    mask_i, sig_i, rep, lo, hi = task
    ctx = _CTX
    cfg: ExperimentConfig = ctx["cfg"]
    op = ctx["operators"][mask_i]
    sigma = cfg.sigma_noise[sig_i]
    bits = _mask_bits(cfg.masks[mask_i])
    nl_code = NONLINEARITIES.index(cfg.nonlinearity)
    out = {m: np.full(hi - lo, np.nan) for m in cfg.methods}
    for i in range(lo, hi):
        x_gt_i = ctx["x_gt"][i]
        x_b_i = ctx["x_b"][i]
        rng = rng_from(cfg.seed, TAG_OBS_NOISE, bits, nl_code, _sigma_key(sigma), rep, i)
        batch = simulate_observations(ctx["pair"], x_gt_i, op, cfg.window, sigma, rng=rng)
        for method in cfg.methods:
            try:
                x_a = _assimilate_one(ctx, op, x_b_i, batch, method)
                out[method][i - lo] = rmse(x_a, x_gt_i)
            except VaevarError:
                pass  # leaves nan; counted as a failed trial
    return mask_i, sig_i, rep, lo, out


def validation_states(cfg: ExperimentConfig, truth, pred):
    """Warmed-up truth/background pairs shared by every cell of the sweep."""
    x0 = np.stack([rng_from(cfg.seed, TAG_VAL_STATE, i).standard_normal(cfg.dim)
                   for i in range(cfg.n_val)])
    icfg = IntegratorConfig(cfg.step_size, cfg.tau)
    warm = propagate(truth.rhs, x0, icfg)
    x_gt = propagate(truth.rhs, warm, icfg)
    x_b = propagate(pred.rhs, warm, icfg)
    return x_gt, x_b


def run_experiment(cfg: ExperimentConfig, model: VaeModel | None = None,
                   samples: ErrorSampleSet | None = None,
                   background: BackgroundCovariance | None = None) -> ExperimentResult:
    """Run the configured sweep; returns metric rows plus the manifest.

    A pre-trained model / sample set / covariance can be passed in to
    skip the corresponding stage (their seeds are then whatever produced
    them; the manifest records the config either way).
    """
    cfg.validate()
    truth, pred = build_models(cfg)
    pair = TwinModelPair(truth, pred, IntegratorConfig(cfg.step_size, cfg.tau))

    if samples is None:
        samples = generate_error_samples(pair, cfg.n_train, cfg.seed,
                                         truth_full_horizon=cfg.truth_full_horizon)
    if background is None:
        background = estimate_covariance(samples)
    loss_trace = None
    if model is None:
        model, loss_trace = train_vae(samples, cfg.hidden1, cfg.hidden2, cfg.latent_dim,
                                      cfg.adamw(), cfg.sigma0, cfg.seed)
    if model.state_dim != cfg.dim:
        raise ModelFormatError(f"model dim {model.state_dim} does not match system dim {cfg.dim}")

    x_gt, x_b = validation_states(cfg, truth, pred)
    d = x_gt - x_b
    bg_rmse_states = np.sqrt(np.mean(d * d, axis=1))

    operators = [ObservationOperator.from_indices(m, cfg.dim, cfg.nonlinearity)
                 for m in cfg.masks]
    payload = {
        "cfg": cfg, "pair": pair, "pred": pred, "model": model,
        "background": background, "operators": operators,
        "x_gt": x_gt, "x_b": x_b, "solver": cfg.lbfgs(),
    }

    chunk = 100
    tasks = [
        (mask_i, sig_i, rep, lo, min(lo + chunk, cfg.n_val))
        for mask_i in range(len(cfg.masks))
        for sig_i in range(len(cfg.sigma_noise))
        for rep in range(cfg.repeats)
        for lo in range(0, cfg.n_val, chunk)
    ]

    if cfg.workers > 1:
        with multiprocessing.get_context("fork").Pool(
            cfg.workers, initializer=_set_context, initargs=(payload,)
        ) as pool:
            chunk_results = pool.map(_run_chunk, tasks, chunksize=1)
    else:
        _set_context(payload)
        chunk_results = [_run_chunk(t) for t in tasks]

    # stitch chunks back into per-cell per-method state arrays
    cells: dict = {}
    for mask_i, sig_i, rep, lo, out in chunk_results:
        cell = cells.setdefault((mask_i, sig_i, rep),
                                {m: np.full(cfg.n_val, np.nan) for m in cfg.methods})
        for m, vals in out.items():
            cell[m][lo:lo + vals.size] = vals

    rows = []
    n_failed = 0
    for mask_i in range(len(cfg.masks)):
        label = mask_label(cfg.masks[mask_i], cfg.dim)
        for sig_i, sigma in enumerate(cfg.sigma_noise):
            for rep in range(cfg.repeats):
                cell = cells[(mask_i, sig_i, rep)]
                valid = np.ones(cfg.n_val, dtype=bool)
                for m in cfg.methods:
                    valid &= np.isfinite(cell[m])
                n_failed += int(cfg.n_val - valid.sum())
                if not valid.any():
                    raise VaevarError(f"every trial failed in cell ({label}, {sigma}, {rep})")
                r_bg = float(bg_rmse_states[valid].mean())
                means = {m: float(cell[m][valid].mean()) for m in cfg.methods}
                r_trad = means.get("traditional")
                for m in cfg.methods:
                    imp = None
                    if m in _VAE_FLAGS and r_trad is not None:
                        imp = imp_metric(r_bg, means[m], r_trad,
                                         denom_floor=cfg.denom_floor_rel * r_bg)
                    rows.append(MetricRow(m, label, cfg.nonlinearity, float(sigma),
                                          rep, r_bg, means[m], imp))

    n_trials = len(cfg.masks) * len(cfg.sigma_noise) * cfg.repeats * cfg.n_val
    if n_failed > 0.01 * n_trials:
        raise VaevarError(f"{n_failed} of {n_trials} trials failed (> 1%); aborting")

    manifest = {
        "version": __version__,
        "config": cfg.to_dict(),
        "mask_labels": [mask_label(m, cfg.dim) for m in cfg.masks],
        "solver": dataclasses.asdict(cfg.lbfgs()),
        "adamw": dataclasses.asdict(cfg.adamw()),
        "vae_manifest": dict(model.manifest),
        "n_resampled_error_samples": samples.n_resampled,
        "covariance_ridge": background.ridge,
        "n_trials": n_trials,
        "n_failed_trials": n_failed,
    }
    return ExperimentResult(rows, manifest, model, background, samples, loss_trace, n_failed)
