"""Command line front end.

Subcommands: `gen-data` writes an error sample file, `train` fits the
error model, `assimilate` runs one debug case and prints the cost
breakdown, `experiment` runs a full sweep to a metrics CSV and manifest.
Every flag overrides the config file.  Exit codes: 0 ok, 2 bad config,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .assimilation import assimilate_naive, assimilate_traditional, assimilate_vae
from .background import (
    TwinModelPair,
    estimate_covariance,
    generate_error_samples,
    load_samples,
    save_samples,
)
from .cost import CostSpec
from .dynamics import IntegratorConfig
from .errors import ConfigError, VaevarError
from .harness import (
    PRESETS,
    ExperimentConfig,
    build_models,
    mask_label,
    parse_mask_token,
    rmse,
    run_experiment,
    validation_states,
)
from .observation import ObservationOperator, observation_rows, simulate_observations
from .seeding import TAG_OBS_NOISE, rng_from
from .vae import load_model, loss_trace_csv, save_model, train_vae


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vaevar", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config file with ExperimentConfig fields")
        p.add_argument("--preset", choices=sorted(PRESETS),
                       help="named scenario the config/flags override")
        p.add_argument("--seed", type=int)
        p.add_argument("--n-train", type=int)
        p.add_argument("--n-val", type=int)
        p.add_argument("--repeats", type=int)
        p.add_argument("--sigma-noise", type=float, nargs="+")
        p.add_argument("--masks", nargs="+",
                       help="mask tokens like XY, 1-2-3, or all")
        p.add_argument("--nonlinearity", choices=("identity", "absolute", "saturated"))
        p.add_argument("--window", type=int, nargs="+")
        p.add_argument("--methods", nargs="+")
        p.add_argument("--epochs", type=int)
        p.add_argument("--workers", type=int)

    p = sub.add_parser("gen-data", help="generate and save background error samples")
    add_common(p)
    p.add_argument("--out", required=True, help="sample file path")

    p = sub.add_parser("train", help="train the error model from a sample file")
    add_common(p)
    p.add_argument("--samples", required=True, help="sample file from gen-data")
    p.add_argument("--out", required=True, help="model file path")
    p.add_argument("--loss-csv", help="optional per-epoch loss trace CSV")

    p = sub.add_parser("assimilate", help="run one debug case and print the breakdown")
    add_common(p)
    p.add_argument("--model", required=True, help="model file from train")
    p.add_argument("--case", type=int, default=0, help="validation state index")
    p.add_argument("--sigma", type=float, default=0.3, help="observation noise std")
    p.add_argument("--mask", default=None, help="mask token (default: first config mask)")
    p.add_argument("--dump-obs", help="write observation CSV rows to this path")

    p = sub.add_parser("experiment", help="run the configured sweep")
    add_common(p)
    p.add_argument("--model", help="reuse a trained model file")
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-manifest")
    return parser


_OVERRIDES = {
    "seed": "seed", "n_train": "n_train", "n_val": "n_val", "repeats": "repeats",
    "sigma_noise": "sigma_noise", "nonlinearity": "nonlinearity", "window": "window",
    "methods": "methods", "epochs": "epochs", "workers": "workers",
}


def _load_config(args) -> ExperimentConfig:
    data: dict = {}
    if args.preset:
        data = PRESETS[args.preset]().to_dict()
    if args.config:
        try:
            with open(args.config) as fh:
                file_data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        if not isinstance(file_data, dict):
            raise ConfigError("config file must hold a JSON object")
        data.update(file_data)
    if not data:
        raise ConfigError("need --config and/or --preset")
    cfg = ExperimentConfig.from_dict(data)
    updates = {}
    for arg_name, field in _OVERRIDES.items():
        value = getattr(args, arg_name, None)
        if value is not None:
            updates[field] = value
    if getattr(args, "masks", None):
        updates["masks"] = [parse_mask_token(t, cfg.dim) for t in args.masks]
    if updates:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), **updates})
    return cfg


def _cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    truth, pred = build_models(cfg)
    pair = TwinModelPair(truth, pred, IntegratorConfig(cfg.step_size, cfg.tau))
    samples = generate_error_samples(pair, cfg.n_train, cfg.seed,
                                     truth_full_horizon=cfg.truth_full_horizon)
    save_samples(args.out, samples)
    print(f"wrote {samples.n} samples of dim {samples.dim} to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    samples = load_samples(args.samples)
    if samples.dim != cfg.dim:
        raise ConfigError(f"sample dim {samples.dim} does not match config dim {cfg.dim}")
    model, trace = train_vae(samples, cfg.hidden1, cfg.hidden2, cfg.latent_dim,
                             cfg.adamw(), cfg.sigma0, cfg.seed)
    save_model(model, args.out)
    if args.loss_csv:
        with open(args.loss_csv, "w") as fh:
            fh.write(loss_trace_csv(trace))
    print(f"trained {cfg.epochs} epochs; final mean loss {trace[-1].mean_loss:.6f}")
    print(f"wrote model to {args.out}")
    return 0


def _cmd_assimilate(args) -> int:
    cfg = _load_config(args)
    model = load_model(args.model, expected_dim=cfg.dim)
    truth, pred = build_models(cfg)
    pair = TwinModelPair(truth, pred, IntegratorConfig(cfg.step_size, cfg.tau))
    samples = generate_error_samples(pair, cfg.n_train, cfg.seed,
                                     truth_full_horizon=cfg.truth_full_horizon)
    background = estimate_covariance(samples)

    case = args.case
    if not (0 <= case < cfg.n_val):
        raise ConfigError(f"case must be in [0, {cfg.n_val})")
    x_gt_all, x_b_all = validation_states(cfg, truth, pred)
    x_gt, x_b = x_gt_all[case], x_b_all[case]

    mask = parse_mask_token(args.mask, cfg.dim) if args.mask else cfg.masks[0]
    op = ObservationOperator.from_indices(mask, cfg.dim, cfg.nonlinearity)
    rng = rng_from(cfg.seed, TAG_OBS_NOISE, sum(1 << i for i in mask), 0,
                   int(round(args.sigma * 1e6)), 0, case)
    batch = simulate_observations(pair, x_gt, op, cfg.window, args.sigma, rng=rng)
    if args.dump_obs:
        with open(args.dump_obs, "w") as fh:
            fh.write("trial,window_index,time_index,coord,value\n")
            fh.write("\n".join(observation_rows(batch, case)) + "\n")

    windowed = len(cfg.window) > 1
    common = dict(x_b=x_b, operator=op, batch=batch,
                  model=pred if windowed else None,
                  step_size=cfg.step_size if windowed else None)
    print(f"case {case}: mask {mask_label(mask, cfg.dim)} ({cfg.nonlinearity}), "
          f"sigma_noise {args.sigma}, window {list(cfg.window)}")
    print(f"  rmse(background) = {rmse(x_b, x_gt):.6f}")
    for method in cfg.methods:
        if method == "naive":
            res = assimilate_naive(x_b, op, batch.values[0])
            print(f"  {method:12s} rmse = {rmse(res.x_a, x_gt):.6f}")
            continue
        if method == "traditional":
            spec = CostSpec("traditional", background=background, **common)
            res = assimilate_traditional(spec, cfg.lbfgs())
        else:
            from .harness import _VAE_FLAGS

            use_reg, use_det = _VAE_FLAGS[method]
            spec = CostSpec("vae", decoder=model.decoder, epsilon=cfg.det_epsilon,
                            use_reg=use_reg, use_det=use_det, **common)
            res = assimilate_vae(spec, cfg.lbfgs())
        ev = res.cost
        rep = res.report
        print(f"  {method:12s} rmse = {rmse(res.x_a, x_gt):.6f}  "
              f"cost = {ev.total:.6f} (obs {ev.obs_term:.6f}, reg {ev.reg_term:.6f}, "
              f"det {ev.det_term:.6f})  iters = {rep.iterations}, "
              f"evals = {rep.n_evals}, stop = {rep.reason}")
        print(f"               z* = {np.array2string(res.z_star, precision=4)}")
        print(f"               x_a = {np.array2string(res.x_a, precision=4)}")
    return 0


def _cmd_experiment(args) -> int:
    cfg = _load_config(args)
    model = load_model(args.model, expected_dim=cfg.dim) if args.model else None
    result = run_experiment(cfg, model=model)
    with open(args.out_csv, "w") as fh:
        fh.write(result.csv())
    if args.out_manifest:
        with open(args.out_manifest, "w") as fh:
            fh.write(result.manifest_json())
    print(f"wrote {len(result.rows)} metric rows to {args.out_csv}"
          + (f" and manifest to {args.out_manifest}" if args.out_manifest else ""))
    if result.n_failed:
        print(f"note: {result.n_failed} trials failed and were dropped")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "assimilate": _cmd_assimilate,
    "experiment": _cmd_experiment,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except VaevarError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
