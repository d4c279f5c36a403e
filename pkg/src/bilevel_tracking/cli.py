"""Command line entry point: build a problem, run a method, write the iterate
log as CSV plus the learned parameters and reconstructions.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .driver import DriverAbort, RunConfig, implicit_solve, run
from .experiments import (
    DeblurExperimentConfig,
    MriExperimentConfig,
    build_deblur_problem,
    build_mri_problem,
    build_quadratic_problem,
    parse_config_file,
)
from .imaging import write_pgm

__all__ = ["build_parser", "cli_main", "main"]

# Config-file keys accepted for experiment construction vs the run itself.
_EXPERIMENT_KEYS = {
    "mri": {"n1", "n2", "n_groups", "n_examples", "alpha0", "beta", "M", "noise_std",
            "epsilon", "delta", "tau_x", "tau_y", "theta_y", "sigma_block_gs",
            "sigma_identity", "sigma_implicit", "theta_x_identity", "theta_y_identity",
            "inner_steps_implicit", "adjoint_steps_implicit", "phantom_path"},
    "deblur": {"n1", "n2", "rotation_deg", "noise_std", "beta", "reg_scale_c",
               "epsilon", "delta", "tau_x", "tau_y", "theta_y", "sigma_block_gs",
               "sigma_identity", "sigma_implicit", "theta_x_identity", "theta_y_identity",
               "inner_steps_implicit", "adjoint_steps_implicit", "image_path"},
    "quadratic": set(),
}
_RUN_KEYS = {"sigma", "tau_x", "tau_y", "theta_y", "inner_steps", "adjoint_steps"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="bilevel-tracking",
        description="Single-loop bilevel learning runs (MRI mask / deconvolution kernel / toy)",
    )
    p.add_argument("--problem", choices=("mri", "deblur", "quadratic"), required=True)
    p.add_argument("--method", choices=("pdps-block-gs", "pdps-identity", "implicit"),
                   default="pdps-block-gs")
    p.add_argument("--config", help="flat key = value parameter file")
    p.add_argument("--budget-seconds", type=float, help="CPU-seconds budget")
    p.add_argument("--iters", type=int, help="outer iteration cap")
    p.add_argument("--out", help="iterate log CSV path (default ./run.csv)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", choices=("desk", "paper"), default="desk")
    return p


def _build_problem(args, file_cfg: dict):
    kind = args.problem
    extra = {k: v for k, v in file_cfg.items() if k in _EXPERIMENT_KEYS[kind]}
    if kind == "quadratic":
        return build_quadratic_problem(seed=args.seed)
    if kind == "mri":
        cls = MriExperimentConfig
        if "M" in extra:
            extra["M"] = float(extra["M"])
        cfg = cls.paper_scale(seed=args.seed, **extra) if args.scale == "paper" else cls(
            seed=args.seed, **extra)
        return build_mri_problem(cfg)
    cls = DeblurExperimentConfig
    cfg = cls.paper_scale(seed=args.seed, **extra) if args.scale == "paper" else cls(
        seed=args.seed, **extra)
    return build_deblur_problem(cfg)


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    file_cfg = {}
    if args.config:
        try:
            file_cfg = parse_config_file(args.config)
        except (OSError, ValueError) as exc:
            print(f"error: cannot read config: {exc}", file=sys.stderr)
            return 2
        unknown = set(file_cfg) - _EXPERIMENT_KEYS[args.problem] - _RUN_KEYS
        if unknown:
            print(f"warning: ignoring config keys {sorted(unknown)}", file=sys.stderr)

    out_path = args.out
    if out_path is None:
        out_path = "./run.csv"
        print("warning: no --out given, writing ./run.csv", file=sys.stderr)

    if args.iters is None and args.budget_seconds is None:
        args.iters = 100
        print("warning: no budget given, defaulting to --iters 100", file=sys.stderr)

    try:
        problem = _build_problem(args, file_cfg)
    except (OSError, ValueError, TypeError) as exc:
        print(f"error: cannot build problem: {exc}", file=sys.stderr)
        return 2

    run_kw = {k: file_cfg[k] for k in _RUN_KEYS if k in file_cfg}
    config = RunConfig(method=args.method, iters=args.iters,
                       budget_seconds=args.budget_seconds, seed=args.seed, **run_kw)
    try:
        log = run(problem, config)
    except DriverAbort as exc:
        exc.log.to_csv(out_path)
        print(f"error: {exc} (partial log written to {out_path})", file=sys.stderr)
        return 1

    log.to_csv(out_path)
    alpha = log.final_alpha
    alpha_path = out_path.replace(".csv", "") + "_alpha.csv"
    np.savetxt(alpha_path, alpha[None, :], delimiter=",",
               header=",".join(f"alpha{i + 1}" for i in range(alpha.size)), comments="")

    if args.problem in ("mri", "deblur"):
        u, _, _ = implicit_solve(problem, alpha)
        for i, ui in enumerate(u):
            recon = np.clip(ui.x.matrix, 0.0, 1.0)
            write_pgm(out_path.replace(".csv", "") + f"_recon{i}.pgm", recon)
    print(f"finished {len(log.records)} records; final alpha written to {alpha_path}")
    return 0


def main():  # console-script entry
    raise SystemExit(cli_main())


if __name__ == "__main__":
    main()
