"""Command-line entry point.

Subcommands:
    run           execute an experiment config and write its report files
    verify        run the certification sweeps, emit a JSON report
    comparator    search the best certified linear gain for a config
    inspect-gram  build E[JᵀJ] for a config and dump it as a binary matrix

Exit codes: 0 success, 2 config error, 3 verification failure, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from ..learners import auto_horizon
from ..rng import substream
from ..stability import StabilityError
from ..surrogate import SurrogateModel, write_gram
from .comparators import ComparatorError, best_linear_comparator
from .config import ConfigError, ExperimentConfig, cost_stream, load_config
from .experiment import _resolve_certificate, run_experiment
from .verify import DEFAULT_SEED, verify_suite

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VERIFY = 3
EXIT_NUMERIC = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dacontrol", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment config")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--out", default=None)
    run_p.add_argument("--variant", choices=["ogd", "ong"], default=None)
    run_p.add_argument("--replicas", type=int, default=None)

    ver_p = sub.add_parser("verify", help="run the certification sweeps")
    ver_p.add_argument("--out", default=None, help="write the JSON report here")
    ver_p.add_argument("--reduced", action="store_true", help="smaller sweeps, skip MC-heavy checks")
    ver_p.add_argument("--seed", type=int, default=DEFAULT_SEED)

    cmp_p = sub.add_parser("comparator", help="best certified linear gain for a config")
    cmp_p.add_argument("--config", required=True)
    cmp_p.add_argument("--seed", type=int, default=None)
    cmp_p.add_argument("--out", default=None)

    ig_p = sub.add_parser("inspect-gram", help="dump E[JᵀJ] for a config")
    ig_p.add_argument("--config", required=True)
    ig_p.add_argument("--out", default="gram.bin")
    return parser


def _load_with_overrides(args) -> ExperimentConfig:
    config = load_config(args.config)
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "out", None) is not None and args.command == "run":
        updates["out_dir"] = args.out
    if getattr(args, "variant", None) is not None:
        updates["variants"] = (args.variant,)
    if getattr(args, "replicas", None) is not None:
        updates["replicas"] = args.replicas
    if updates:
        config = dataclasses.replace(config, **updates)
    return config


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            config = _load_with_overrides(args)
            report = run_experiment(config)
            for variant, entry in report["variants"].items():
                print(
                    f"{variant}: avg cost {entry['avg_cost']:.6g} "
                    f"(best linear {report['comparators']['best_linear']['avg_cost']:.6g})"
                )
            return EXIT_OK

        if args.command == "verify":
            report = verify_suite(reduced=args.reduced, seed=args.seed)
            text = json.dumps(report, sort_keys=True, indent=1)
            if args.out:
                with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
                    fh.write(text + "\n")
            for check in report["checks"]:
                if check.get("skipped"):
                    print(f"[verify] {check['name']}: SKIPPED")
                else:
                    print(f"[verify] {check['name']}: {'PASS' if check['passed'] else 'FAIL'}")
            print(f"[verify] all_pass={report['all_pass']}")
            return EXIT_OK if report["all_pass"] else EXIT_VERIFY

        if args.command == "comparator":
            config = _load_with_overrides(args)
            noise = np.stack(
                [
                    config.noise.sample(substream(config.seed, "noise", r), config.T)
                    for r in range(config.replicas)
                ]
            )
            gain, cost, info = best_linear_comparator(
                config.system,
                noise,
                cost_stream(config),
                points_per_axis=config.comparator_grid,
                half_width=config.comparator_half_width,
            )
            payload = {"gain": gain.tolist(), "mean_total_cost": cost, "info": info}
            text = json.dumps(payload, sort_keys=True, indent=1)
            if args.out:
                with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
                    fh.write(text + "\n")
            print(text)
            return EXIT_OK

        if args.command == "inspect-gram":
            config = _load_with_overrides(args)
            cert = _resolve_certificate(config)
            H = config.H if config.H > 0 else auto_horizon(config.T, cert.kappa, cert.gamma)
            model = SurrogateModel(config.system, cert.K, H, noise_model=config.noise)
            write_gram(args.out, model.p_gram)
            eigs = np.linalg.eigvalsh(model.p_gram)
            print(
                f"wrote {args.out}: {model.p_gram.shape[0]}x{model.p_gram.shape[1]}, "
                f"lambda_min={eigs[0]:.6g}, lambda_max={eigs[-1]:.6g}"
            )
            return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StabilityError, ComparatorError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
