"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 validation failure, 3 numerical
failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import datagen, estimator, experiments, inference
from .errors import DatasetFormatError, NumericalError, ValidationError
from .model import Policy, load_model, save_model, validate_model

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _dump_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _load_policy(model_path, policy_path):
    model, policy = load_model(model_path)
    if policy_path is not None:
        doc = json.loads(Path(policy_path).read_text())
        policy = Policy(doc["pi"] if isinstance(doc, dict) else doc)
    if policy is None:
        raise ValidationError("no target policy: add a 'pi' entry to the model file or pass --policy")
    return model, policy


def cmd_validate(args):
    model, _ = load_model(args.model)
    report = validate_model(model)
    print(report.summary())
    return EXIT_OK if report.ok else EXIT_INVALID


def cmd_scenario(args):
    if args.kind == "identity":
        model, policy = datagen.build_scenario_identity(
            args.S, args.A, args.seed, gamma=args.gamma, noise_halfwidth=args.noise_halfwidth
        )
    else:
        model, policy = datagen.build_scenario_confounded(
            args.S,
            args.A,
            args.Z,
            args.confound_strength,
            args.seed,
            d=args.d,
            gamma=args.gamma,
            noise_halfwidth=args.noise_halfwidth,
        )
    save_model(args.out, model, policy)
    return EXIT_OK


def cmd_gen(args):
    model, _ = load_model(args.model)
    ds = datagen.sample_dataset(model, args.n, args.seed, emit_eps=args.emit_eps)
    datagen.write_dataset(ds, args.out)
    return EXIT_OK


def cmd_estimate(args):
    model, policy = _load_policy(args.model, args.policy)
    ds = datagen.read_dataset(args.data, model.S, model.A, model.Z)
    est = estimator.estimate(ds, model.Phi, policy, model.gamma, args.ridge_lambda)
    for note in est.notes:
        print(f"note: {note}", file=sys.stderr)
    _dump_json(args.out, est.to_dict())
    return EXIT_OK


def cmd_infer(args):
    model, _ = load_model(args.model_features)
    ds = datagen.read_dataset(args.data, model.S, model.A, model.Z)
    est = estimator.EstimatorOutput.from_dict(json.loads(Path(args.est).read_text()))
    if est.n != ds.n:
        raise ValidationError(f"estimate was computed on n={est.n} records but the dataset has {ds.n}")
    cov = inference.asymptotic_covariance(ds, est, model.Phi)
    cis = inference.confidence_intervals(est.V_hat, cov, ds.n, args.level)
    _dump_json(
        args.out,
        {
            "level": args.level,
            "n": ds.n,
            "states": [{"state": ci.state, "V_hat": float(est.V_hat[ci.state]), "lo": ci.lo, "hi": ci.hi} for ci in cis],
            "cov_V": cov.cov_V.tolist(),
        },
    )
    return EXIT_OK


def cmd_experiment(args):
    cfg = experiments.load_config(args.config)
    report = experiments.RUNNERS[args.kind](cfg, threads=args.threads)
    Path(args.out).write_text(report.to_csv())
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="ivope", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate", help="check a model file against the structural assumptions")
    p.add_argument("model", help="model JSON")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("scenario", help="write a random scenario model (with target policy) to JSON")
    p.add_argument("kind", choices=["identity", "confounded"])
    p.add_argument("--S", type=int, required=True)
    p.add_argument("--A", type=int, required=True)
    p.add_argument("--Z", type=int, default=None, help="instrument count (confounded only)")
    p.add_argument("--d", type=int, default=None, help="feature dimension (confounded only)")
    p.add_argument("--confound-strength", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--noise-halfwidth", type=float, default=None)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("gen", help="sample an offline dataset from a model")
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--emit-eps", action="store_true", help="append the confounder column (debug only)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("estimate", help="run the two-stage estimator")
    p.add_argument("--model", required=True, help="model JSON; only phi, gamma and pi are read")
    p.add_argument("--data", required=True)
    p.add_argument("--lambda", dest="ridge_lambda", type=float, default=0.0)
    p.add_argument("--policy", default=None, help="JSON with a 'pi' matrix, overrides the model's")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("infer", help="plug-in covariance and per-state confidence intervals")
    p.add_argument("--model-features", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--est", required=True)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("experiment", help="Monte Carlo studies")
    p.add_argument("kind", choices=sorted(experiments.RUNNERS))
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    if args.command == "scenario":
        if args.kind == "confounded" and args.Z is None:
            print("ivope scenario: error: confounded scenarios need --Z", file=sys.stderr)
            return EXIT_USAGE
        if args.noise_halfwidth is None:
            args.noise_halfwidth = 0.0 if args.kind == "identity" else 0.5
    if getattr(args, "threads", 1) < 1:
        print("ivope experiment: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE

    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    print("config: " + json.dumps(resolved, sort_keys=True), file=sys.stderr)
    try:
        return args.func(args)
    except DatasetFormatError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, KeyError) as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, json.JSONDecodeError) as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
