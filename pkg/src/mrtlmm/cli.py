"""Command-line entry point: ``mrtlmm <command> ...``.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import DataError, ModelSpec, build_design, load_csv, save_csv
from .harness import analyze, fccm_bias_demo, marginal_oracle, run_replication
from .inference import format_inference_table, inference_to_csv, satterthwaite_ci
from .lmm import FitOptions, NumericalError, fit, predict_random_effects
from .simulate import SimConfig, simulate_gm

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


def _objective(text: str) -> str:
    t = text.upper()
    if t not in ("ML", "REML"):
        raise argparse.ArgumentTypeError("objective must be ml or reml")
    return t


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _opts(args) -> FitOptions:
    return FitOptions(seed=args.seed)


def _cmd_simulate(args) -> None:
    cfg = SimConfig.from_json(args.config)
    if args.seed is not None:
        cfg = SimConfig(cfg.gm, cfg.n, cfg.T, args.seed, cfg.params)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(simulate_gm(cfg), out)
    print(f"wrote {cfg.n} individuals x {cfg.T} points to {out}")


def _cmd_fit(args) -> None:
    bundle = build_design(load_csv(args.data), ModelSpec.from_json(args.spec))
    res = fit(bundle, args.objective, _opts(args))
    rows = satterthwaite_ci(res, bundle, args.level)
    out = _out_dir(args)
    res.to_json(out / "fit.json")
    inference_to_csv(rows, out / "coefficients.csv")
    print(format_inference_table([rows], [res.objective]))
    for k, v in res.variance_components().items():
        print(f"{k} = {v:.6g}")
    if not res.converged:
        print("warning: optimizer did not converge", file=sys.stderr)


def _cmd_predict(args) -> None:
    bundle = build_design(load_csv(args.data), ModelSpec.from_json(args.spec))
    res = fit(bundle, args.objective, _opts(args))
    pred = predict_random_effects(bundle, res)
    out = _out_dir(args)
    pred.to_csv(out / "random_effects.csv")
    print(f"wrote predictions for {len(pred.ids)} individuals to {out / 'random_effects.csv'}")


def _cmd_replicate(args) -> None:
    cfg = SimConfig.from_json(args.config)
    if args.seed is not None:
        cfg = SimConfig(cfg.gm, cfg.n, cfg.T, args.seed, cfg.params)
    spec = ModelSpec.from_json(args.spec) if args.spec else None
    rep = run_replication(cfg, spec, args.reps, args.level, args.objective, args.workers)
    out = _out_dir(args)
    rep.to_csv(out / "replication.csv")
    table = rep.to_markdown()
    (out / "replication.md").write_text(table + "\n")
    (out / "replication.json").write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
    print(table)
    print(f"replicates used: {rep.n_reps} (non-converged {rep.n_nonconverged}, failed {rep.n_failed})")


def _cmd_oracle(args) -> None:
    res = marginal_oracle(args.beta0, args.beta1, args.sigma2_u, args.sigma2_x1, args.sigma2_eps, args.mc_n, args.seed)
    print(json.dumps(res.to_dict(), indent=2))
    if args.out:
        out = _out_dir(args)
        (out / "marginal_oracle.json").write_text(json.dumps(res.to_dict(), indent=2) + "\n")


def _cmd_fccm(args) -> None:
    demo = fccm_bias_demo(args.n, args.T, args.reps, args.seed, args.workers, args.level)
    table = demo.to_markdown()
    out = _out_dir(args)
    (out / "fccm_demo.md").write_text(table + "\n")
    demo.gm1.to_csv(out / "gm1.csv")
    demo.gm3.to_csv(out / "gm3.csv")
    print(table)


def _cmd_analyze(args) -> None:
    report = analyze(args.data, args.spec, args.objective, args.level, _opts(args), out_dir=args.out)
    print(report.summary())


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mrtlmm", description="Mixed models for micro-randomized trials.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed_default=0, out_default="out"):
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--out", default=out_default)

    def fitting(p):
        p.add_argument("--objective", type=_objective, default="REML", help="ml or reml")
        p.add_argument("--level", type=float, default=0.95)

    p = sub.add_parser("simulate", help="simulate a GM dataset from a SimConfig JSON")
    p.add_argument("config")
    common(p, seed_default=None, out_default="data.csv")
    p.set_defaults(func=_cmd_simulate)

    for name, func, text in (
        ("fit", _cmd_fit, "fit a model and report coefficients"),
        ("predict", _cmd_predict, "fit and write predicted random effects"),
        ("analyze", _cmd_analyze, "full and reduced fits, LRT and predictions"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("data", help="long-format CSV")
        p.add_argument("spec", help="ModelSpec JSON")
        common(p)
        fitting(p)
        p.set_defaults(func=func)

    p = sub.add_parser("replicate", help="Monte-Carlo replication study")
    p.add_argument("config", help="SimConfig JSON")
    p.add_argument("--spec", help="ModelSpec JSON (default: the model matching the GM)")
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--workers", type=int, default=1)
    common(p, seed_default=None)
    fitting(p)
    p.set_defaults(func=_cmd_replicate)

    p = sub.add_parser("oracle-marginal", help="Monte-Carlo marginal mean in the two-point model")
    p.add_argument("--beta0", type=float, default=0.0)
    p.add_argument("--beta1", type=float, default=1.0)
    p.add_argument("--sigma2-u", type=float, default=1.0)
    p.add_argument("--sigma2-x1", type=float, default=1.0)
    p.add_argument("--sigma2-eps", type=float, default=1.0)
    p.add_argument("--mc-n", type=int, default=10**6)
    common(p, out_default=None)
    p.set_defaults(func=_cmd_oracle)

    p = sub.add_parser("fccm-demo", help="GM1 vs GM3 bias contrast")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--T", type=int, default=30)
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--level", type=float, default=0.95)
    common(p)
    p.set_defaults(func=_cmd_fccm)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, json.JSONDecodeError, TypeError, ValueError) as exc:
        # DataError subclasses ValueError; anything else input-shaped lands here too
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ArithmeticError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
