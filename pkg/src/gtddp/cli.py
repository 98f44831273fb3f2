"""Command-line front end: ``gtddp {collect,train,solve,simulate,verify}``.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure
(stall, divergence, conditioning), 3 verification failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import io
from .errors import ConfigError, GtddpError, NonSaddleError, ParseError, StalledError
from .gp import fit
from .pipeline import build_cost, build_plant, collect, simulate, solve_game, train
from .solver import KNOWN_FAULTS, SolveResult

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 1 << 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gtddp", description="Learn residual dynamics, solve the min-max game, simulate.")
    p.add_argument("-v", "--verbose", action="store_true", help="log solver iterations")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment config (JSON)")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=_u64, help="master seed (overrides the config)")

    sp = sub.add_parser("collect", help="excite the plant and write a residual dataset")
    common(sp)
    sp = sub.add_parser("train", help="fit GP hyperparameters to a dataset")
    common(sp)
    sp.add_argument("--data", help="dataset CSV (default: <out>/dataset.csv)")
    sp = sub.add_parser("solve", help="solve the game and write the policy")
    common(sp)
    sp.add_argument("--model", help="model JSON from 'train'; without it the nominal model is used")
    sp = sub.add_parser("simulate", help="Monte-Carlo rollouts of a policy on the plant")
    common(sp)
    sp.add_argument("--policy", help="policy JSON (default: <out>/policy.json)")
    sp = sub.add_parser("verify", help="run the acceptance suite")
    common(sp, config_required=False)
    sp.add_argument("--only", help="comma-separated criterion numbers")
    sp.add_argument("--inject-fault", choices=KNOWN_FAULTS, help=argparse.SUPPRESS)
    return p


def _setup(args):
    cfg = cfgmod.load(args.config) if args.config else cfgmod.ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = Path(args.out if args.out else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def cmd_collect(args) -> int:
    cfg, out = _setup(args)
    data = collect(cfg)
    path = io.write_dataset(out / "dataset.csv", data)
    print(f"wrote {len(data)} samples to {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, out = _setup(args)
    data_path = Path(args.data) if args.data else out / "dataset.csv"
    data = io.read_dataset(data_path)
    if data.n_state != cfg.n_state or data.n_control != cfg.n_control:
        raise ConfigError(f"dataset has n={data.n_state}, m={data.n_control}; config expects n={cfg.n_state}, m={cfg.n_control}")
    hyper, lml = train(cfg, data)
    path = io.write_model(out / "model.json", hyper, data_path, lml)
    for d, v in enumerate(lml):
        print(f"dim {d:2d}: log marginal likelihood {v:.10g}")
    print(f"wrote {path}")
    return EXIT_OK


def _write_solution(out, res: SolveResult, gamma) -> None:
    io.write_policy(out / "policy.json", res, gamma)
    io.write_iteration_log(out / "iterations.csv", res.log)


def cmd_solve(args) -> int:
    cfg, out = _setup(args)
    setup = build_plant(cfg)
    gp = None
    if args.model:
        data, hyper = io.read_model(args.model)
        gp = fit(data, hyper)
    try:
        res = solve_game(cfg, setup, gp)
    except (StalledError, NonSaddleError) as exc:
        if getattr(exc, "result", None) is not None:
            _write_solution(out, exc.result, cfg.cost.gamma)
            print(f"best iterate written to {out / 'policy.json'}", file=sys.stderr)
        raise
    _write_solution(out, res, cfg.cost.gamma)
    cost = build_cost(cfg, setup)
    weighted = np.diag(cost.Q_f) > 0  # states left free at the final time are not reported
    err = np.abs(res.trajectory.x[-1] - cost.x_f)[weighted].max(initial=0.0)
    status = "converged" if res.converged else "stopped at the iteration limit"
    print(f"{status} after {res.n_accepted} accepted iterations; cost {res.trajectory.cost:.10g}; "
          f"max terminal deviation of weighted states {err:.3g}")
    print(f"wrote {out / 'policy.json'} and {out / 'iterations.csv'}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg, out = _setup(args)
    policy_path = Path(args.policy) if args.policy else out / "policy.json"
    policy = io.read_policy(policy_path)
    setup = build_plant(cfg)
    if policy.x_star.shape[1] != setup.n or policy.u_star.shape[1] != setup.m:
        raise ConfigError("policy dimensions do not match the configured plant")
    goal = build_cost(cfg, setup).x_f
    manifest = {"seed": cfg.seed, "config_sha256": cfg.hash(), "policy": str(policy_path)}
    ens_dir = out / "ensemble"
    try:
        ens = simulate(cfg, setup, policy)
    except GtddpError:
        io.write_json(_mkdir(ens_dir) / "manifest.json", dict(manifest, n_runs=cfg.sim.n_runs, all_failed=True))
        raise
    io.write_ensemble(ens_dir, ens, goal, manifest)
    k = min(3, setup.n)
    err = np.linalg.norm(ens.terminal_error(goal, slice(0, k)), axis=1)
    ok = err[~np.isnan(err)]
    print(f"{int(ens.ok.sum())}/{len(err)} runs completed; terminal error over the first {k} states: "
          f"mean {ok.mean():.4g}, std {ok.std():.4g}, max {ok.max():.4g}")
    print(f"wrote {ens_dir}")
    return EXIT_OK


def _mkdir(p: Path) -> Path:
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_verify(args) -> int:
    from .acceptance import QuadStudy, run_all

    cfg = cfgmod.load(args.config) if args.config else cfgmod.ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    select = None
    if args.only:
        try:
            select = [int(v) for v in args.only.split(",")]
        except ValueError:
            raise ConfigError("--only takes comma-separated criterion numbers") from None
        if any(not 1 <= v <= 8 for v in select):
            raise ConfigError("criteria are numbered 1 to 8")
    study = QuadStudy(cfg) if cfg.plant.name == "quadcopter" else QuadStudy()
    results = run_all(select, fault=args.inject_fault, study=study, report=lambda r: print(r.line(), flush=True))
    failed = [r.number for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed" + (f"; failed: {failed}" if failed else ""))
    return EXIT_VERIFY if failed else EXIT_OK


COMMANDS = {
    "collect": cmd_collect,
    "train": cmd_train,
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GtddpError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
