"""Command line entry point: ``driftlab <subcommand> [--config C] [--seed S] [--out DIR]``.

Exit codes: 0 success, 1 usage or configuration error, 2 experiment failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness, qp

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2

COMMANDS = {
    "meta-train": "meta-train the feature network and prior on the plant ensemble",
    "gather": "run chained information-gathering rounds and save adapted beliefs",
    "mpc-run": "closed-loop MPC with the configured adaptation schedule",
    "covariance-table": "covariance norms of the prior and adapted beliefs",
    "compare-adaptation": "closed-loop runs with no, offline and online adaptation",
    "qp-solve": "solve a QP stored in the text format of driftlab.qp.dump_problem",
    "report": "aggregate a runs.csv into per-condition medians",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser():
    parser = _Parser(prog="driftlab", description="Bayesian last-layer MPC experiments")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, text in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", default="demo", help="INI file or shipped config name [demo]")
        p.add_argument("--seed", type=int, action="append",
                       help="run only this seed (repeatable); default: the config's seeds")
        p.add_argument("--out", help="output directory (overrides DRIFTLAB_OUT and the config)")
        if name != "meta-train":
            p.add_argument("--checkpoint", help="model checkpoint (overrides the config)")
        if name == "qp-solve":
            p.add_argument("problem", help="problem file")
        if name == "report":
            p.add_argument("--runs", help="runs.csv to aggregate [OUT/runs.csv]")
    return parser


def _config(args):
    cfg = harness.load_config(args.config)
    if args.seed:
        cfg = replace(cfg, seeds=tuple(args.seed))
    if getattr(args, "checkpoint", None):
        cfg = replace(cfg, checkpoint=args.checkpoint)
    return cfg


def _run(args):
    if args.command == "qp-solve":
        problem = qp.load_problem(args.problem)
        res = qp.solve(problem)
        print(f"status {res.status}")
        print(f"iterations {res.iterations}")
        print(f"objective {problem.objective(res.x)!r}")
        print("x " + " ".join(repr(float(v)) for v in res.x))
        return EXIT_OK if res.solved else EXIT_FAILURE

    cfg = _config(args)
    out = harness.output_dir(cfg, args.out)
    if args.command == "meta-train":
        res = harness.train_checkpoint(cfg, out / "checkpoint.json", out / "training_curve.csv")
        print(f"{res.status}: checkpoint written to {out / 'checkpoint.json'}")
        return EXIT_OK if res.status == "Completed" else EXIT_FAILURE
    if args.command == "report":
        runs = Path(args.runs) if args.runs else out / "runs.csv"
        path = harness.report(harness.read_records(runs), out)
        print(path.read_text(), end="")
        return EXIT_OK

    net, prior = harness.load_model(cfg)
    if args.command == "gather":
        from .bayes import save_checkpoint

        for seed in cfg.seeds:
            beliefs, _ = harness.gather(cfg, net, prior, seed, out=out)
            save_checkpoint(out / f"belief_seed{seed}.json", net, beliefs[-1],
                            {"seed": seed, "rounds": cfg.rounds})
            totals = " ".join(f"{harness.covariance_norms(b)[-1]:.4g}" for b in beliefs)
            print(f"seed {seed}: total covariance norm per round {totals}")
        return EXIT_OK
    if args.command == "covariance-table":
        harness.run_covariance_study(cfg, net, prior, out)
        print((out / "covariance_table.csv").read_text(), end="")
        return EXIT_OK
    adaptations = ("none", "offline", "online") if args.command == "compare-adaptation" else None
    records = harness.run_drift_eval(cfg, adaptations, net, prior, out)
    path = harness.report(records, out)
    print(path.read_text(), end="")
    return EXIT_OK


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return _run(args)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"experiment failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
