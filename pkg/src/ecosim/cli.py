"""Command-line entry point: ``ecosim {train,evaluate,sweep,plot,selftest}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from .agent import EcoAgent, RandomAgent
from .core import ConfigError
from .harness import (
    DEFAULT_LAMBDAS,
    DEFAULT_LRS,
    SCENARIO_NAMES,
    SweepResult,
    evaluation_row,
    lambda_sweep,
    load_scenario,
    train,
)

log = logging.getLogger("ecosim")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageProblem(Exception):
    """Bad command line; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageProblem(message)


def _floats(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ecosim", description="Recommender ecosystem simulator and EcoAgent trainer.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def scenario_flags(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--scenario", default="saturated_log",
                       help=f"built-in scenario ({', '.join(SCENARIO_NAMES)}) or a JSON path")
        g.add_argument("--config", help="scenario JSON file")

    def common(sp, seed_required=True):
        sp.add_argument("--seed", type=int, required=seed_required)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $ECOSIM_THREADS or 1)")
        sp.add_argument("-v", "--verbose", action="store_true")

    t = sub.add_parser("train", help="train one EcoAgent")
    scenario_flags(t)
    common(t)
    t.add_argument("--lambda", dest="lam", type=float, required=True)
    t.add_argument("--lr", type=float, default=0.03)
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--patience", type=int, default=30, help="early-stop patience; 0 disables")
    t.add_argument("--constant-baseline", action="store_true")

    e = sub.add_parser("evaluate", help="evaluate a checkpoint or the random agent")
    scenario_flags(e)
    common(e)
    e.add_argument("--agent", choices=("eco", "random"), default="eco")
    e.add_argument("--checkpoint", help="checkpoint prefix written by train (for --agent eco)")
    e.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="expected lambda of the checkpoint")
    e.add_argument("--rollouts", type=int, default=50)
    e.add_argument("--greedy-eval", action="store_true")
    e.add_argument("--trajectories", action="store_true",
                   help="also write every evaluation step as JSON lines")

    s = sub.add_parser("sweep", help="lambda x learning-rate sweep with figure data")
    scenario_flags(s)
    common(s)
    s.add_argument("--lambda", dest="lambdas", type=_floats, default=list(DEFAULT_LAMBDAS),
                   help="comma-separated lambda grid")
    s.add_argument("--lr", dest="lrs", type=_floats, default=list(DEFAULT_LRS),
                   help="comma-separated learning-rate grid")
    s.add_argument("--epochs", type=int, default=300)
    s.add_argument("--patience", type=int, default=30, help="early-stop patience; 0 disables")
    s.add_argument("--rollouts", type=int, default=50)
    s.add_argument("--greedy-eval", action="store_true")
    s.add_argument("--no-plots", action="store_true")

    pl = sub.add_parser("plot", help="re-render figures from a sweep directory")
    pl.add_argument("--in", dest="src", required=True, help="directory holding sweep.json")
    pl.add_argument("--out", required=True)
    pl.add_argument("-v", "--verbose", action="store_true")

    st = sub.add_parser("selftest", help="gradient and uplift-additivity checks")
    st.add_argument("--seeds", type=int, default=5)
    st.add_argument("-v", "--verbose", action="store_true")
    return p


def _threads(args) -> int:
    if getattr(args, "threads", None) is not None:
        n = args.threads
    else:
        raw = os.environ.get("ECOSIM_THREADS", "1")
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(f"ECOSIM_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    return n


def _scenario(args):
    return load_scenario(args.config if args.config else args.scenario)


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _check_lambda(lam):
    if lam is not None and not 0.0 <= lam <= 1.0:
        raise ConfigError(f"--lambda must lie in [0, 1], got {lam}")


def cmd_train(args) -> int:
    _check_lambda(args.lam)
    if args.epochs < 0:
        raise ConfigError("--epochs must be >= 0")
    scenario = _scenario(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(row):
        if row["epoch"] % 10 == 0:
            log.info("epoch %d user %.2f provider %.2f viable %.1f", row["epoch"],
                     row["user_reward"], row["provider_reward"], row["viable_providers"])

    res = train(scenario, args.lam, args.lr, args.epochs, args.seed,
                patience=args.patience or None, progress=progress,
                agent_overrides={"constant_baseline": args.constant_baseline})
    res.agent.save(out / "agent")
    if res.curves:
        with open(out / "curves.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(res.curves[0]), lineterminator="\n")
            w.writeheader()
            for row in res.curves:
                w.writerow({k: f"{v:.9g}" for k, v in row.items()})
    log.info("trained %d epochs; checkpoint at %s", len(res.curves), out / "agent")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _check_lambda(args.lam)
    if args.rollouts < 1:
        raise ConfigError("--rollouts must be >= 1")
    scenario = _scenario(args)
    if args.agent == "random":
        agent = RandomAgent()
    else:
        if not args.checkpoint:
            raise ConfigError("--checkpoint is required for --agent eco")
        agent = EcoAgent.load(args.checkpoint, expect_lambda=args.lam)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mode = "greedy" if args.greedy_eval else "sample"
    row = evaluation_row(agent, scenario, args.rollouts, args.seed, mode)
    _write_json(out / "metrics.json", row)
    if args.trajectories:
        from .harness import write_trajectories
        write_trajectories(agent, scenario, args.rollouts, args.seed, out / "trajectories.jsonl",
                           mode)
    log.info("user %.2f provider %.2f viable %.2f", row["user_accumulated_reward_mean"],
             row["provider_accumulated_reward_mean"], row["viable_providers_mean"])
    return EXIT_OK


def cmd_sweep(args) -> int:
    for lam in args.lambdas:
        _check_lambda(lam)
    if not args.lambdas or not args.lrs:
        raise ConfigError("--lambda and --lr grids must be nonempty")
    if any(lr <= 0 for lr in args.lrs):
        raise ConfigError("--lr values must be > 0")
    if args.rollouts < 1 or args.epochs < 0:
        raise ConfigError("--rollouts must be >= 1 and --epochs >= 0")
    scenario = _scenario(args)
    from .report import emit_report

    log.info("sweep %s: %d lambdas x %d learning rates", scenario.name, len(args.lambdas),
             len(args.lrs))
    result = lambda_sweep(scenario, args.lambdas, args.lrs, epochs=args.epochs, seed=args.seed,
                          rollouts=args.rollouts, patience=args.patience or None,
                          threads=_threads(args),
                          mode="greedy" if args.greedy_eval else "sample")
    sweep_json = (json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n").encode("utf-8")
    emit_report(result, args.out, plots=not args.no_plots,
                extra={"sweep.json": sweep_json, "scenario.json": scenario.to_json().encode()})
    log.info("wrote %s", args.out)
    return EXIT_OK


def cmd_plot(args) -> int:
    from .report import emit_report

    src = Path(args.src) / "sweep.json"
    if not src.exists():
        raise ConfigError(f"{src} not found")
    result = SweepResult.from_dict(json.loads(src.read_text(encoding="utf-8")))
    emit_report(result, args.out)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .checks import gradient_check, uplift_additivity

    ok = True
    for seed in range(args.seeds):
        for group, rep in gradient_check(seed).items():
            status = "ok" if rep.passed else "FAIL"
            ok &= rep.passed
            print(f"gradient {group:8s} seed {seed}: max rel err {rep.max_rel_error:.2e} {status}",
                  file=sys.stderr)
    for seed in range(3):
        res = uplift_additivity(seed)
        status = "ok" if res.passed() else "FAIL"
        ok &= res.passed()
        print(f"uplift additivity seed {seed}: max abs diff {res.max_abs_diff:.2e} {status}",
              file=sys.stderr)
    return EXIT_OK if ok else EXIT_RUNTIME


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "sweep": cmd_sweep,
            "plot": cmd_plot, "selftest": cmd_selftest}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageProblem as exc:
        print(f"ecosim: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose or args.command != "selftest"
                        else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"ecosim: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - report, do not trace, at the CLI boundary
        log.exception("runtime failure")
        print(f"ecosim: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(run())
