"""Command-line entry point: ``run``, ``solve``, ``losses`` and ``schedule``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .economy import DEMAND_METHODS, load_economy
from .equilibrium import MarketOutcome, certify_ce, reference_equilibrium, solve_ce
from .errors import ContractError
from .harness import emit_csv, emit_summary, load_config, run_experiment
from .learner import init_length, init_schedule
from .losses import ce_gaps, loss_fd, loss_pe_exact_small

LOG_ENV = "EELEARN_LOG"


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    out = Path(args.out or config.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    result = run_experiment(config)
    emit_csv(result.records, out / "rounds.csv")
    emit_summary(result.records, out / "summary.csv")
    for run in result.runs:
        a, b = run.events.frequencies()
        last = run.records[-1]
        logging.info("seed %d: L_ce=%.4f L_fd=%.4f freq(A)=%.3f freq(B)=%.3f",
                     run.run_id, last.cum_l_ce, last.cum_l_fd_upper, a, b)
    print(f"wrote {out / 'rounds.csv'} and {out / 'summary.csv'}")
    return 0


def cmd_solve(args: argparse.Namespace) -> int:
    economy = load_economy(args.economy)
    if args.solver == "pr":
        kwargs = {"iters": args.iters or 200, "tol": args.tol if args.tol is not None else 1e-10}
    else:
        kwargs = {"max_iters": args.iters or 5000, "tol": args.tol if args.tol is not None else 1e-6}
    out = solve_ce(economy.utilities, economy.endowments, solver=args.solver, **kwargs)
    cert = certify_ce(out, economy.utilities, economy.endowments, eps=args.eps)
    res = MarketOutcome(out.allocation, out.prices, out.iterations, out.residual, out.warning, cert)
    _print(res.to_dict())
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(res.to_dict(), fh, indent=2, sort_keys=True)
    return 0 if cert.is_equilibrium else 1


def _load_outcome(path: str) -> MarketOutcome:
    with open(path) as fh:
        d = json.load(fh)
    return MarketOutcome(allocation=np.asarray(d["allocation"], dtype=float),
                         prices=np.asarray(d["prices"], dtype=float))


def cmd_losses(args: argparse.Namespace) -> int:
    economy = load_economy(args.economy)
    outcome = _load_outcome(args.outcome)
    rng = np.random.default_rng(args.seed)
    gaps, used = ce_gaps(economy, outcome, args.demand, args.mc_budget, rng)
    ref = reference_equilibrium(economy.utilities, economy.endowments)
    report = loss_fd(economy, outcome.allocation, ref, l_ce=float(gaps.sum()), mc_samples_used=used)
    d = report.to_dict()
    if args.pe_grid_step:
        d["l_pe_exact"] = loss_pe_exact_small(economy, outcome.allocation, args.pe_grid_step)
        d["pe_grid_step"] = args.pe_grid_step
    d["per_agent_ce_gap"] = gaps.tolist()
    _print(d)
    return 0


def cmd_schedule(args: argparse.Namespace) -> int:
    n, m = args.n, args.m
    print(f"# {init_length(n, m)} rounds; row = agent, column = resource")
    for t in range(1, init_length(n, m) + 1):
        x = init_schedule(n, m, t)
        rows = " | ".join(" ".join(str(int(v)) for v in row) for row in x)
        print(f"{t:4d}: {rows}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eelearn", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a seeded experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="output directory (default: config 'out' or cwd)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("solve", help="compute a competitive equilibrium for an economy file")
    p.add_argument("--economy", required=True)
    p.add_argument("--solver", choices=("pr", "tatonnement"), default="pr")
    p.add_argument("--iters", type=int, default=None, help="default 200 (pr) or 5000 (tatonnement)")
    p.add_argument("--tol", type=float, default=None, help="default 1e-10 (pr) or 1e-6 (tatonnement)")
    p.add_argument("--eps", type=float, default=1e-3, help="certificate tolerance")
    p.add_argument("--out", default=None, help="also write the result JSON here")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("losses", help="evaluate losses of an allocation/price pair")
    p.add_argument("--economy", required=True)
    p.add_argument("--outcome", required=True, help="JSON with 'allocation' and 'prices'")
    p.add_argument("--demand", choices=DEMAND_METHODS, default="monte_carlo")
    p.add_argument("--mc-budget", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pe-grid-step", type=float, default=None)
    p.set_defaults(func=cmd_losses)

    p = sub.add_parser("schedule", help="print the initialization schedule")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.set_defaults(func=cmd_schedule)
    return ap


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
