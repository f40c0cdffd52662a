"""Command line: ``pipebalance run | compare | sweep | validate``.

Exit codes: 0 success, 2 invalid input, 3 infeasible placement.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .balancers import BalancerKind
from .errors import InfeasibleError, PipeBalanceError
from .harness import compare, emit, read_jsonl, run_scenario, write_wallclock
from .scenario import load_scenario
from .simulator import write_chrome_trace

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE = 0, 2, 3
OUT_ENV = "PIPEBALANCE_OUT"
log = logging.getLogger("pipebalance")


def _out_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get(OUT_ENV) or "runs")


def _run_one(path: str, seed: int | None, balancer: str | None, out_root: str, trace: bool) -> dict:
    scenario = load_scenario(path)
    if seed is not None:
        scenario = scenario.with_seed(seed)
    if balancer is not None:
        scenario = scenario.with_balancer(balancer)
    report = run_scenario(scenario)
    out = Path(out_root) / f"{scenario.name}-{report.balancer}-s{scenario.seed}"
    out.mkdir(parents=True, exist_ok=True)
    emit(report, "jsonl", out / "run.jsonl")
    emit(report, "csv", out / "run.csv")
    write_wallclock(report, out / "run.wallclock.csv")
    if trace and report.last_trace is not None:
        write_chrome_trace(report.last_trace, out / "trace.json", f"{scenario.name} final iteration")
    s = report.summary
    return {"scenario": scenario.name, "balancer": report.balancer, "out": str(out),
            "mean_makespan": s["mean_makespan"], "mean_bubble_ratio": s["mean_bubble_ratio"],
            "avg_active_workers": s["avg_active_workers"]}


def _print_run(row: dict) -> None:
    print(f"{row['scenario']:<24} {row['balancer']:<20} makespan {row['mean_makespan']:.6g}s  "
          f"bubble {row['mean_bubble_ratio']:.4f}  workers {row['avg_active_workers']:.2f}  -> {row['out']}")


def _code(exc: Exception) -> int:
    return EXIT_INFEASIBLE if isinstance(exc, InfeasibleError) else EXIT_INVALID


def cmd_run(args) -> int:
    kinds = args.balancer or [None]
    for kind in kinds:
        _print_run(_run_one(args.scenario, args.seed, kind, str(_out_root(args.out)), args.trace))
    return EXIT_OK


def cmd_validate(args) -> int:
    scenario = load_scenario(args.scenario)
    print(f"ok: {scenario.name} ({len(scenario.layers)} layers, {len(scenario.workers)} workers, "
          f"case {scenario.case.tag}, hash {scenario.content_hash[:16]})")
    return EXIT_OK


def cmd_compare(args) -> int:
    base = read_jsonl(Path(args.baseline) / "run.jsonl")
    cands = [read_jsonl(Path(c) / "run.jsonl") for c in args.candidates]
    result = compare(base, *cands)
    for label, sp in result.speedups.items():
        print(f"{label:<24} speedup {sp:.4f}x over {result.baseline}")
    print(f"best: {result.best_kind} {result.best_speedup:.4f}x")
    if args.json:
        print(json.dumps({"baseline": result.baseline, "speedups": result.speedups,
                          "best_kind": result.best_kind, "best_speedup": result.best_speedup}))
    return EXIT_OK


def cmd_sweep(args) -> int:
    paths = sorted(glob.glob(args.pattern, recursive=True))
    if not paths:
        log.error("no scenario files match %s", args.pattern)
        return EXIT_INVALID
    jobs = [(p, args.seed, k, str(_out_root(args.out)), args.trace)
            for p in paths for k in (args.balancer or [None])]
    worst = EXIT_OK
    with ProcessPoolExecutor(max_workers=args.parallel) as pool:
        futures = [(job, pool.submit(_run_one, *job)) for job in jobs]
        for job, fut in futures:
            try:
                _print_run(fut.result())
            except PipeBalanceError as exc:
                log.error("%s: %s", job[0], exc)
                worst = max(worst, _code(exc))
    return worst


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pipebalance",
                                description="Simulate load balancing of dynamic pipeline-parallel training.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    kinds = [k.value for k in BalancerKind]

    r = sub.add_parser("run", help="run one scenario file")
    r.add_argument("scenario")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
    r.add_argument("--balancer", action="append", choices=kinds,
                   help="override the balancer kind; repeat to run several")
    r.add_argument("--trace", action="store_true", help="write a Chrome trace of the final iteration")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="speedup of candidate run dirs over a baseline run dir")
    c.add_argument("baseline")
    c.add_argument("candidates", nargs="+")
    c.add_argument("--json", action="store_true", help="also print the result as JSON")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep", help="run every scenario matching a glob")
    s.add_argument("pattern")
    s.add_argument("--parallel", type=int, default=os.cpu_count() or 1)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--balancer", action="append", choices=kinds)
    s.add_argument("--trace", action="store_true")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("validate", help="check a scenario file against the schema")
    v.add_argument("scenario")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except PipeBalanceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _code(exc)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
