"""Scenario runner: advance dynamism, profile, rebalance, migrate, re-pack, simulate.

Every iteration produces one flat record. Rebalance iterations also carry an
``event`` object with the balancer's view (measured basis), migration volume,
diffusion telemetry and any re-pack. Wall-clock decision times are kept out of
the records so that identical seeds give byte-identical output; they live in
``RunReport.wallclock`` and a separate file.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import dynamism
from .balancers import (DYNAMIC_KINDS, BalancerKind, MigrationPlan, diff_moves, initial_assignment,
                        measured_loads, rebalance, take_profile)
from .errors import InfeasibleError, ValidationError
from .repack import apply_repack, plan_repack_for
from .scenario import Scenario
from .simulator import (IterationTrace, backward_slack, bubble_ratio, migration_overhead,
                        simulate_iteration, with_overheads)
from .workload import (Assignment, Basis, bottleneck, imbalance, layer_costs, loads_from_costs,
                       stage_memory, validate_assignment)

SCHEMA_VERSION = "pipebalance.run/1"
CSV_COLUMNS = (
    "iteration", "delta_l", "delta_l_before", "delta_l_after", "bottleneck", "bubble_ratio",
    "bubble_ratio_overheads_busy", "makespan", "pipeline_makespan", "throughput_tokens_per_sec",
    "active_workers", "profiling_s", "balancing_s", "migration_s", "rebalanced", "layers_moved",
    "retained_params_fraction",
)
_PROFILE_STREAM = 0x9F0F


@dataclass
class RunReport:
    scenario_name: str
    scenario_hash: str
    balancer: str
    seed: int
    records: list[dict[str, Any]]
    summary: dict[str, Any]
    wallclock: list[dict[str, float]] = field(default_factory=list)
    last_trace: IterationTrace | None = field(default=None, repr=False, compare=False)

    @property
    def events(self) -> list[dict[str, Any]]:
        return [r["event"] for r in self.records if r.get("event")]


@dataclass(frozen=True)
class CompareResult:
    baseline: str
    speedups: dict[str, float]
    best_kind: str
    best_speedup: float


def _imb(assignment: Assignment, costs: Sequence[float]) -> tuple[float, float]:
    loads = loads_from_costs(assignment, costs)
    return imbalance(loads).delta_l, bottleneck(loads)


def _moves_cost(moves, layers, states, scenario: Scenario, slack) -> float:
    return migration_overhead(moves, layers, states, scenario.pipeline, slack)


def _balance(profile, scenario: Scenario, assignment, states, workers):
    plan = rebalance(profile, scenario.balancer, assignment, scenario.layers, states, workers,
                     gamma=scenario.gamma, max_rounds=scenario.max_rounds,
                     optimizer_state_factor=scenario.pipeline.optimizer_state_factor)
    basis = scenario.balancer.basis
    before = imbalance(measured_loads(profile, basis, assignment, scenario.layers, states)).delta_l
    after = imbalance(measured_loads(profile, basis, plan.resulting_assignment, scenario.layers,
                                     states)).delta_l
    return plan, before, after


def _telemetry(plan: MigrationPlan) -> dict[str, Any] | None:
    t = plan.telemetry
    if t is None:
        return None
    return {"rounds": t.rounds, "reason": t.reason, "converged": t.converged,
            "potential_first": t.potential_per_round[0], "potential_last": t.potential_per_round[-1]}


def run_scenario(scenario: Scenario, *, verify_idempotent: bool = False) -> RunReport:
    """Run every iteration of ``scenario``; deterministic for a fixed seed.

    With ``verify_idempotent`` each rebalance is repeated on the same profile
    and the event records whether that second call proposed no moves.
    """
    kind = scenario.balancer
    if scenario.repack.enabled and kind.is_static:
        raise ValidationError(f"repack needs a dynamic balancer, got {kind.value}")
    layers = scenario.layers
    workers = list(scenario.workers)
    assignment = initial_assignment(kind, layers, workers)
    snap = dynamism.initial_snapshot(layers)
    try:
        validate_assignment(assignment, layers, snap.states, workers)
    except ValidationError as exc:
        raise InfeasibleError(f"initial {kind.value} placement does not fit: {exc}", 0) from exc

    cfg = scenario.pipeline
    tokens = cfg.tokens_per_microbatch * cfg.n_microbatches * cfg.data_parallel_ways
    total_params = float(sum(l.param_count for l in layers))
    basis = kind.basis
    records: list[dict[str, Any]] = []
    wallclock: list[dict[str, float]] = []
    cache_key = None
    trace = None
    for k in range(1, scenario.iterations + 1):
        snap = dynamism.next_snapshot(scenario.case, snap, k, scenario.seed, layers)
        states = snap.states
        time_costs = layer_costs(layers, states, Basis.TIME)
        basis_costs = time_costs if basis is Basis.TIME else layer_costs(layers, states, basis)
        dl_before, _ = _imb(assignment, basis_costs)
        dl_after = dl_before
        prof_s = mig_s = 0.0
        moved = 0
        event = None

        if not kind.is_static and k % scenario.rebalance_interval == 0:
            pre = simulate_iteration(assignment, layers, states, cfg)
            prof_s = scenario.profiling_cost_fraction * pre.makespan
            rng = np.random.default_rng([scenario.seed, k, _PROFILE_STREAM])
            profile = take_profile(assignment, layers, states, rng, cfg.profile_noise, prof_s)
            slack = backward_slack(pre)
            try:
                plan, m_before, m_after = _balance(profile, scenario, assignment, states, workers)
            except InfeasibleError as exc:
                exc.iteration = k
                raise
            event = {"measured_basis": basis.value, "measured_delta_l_before": m_before,
                     "measured_delta_l_after": m_after, "moves": len(plan.moves),
                     "bytes_moved": plan.bytes_moved, "diffusion": _telemetry(plan)}
            decision = plan.decision_time
            if verify_idempotent:
                again = rebalance(profile, kind, plan.resulting_assignment, layers, states, workers,
                                  gamma=scenario.gamma, max_rounds=scenario.max_rounds)
                event["idempotent"] = not again.moves
            mig_s += _moves_cost(plan, layers, states, scenario, slack)
            moved += len(plan.moves)
            assignment = plan.resulting_assignment

            if scenario.repack.enabled:
                cap = min(w.memory_capacity for w in workers if w.active)
                max_mem = cap * scenario.repack.headroom
                rp = plan_repack_for(assignment, stage_memory(assignment, layers, states),
                                     scenario.repack.target_num_workers, max_mem,
                                     scenario.repack.contiguous)
                if rp.transfers:
                    merged, workers = apply_repack(rp, assignment, workers,
                                                   allow_nonphysical=not rp.contiguous)
                    repack_moves = diff_moves(assignment, merged)
                    mig_s += _moves_cost(repack_moves, layers, states, scenario, slack)
                    mig_s += scenario.repack.restart_cost
                    moved += len(repack_moves)
                    assignment = merged
                    plan2, r_before, r_after = _balance(profile, scenario, assignment, states, workers)
                    mig_s += _moves_cost(plan2, layers, states, scenario, slack)
                    moved += len(plan2.moves)
                    decision += plan2.decision_time
                    assignment = plan2.resulting_assignment
                    event["repack"] = {"released": [{"iteration": k, "worker_id": w, "reason": "repack"}
                                                    for w in rp.released_ids],
                                       "layers_moved": len(repack_moves),
                                       "measured_delta_l_before": r_before,
                                       "measured_delta_l_after": r_after}
            validate_assignment(assignment, layers, states, workers)
            dl_after, _ = _imb(assignment, basis_costs)
            wallclock.append({"iteration": k, "decision_s": decision})

        key = (assignment, states)
        if key != cache_key:
            trace = simulate_iteration(assignment, layers, states, cfg)
            cache_key = key
        full = with_overheads(trace, prof_s, mig_s)
        delta_l, bneck = _imb(assignment, time_costs)
        retained = math.fsum(l.param_count * s.param_multiplier for l, s in zip(layers, states))
        records.append({
            "iteration": k,
            "delta_l": delta_l,
            "delta_l_before": dl_before,
            "delta_l_after": dl_after,
            "bottleneck": bneck,
            "bubble_ratio": bubble_ratio(full),
            "bubble_ratio_overheads_busy": bubble_ratio(full, overheads_as_busy=True),
            "makespan": full.makespan,
            "pipeline_makespan": trace.makespan,
            "throughput_tokens_per_sec": tokens / full.makespan,
            "active_workers": assignment.n_stages,
            "profiling_s": prof_s,
            "balancing_s": 0.0,
            "migration_s": mig_s,
            "rebalanced": event is not None,
            "layers_moved": moved,
            "retained_params_fraction": retained / total_params,
            "event": event,
        })
    report = RunReport(scenario.name, scenario.content_hash, kind.value, scenario.seed, records,
                       summarize(records, tokens), wallclock)
    report.last_trace = full
    return report


def summarize(records: Sequence[dict[str, Any]], tokens_per_iteration: float) -> dict[str, Any]:
    n = len(records)
    total_time = math.fsum(r["makespan"] for r in records)
    per_worker = [r["throughput_tokens_per_sec"] / r["active_workers"] for r in records]
    last = records[-1]
    return {
        "iterations": n,
        "mean_makespan": total_time / n,
        "mean_pipeline_makespan": math.fsum(r["pipeline_makespan"] for r in records) / n,
        "mean_bubble_ratio": math.fsum(r["bubble_ratio"] for r in records) / n,
        "mean_bubble_ratio_overheads_busy": math.fsum(r["bubble_ratio_overheads_busy"] for r in records) / n,
        "mean_delta_l": math.fsum(r["delta_l"] for r in records) / n,
        "mean_throughput": tokens_per_iteration * n / total_time,
        "throughput_per_worker": math.fsum(per_worker) / n,
        "final_throughput_per_worker": per_worker[-1],
        "avg_active_workers": math.fsum(r["active_workers"] for r in records) / n,
        "final_active_workers": last["active_workers"],
        "rebalance_events": sum(1 for r in records if r["rebalanced"]),
        "layers_moved": sum(r["layers_moved"] for r in records),
        "overheads": {"profiling": math.fsum(r["profiling_s"] for r in records),
                      "balancing": math.fsum(r["balancing_s"] for r in records),
                      "migration": math.fsum(r["migration_s"] for r in records)},
        "speedup_vs_baseline": None,
    }


def compare(baseline: RunReport, *candidates: RunReport) -> CompareResult:
    """Speedup of each candidate over the baseline, by mean iteration time; best-of reported."""
    if not candidates:
        raise ValidationError("compare needs at least one candidate run")
    speedups: dict[str, float] = {}
    for cand in candidates:
        if cand.scenario_hash != baseline.scenario_hash or cand.seed != baseline.seed:
            raise ValidationError(f"run {cand.balancer!r} (hash {cand.scenario_hash[:12]}, seed "
                                  f"{cand.seed}) does not pair with the baseline (hash "
                                  f"{baseline.scenario_hash[:12]}, seed {baseline.seed})")
        label = cand.balancer
        i = 2
        while label in speedups:
            label = f"{cand.balancer}#{i}"
            i += 1
        speedups[label] = baseline.summary["mean_makespan"] / cand.summary["mean_makespan"]
    best = max(speedups, key=lambda k: (speedups[k], k))
    return CompareResult(baseline.balancer, speedups, best, speedups[best])


# -- emission ----------------------------------------------------------------


def _header(report: RunReport) -> dict[str, Any]:
    return {"schema": SCHEMA_VERSION, "scenario": report.scenario_name,
            "scenario_hash": report.scenario_hash, "balancer": report.balancer, "seed": report.seed,
            "columns": list(CSV_COLUMNS) + ["event"]}


def _summary_path(path: Path) -> Path:
    return path.with_name(path.stem + ".summary.json")


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text, newline="")
    except OSError as exc:
        raise type(exc)(exc.errno, f"cannot write run output: {exc.strerror}", str(path)) from exc


def _csv_value(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    return repr(v) if isinstance(v, float) else str(v)


def emit(report: RunReport, fmt: str, path: str | Path) -> list[Path]:
    """Write records as JSONL (schema header first) or CSV, plus ``<stem>.summary.json``."""
    path = Path(path)
    if fmt == "jsonl":
        lines = [json.dumps(_header(report))] + [json.dumps(r) for r in report.records]
        _write(path, "\n".join(lines) + "\n")
    elif fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf)  # RFC-4180: CRLF rows, minimal quoting
        w.writerow(CSV_COLUMNS)
        for r in report.records:
            w.writerow([_csv_value(r[c]) for c in CSV_COLUMNS])
        _write(path, buf.getvalue())
    else:
        raise ValidationError(f"unknown output format {fmt!r}; use jsonl or csv")
    summary = {"scenario": report.scenario_name, "scenario_hash": report.scenario_hash,
               "balancer": report.balancer, "seed": report.seed, **report.summary}
    spath = _summary_path(path)
    _write(spath, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return [path, spath]


def write_wallclock(report: RunReport, path: str | Path) -> Path:
    path = Path(path)
    lines = ["iteration,decision_s"] + [f"{w['iteration']},{w['decision_s']!r}" for w in report.wallclock]
    _write(path, "\n".join(lines) + "\n")
    return path


def read_jsonl(path: str | Path) -> RunReport:
    """Parse a JSONL run (and its sibling summary) back into a report."""
    path = Path(path)
    with path.open() as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != SCHEMA_VERSION:
            raise ValidationError(f"{path}: unsupported schema {header.get('schema')!r}")
        records = [json.loads(line) for line in fh if line.strip()]
    spath = _summary_path(path)
    summary = json.loads(spath.read_text()) if spath.exists() else summarize(records, 0.0)
    for key in ("scenario", "scenario_hash", "balancer", "seed"):
        summary.pop(key, None)
    return RunReport(header["scenario"], header["scenario_hash"], header["balancer"], header["seed"],
                     records, summary)


def run_many(scenarios: Iterable[Scenario], **kwargs) -> list[RunReport]:
    return [run_scenario(s, **kwargs) for s in scenarios]


def best_dynamic(scenario: Scenario, kinds: Sequence[BalancerKind] | None = None,
                 **kwargs) -> tuple[RunReport, dict[str, RunReport]]:
    """Run the scenario under each dynamic kind; return the fastest run and all runs."""
    runs = {k.value: run_scenario(scenario.with_balancer(k), **kwargs) for k in (kinds or DYNAMIC_KINDS)}
    best = min(runs.values(), key=lambda r: (r.summary["mean_makespan"], r.balancer))
    return best, runs
