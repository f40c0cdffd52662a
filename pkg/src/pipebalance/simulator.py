"""Discrete-event simulation of one pipeline-parallel training iteration.

Each stage runs a fixed program of forward/backward micro-batch ops (GPipe or
1F1B). An op starts once its stage is free and its input has arrived; sending
an activation or gradient keeps the sender busy for ``p2p_latency +
bytes / p2p_bandwidth``. Events are ordered by (time, worker, kind, sequence)
so identical inputs give identical traces.
"""

from __future__ import annotations

import enum
import heapq
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from .errors import ValidationError
from .workload import (Assignment, LayerSpec, LayerState, effective_bwd, effective_fwd,
                       gradient_bytes, layer_payload_bytes)

COMPUTE_KINDS = frozenset({"fwd", "bwd"})
OVERHEAD_KINDS = frozenset({"migrate", "profile"})
_KIND_RANK = {"fwd": 0, "bwd": 1, "comm": 2}


class Schedule(str, enum.Enum):
    GPIPE = "gpipe"
    ONE_F_ONE_B = "1f1b"


class MigrationOverlap(str, enum.Enum):
    SERIAL = "serial"
    OVERLAP_BACKWARD = "overlap_backward"


@dataclass(frozen=True)
class PipelineConfig:
    n_microbatches: int = 4
    schedule: Schedule = Schedule.GPIPE
    p2p_latency: float = 0.0
    p2p_bandwidth: float = 16e9
    activation_bytes_per_microbatch: float = 0.0
    data_parallel_ways: int = 1
    allreduce_bandwidth: float = 16e9
    allreduce_latency: float = 0.0
    migration_overlap: MigrationOverlap = MigrationOverlap.SERIAL
    optimizer_state_factor: float = 3.0
    csr_index_factor: float = 2.0
    tokens_per_microbatch: int = 4096
    profile_noise: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "schedule", Schedule(self.schedule))
        object.__setattr__(self, "migration_overlap", MigrationOverlap(self.migration_overlap))
        if self.n_microbatches < 1:
            raise ValidationError("n_microbatches must be >= 1")
        if self.data_parallel_ways < 1:
            raise ValidationError("data_parallel_ways must be >= 1")
        if self.p2p_bandwidth <= 0 or self.allreduce_bandwidth <= 0:
            raise ValidationError("bandwidths must be > 0")
        if self.p2p_latency < 0 or self.allreduce_latency < 0 or self.activation_bytes_per_microbatch < 0:
            raise ValidationError("latencies and activation bytes must be >= 0")

    @property
    def hop_time(self) -> float:
        return self.p2p_latency + self.activation_bytes_per_microbatch / self.p2p_bandwidth


@dataclass(frozen=True)
class Interval:
    start: float
    end: float
    kind: str
    microbatch: int = -1

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class IterationTrace:
    """Per-worker intervals (idle gaps included) tiling ``[0, makespan]``."""

    worker_ids: tuple[int, ...]
    intervals: tuple[tuple[Interval, ...], ...]
    makespan: float

    def busy_time(self, worker_index: int, kinds=COMPUTE_KINDS | {"comm"}) -> float:
        return math.fsum(iv.duration for iv in self.intervals[worker_index] if iv.kind in kinds)

    def compute_time(self) -> float:
        return math.fsum(iv.duration for per in self.intervals for iv in per if iv.kind in COMPUTE_KINDS)

    def last_compute_end(self, worker_index: int) -> float:
        ends = [iv.end for iv in self.intervals[worker_index] if iv.kind != "idle"]
        return max(ends) if ends else 0.0


@dataclass(frozen=True)
class BubbleReport:
    bubble_ratio: float
    bubble_ratio_overheads_busy: float
    per_worker_idle: tuple[float, ...]
    throughput_tokens_per_sec: float
    overhead_breakdown: Mapping[str, float] = field(default_factory=dict)


def _programs(schedule: Schedule, n: int, m: int) -> list[list[tuple[str, int]]]:
    progs = []
    for s in range(n):
        if schedule is Schedule.GPIPE:
            prog = [("fwd", b) for b in range(m)] + [("bwd", b) for b in range(m)]
        else:
            warm = min(n - s - 1, m)
            prog = [("fwd", b) for b in range(warm)]
            for i in range(m - warm):
                prog += [("fwd", warm + i), ("bwd", i)]
            prog += [("bwd", b) for b in range(m - warm, m)]
        progs.append(prog)
    return progs


def _fill_idle(busy: list[Interval], makespan: float) -> tuple[Interval, ...]:
    out, t = [], 0.0
    for iv in sorted(busy, key=lambda x: (x.start, x.end)):
        if iv.start > t:
            out.append(Interval(t, iv.start, "idle"))
        out.append(iv)
        t = max(t, iv.end)
    if makespan > t:
        out.append(Interval(t, makespan, "idle"))
    return tuple(out)


def simulate_stages(fwd: Sequence[float], bwd: Sequence[float], config: PipelineConfig,
                    worker_ids: Sequence[int] | None = None) -> IterationTrace:
    """Event-driven run of the stage programs for per-stage forward/backward costs."""
    n = len(fwd)
    if n == 0:
        raise ValidationError("cannot simulate an empty pipeline")
    if len(bwd) != n:
        raise ValidationError("fwd and bwd stage costs differ in length")
    if any(c < 0 for c in (*fwd, *bwd)):
        raise ValidationError("stage costs must be non-negative")
    worker_ids = tuple(worker_ids) if worker_ids is not None else tuple(range(n))
    m = config.n_microbatches
    hop = config.hop_time
    progs = _programs(config.schedule, n, m)
    ptr = [0] * n
    running = [False] * n
    arrived: dict[tuple[str, int, int], float] = {}
    busy: list[list[Interval]] = [[] for _ in range(n)]
    heap: list = []
    seq = 0

    def push(t, s, kind, payload):
        nonlocal seq
        heapq.heappush(heap, (t, worker_ids[s], _KIND_RANK[kind], seq, s, payload))
        seq += 1

    def try_start(s, now):
        if running[s] or ptr[s] == len(progs[s]):
            return
        kind, mb = progs[s][ptr[s]]
        if kind == "fwd" and s > 0 and ("fwd", s, mb) not in arrived:
            return
        if kind == "bwd" and s < n - 1 and ("bwd", s, mb) not in arrived:
            return
        ptr[s] += 1
        running[s] = True
        dur = fwd[s] if kind == "fwd" else bwd[s]
        push(now + dur, s, kind, ("done", kind, mb, now))

    for s in range(n):
        try_start(s, 0.0)
    while heap:
        t, _, _, _, s, (what, kind, mb, began) = heapq.heappop(heap)
        if what == "done":
            if t > began:
                busy[s].append(Interval(began, t, kind, mb))
            dst = s + 1 if kind == "fwd" else s - 1
            if 0 <= dst < n:
                if hop > 0:
                    push(t + hop, s, "comm", ("sent", kind, mb, t))
                    continue
                arrived[(kind, dst, mb)] = t
                running[s] = False
                try_start(dst, t)
            running[s] = False
            try_start(s, t)
        else:
            busy[s].append(Interval(began, t, "comm", mb))
            dst = s + 1 if kind == "fwd" else s - 1
            arrived[(kind, dst, mb)] = t
            running[s] = False
            try_start(dst, t)
            try_start(s, t)

    if any(p != len(prog) for p, prog in zip(ptr, progs)):
        raise RuntimeError("pipeline schedule deadlocked")  # unreachable for GPipe/1F1B programs
    makespan = max((iv.end for per in busy for iv in per), default=0.0)
    return IterationTrace(worker_ids, tuple(_fill_idle(b, makespan) for b in busy), makespan)


def stage_costs(assignment: Assignment, layers: Sequence[LayerSpec],
                states: Sequence[LayerState]) -> tuple[list[float], list[float]]:
    ranges = assignment.stage_ranges()
    fwd = [math.fsum(effective_fwd(layers[i], states[i]) for i in r) for r in ranges]
    bwd = [math.fsum(effective_bwd(layers[i], states[i]) for i in r) for r in ranges]
    return fwd, bwd


def stage_gradient_bytes(assignment: Assignment, layers: Sequence[LayerSpec],
                         states: Sequence[LayerState]) -> list[float]:
    return [math.fsum(gradient_bytes(layers[i], states[i]) for i in r) for r in assignment.stage_ranges()]


def simulate_iteration(assignment: Assignment, layers: Sequence[LayerSpec],
                       states: Sequence[LayerState], config: PipelineConfig) -> IterationTrace:
    """Simulate one iteration; adds the data-parallel gradient all-reduce when ways > 1."""
    if assignment.n_stages == 0:
        raise ValidationError("cannot simulate an empty pipeline")
    fwd, bwd = stage_costs(assignment, layers, states)
    trace = simulate_stages(fwd, bwd, config, assignment.stage_to_worker)
    if config.data_parallel_ways > 1:
        trace = apply_allreduce(trace, config, stage_gradient_bytes(assignment, layers, states))
    return trace


def _allreduce_duration(config: PipelineConfig, grad_bytes: float) -> float:
    return (config.allreduce_latency * math.log2(config.data_parallel_ways)
            + 2.0 * grad_bytes / config.allreduce_bandwidth)


def apply_allreduce(trace: IterationTrace, config: PipelineConfig,
                    grad_bytes: Sequence[float] | None = None) -> IterationTrace:
    """Append the end-of-iteration gradient all-reduce.

    The collective starts when the slowest worker finishes its last backward;
    earlier finishers idle until then.
    """
    if config.data_parallel_ways <= 1:
        return trace
    n = len(trace.worker_ids)
    grad_bytes = list(grad_bytes) if grad_bytes is not None else [0.0] * n
    start = max(trace.last_compute_end(i) for i in range(n))
    per = []
    end_all = start
    for i in range(n):
        busy = [iv for iv in trace.intervals[i] if iv.kind != "idle"]
        dur = _allreduce_duration(config, grad_bytes[i])
        if dur > 0:
            busy.append(Interval(start, start + dur, "comm"))
        end_all = max(end_all, start + dur)
        per.append(busy)
    makespan = max(end_all, trace.makespan)
    return IterationTrace(trace.worker_ids, tuple(_fill_idle(b, makespan) for b in per), makespan)


def hybrid_allreduce_penalty(trace: IterationTrace, config: PipelineConfig,
                             grad_bytes: Sequence[float] | None = None) -> float:
    """Extra iteration time caused by the all-reduce, straggler wait included."""
    return apply_allreduce(trace, config, grad_bytes).makespan - trace.makespan


def with_overheads(trace: IterationTrace, profiling: float = 0.0, migration: float = 0.0) -> IterationTrace:
    """Prefix every worker's timeline with profiling and migration intervals."""
    shift = profiling + migration
    if shift <= 0:
        return trace
    per = []
    for ivs in trace.intervals:
        busy = []
        if profiling > 0:
            busy.append(Interval(0.0, profiling, "profile"))
        if migration > 0:
            busy.append(Interval(profiling, shift, "migrate"))
        busy += [replace(iv, start=iv.start + shift, end=iv.end + shift) for iv in ivs if iv.kind != "idle"]
        per.append(busy)
    makespan = trace.makespan + shift
    return IterationTrace(trace.worker_ids, tuple(_fill_idle(b, makespan) for b in per), makespan)


def bubble_ratio(trace: IterationTrace, overheads_as_busy: bool = False) -> float:
    """1 - busy / (workers x makespan); overheads count as idleness unless flagged."""
    if trace.makespan <= 0:
        raise ValidationError("bubble ratio is undefined for a zero makespan")
    kinds = COMPUTE_KINDS | {"comm"}
    if overheads_as_busy:
        kinds = kinds | OVERHEAD_KINDS
    busy = math.fsum(trace.busy_time(i, kinds) for i in range(len(trace.worker_ids)))
    ratio = 1.0 - busy / (len(trace.worker_ids) * trace.makespan)
    return min(1.0, max(0.0, ratio))


def bubble_report(trace: IterationTrace, config: PipelineConfig,
                  overhead_breakdown: Mapping[str, float] | None = None) -> BubbleReport:
    idle = tuple(1.0 - trace.busy_time(i) / trace.makespan for i in range(len(trace.worker_ids)))
    tokens = config.tokens_per_microbatch * config.n_microbatches * config.data_parallel_ways
    return BubbleReport(bubble_ratio=bubble_ratio(trace),
                        bubble_ratio_overheads_busy=bubble_ratio(trace, overheads_as_busy=True),
                        per_worker_idle=idle,
                        throughput_tokens_per_sec=tokens / trace.makespan,
                        overhead_breakdown=dict(overhead_breakdown or {}))


def backward_slack(trace: IterationTrace) -> dict[int, float]:
    """Backward compute time per worker, the window layer transfers can hide behind."""
    return {w: trace.busy_time(i, {"bwd"}) for i, w in enumerate(trace.worker_ids)}


def migration_overhead(plan, layers: Sequence[LayerSpec], states: Sequence[LayerState],
                       config: PipelineConfig,
                       slack: Mapping[int, float] | None = None) -> float:
    """Seconds a migration adds to the iteration.

    ``plan`` is a MigrationPlan or a sequence of ``(layer, src, dst)`` moves.
    Serial mode charges every transfer in full; overlap mode charges, per
    worker, only the transfer time exceeding its backward slack.
    """
    moves = getattr(plan, "moves", plan)
    if not moves:
        return 0.0
    per_worker: dict[int, float] = {}
    total = 0.0
    for layer, src, dst in moves:
        payload = layer_payload_bytes(layers[layer], states[layer], config.optimizer_state_factor,
                                      config.csr_index_factor)
        t = config.p2p_latency + payload / config.p2p_bandwidth
        total += t
        per_worker[src] = per_worker.get(src, 0.0) + t
        per_worker[dst] = per_worker.get(dst, 0.0) + t
    if config.migration_overlap is MigrationOverlap.SERIAL:
        return total
    slack = slack or {}
    return max(max(0.0, t - slack.get(w, 0.0)) for w, t in per_worker.items())


def to_chrome_trace(trace: IterationTrace, name: str = "iteration") -> dict:
    """Chrome trace-event JSON (complete events, microsecond timestamps); idle gaps omitted."""
    events = [{"name": "process_name", "ph": "M", "pid": 0, "args": {"name": name}}]
    for w in trace.worker_ids:
        events.append({"name": "thread_name", "ph": "M", "pid": 0, "tid": w,
                       "args": {"name": f"worker {w}"}})
    for w, ivs in zip(trace.worker_ids, trace.intervals):
        for iv in ivs:
            if iv.kind == "idle":
                continue
            ev = {"name": iv.kind, "cat": iv.kind, "ph": "X", "pid": 0, "tid": w,
                  "ts": iv.start * 1e6, "dur": iv.duration * 1e6}
            if iv.microbatch >= 0:
                ev["args"] = {"microbatch": iv.microbatch}
            events.append(ev)
    return {"traceEvents": events, "displayTimeUnit": "ms"}


def write_chrome_trace(trace: IterationTrace, path: str | Path, name: str = "iteration") -> Path:
    path = Path(path)
    path.write_text(json.dumps(to_chrome_trace(trace, name)))
    return path
