"""Centralised min-max partitioning, neighbour diffusion, and the static baselines."""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import InfeasibleError, StructuralError, ValidationError
from .workload import (Assignment, Basis, LayerSpec, LayerState, WorkerSpec, bottleneck,
                       effective_memory, imbalance, layer_costs, layer_payload_bytes,
                       loads_from_costs, stage_memory)

ZERO_COST_EPS = 1e-9
_REL_TOL = 1e-12


class BalancerKind(str, enum.Enum):
    STATIC_UNIFORM = "static_uniform"
    STATIC_PARAM_ONCE = "static_param_once"
    PARTITION_BY_PARAM = "partition_by_param"
    PARTITION_BY_TIME = "partition_by_time"
    DIFFUSION_BY_PARAM = "diffusion_by_param"
    DIFFUSION_BY_TIME = "diffusion_by_time"

    @property
    def is_static(self) -> bool:
        return self in (BalancerKind.STATIC_UNIFORM, BalancerKind.STATIC_PARAM_ONCE)

    @property
    def is_diffusion(self) -> bool:
        return self.value.startswith("diffusion")

    @property
    def basis(self) -> Basis:
        return Basis.TIME if self.value.endswith("time") else Basis.PARAMS


DYNAMIC_KINDS = tuple(k for k in BalancerKind if not k.is_static)
STATIC_KINDS = tuple(k for k in BalancerKind if k.is_static)


@dataclass(frozen=True)
class ProfileSnapshot:
    """What one instrumented iteration tells the balancer."""

    layer_times: tuple[float, ...]
    memory_usage: Mapping[int, float]
    profiling_duration: float = 0.0


@dataclass(frozen=True)
class DiffusionTelemetry:
    rounds: int
    potential_per_round: tuple[float, ...]
    converged: bool
    gamma: float
    reason: str  # "gamma", "local_optimum" or "max_rounds"


@dataclass(frozen=True)
class MigrationPlan:
    moves: tuple[tuple[int, int, int], ...]  # (layer, src worker, dst worker)
    bytes_moved: float
    decision_time: float
    resulting_assignment: Assignment
    telemetry: DiffusionTelemetry | None = None


def take_profile(assignment: Assignment, layers: Sequence[LayerSpec], states: Sequence[LayerState],
                 rng: np.random.Generator, noise: float = 0.02,
                 profiling_duration: float = 0.0) -> ProfileSnapshot:
    """Measured layer times are the true cost times ``1 + u``, ``u ~ U(-noise, noise)``."""
    true = layer_costs(layers, states, Basis.TIME)
    jitter = rng.uniform(-noise, noise, size=len(true)) if noise > 0 else np.zeros(len(true))
    measured = tuple(float(t * (1.0 + j)) for t, j in zip(true, jitter))
    mem = dict(zip(assignment.stage_to_worker, stage_memory(assignment, layers, states)))
    return ProfileSnapshot(measured, mem, profiling_duration)


# -- partition ---------------------------------------------------------------


def _prefix(costs: Sequence[float]) -> list[float]:
    out = [0.0]
    for c in costs:
        out.append(out[-1] + c)
    return out


def _greedy_split(prefix, mem_prefix, caps, n_stages, limit_b):
    """Farthest-reach split into exactly ``n_stages`` runs, or None if infeasible."""
    d = len(prefix) - 1
    bounds, a = [], 0
    for s in range(n_stages):
        last = d - (n_stages - s - 1)
        b = a
        while b < last and prefix[b + 1] - prefix[a] <= limit_b and (
                mem_prefix is None or mem_prefix[b + 1] - mem_prefix[a] <= caps[s]):
            b += 1
        if b == a or (s == n_stages - 1 and b != d):
            return None
        bounds.append(b)
        a = b
    return bounds[:-1]


def partition(costs: Sequence[float], n_stages: int, memory: Sequence[float] | None = None,
              capacities: Sequence[float] | None = None) -> tuple[int, ...]:
    """Contiguous split of ``costs`` into ``n_stages`` runs minimising the largest run sum.

    Bisection on the bottleneck value with a greedy feasibility check narrows
    the answer to an interval; a linear probe over the achievable run sums in
    that interval returns the exact optimum. With ``memory``/``capacities``
    the bottleneck is relaxed upward until the split also fits in memory.
    """
    d = len(costs)
    if d == 0:
        raise ValidationError("costs must be non-empty")
    if n_stages < 1:
        raise ValidationError("n_stages must be >= 1")
    if n_stages > d:
        raise ValidationError(f"cannot give each of {n_stages} stages a layer out of {d}")
    if any(c < 0 for c in costs):
        raise ValidationError("costs must be non-negative")
    if (memory is None) != (capacities is None):
        raise StructuralError("memory and capacities must be given together")
    if memory is not None and (len(memory) != d or len(capacities) != n_stages):
        raise StructuralError("memory must match costs and capacities must match n_stages")

    costs = [c if c > 0 else ZERO_COST_EPS for c in costs]
    prefix = _prefix(costs)
    mem_prefix = _prefix(memory) if memory is not None else None

    def feasible(b, with_mem=False):
        return _greedy_split(prefix, mem_prefix if with_mem else None, capacities, n_stages, b)

    lo, hi = max(costs), prefix[-1]
    split = feasible(lo)
    if split is not None:
        best = lo
    else:
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if mid <= lo or mid >= hi:
                break
            if feasible(mid) is None:
                lo = mid
            else:
                hi = mid
        p = np.asarray(prefix)
        sums = (p[None, :] - p[:, None])[np.triu_indices(d + 1, k=1)]
        window = np.unique(sums[(sums > lo) & (sums <= hi)])
        best = None
        for b in window:
            split = feasible(float(b))
            if split is not None:
                best = float(b)
                break
        if best is None:  # float round-off left the optimum just outside the window
            best, split = hi, feasible(hi)

    if mem_prefix is None:
        return tuple(split)

    mem_split = feasible(best, with_mem=True)
    if mem_split is not None:
        return tuple(mem_split)
    p = np.asarray(prefix)
    sums = np.unique((p[None, :] - p[:, None])[np.triu_indices(d + 1, k=1)])
    for b in sums[sums > best]:
        mem_split = feasible(float(b), with_mem=True)
        if mem_split is not None:
            return tuple(mem_split)
    raise InfeasibleError(f"no {n_stages}-stage split fits the memory capacities")


# -- diffusion ---------------------------------------------------------------


def potential(loads) -> float:
    """Sum of |x_u - x_v| over unordered worker pairs."""
    xs = sorted(getattr(loads, "loads", loads))
    if not xs:
        raise ValidationError("empty load vector")
    n = len(xs)
    return math.fsum((2 * i - n + 1) * x for i, x in enumerate(xs))


def lemma2_round_bound(n_workers: int, scale: float, gamma: float) -> float:
    """``N^2 log(S N / gamma) log N`` with unit constant (natural logs, floored at 0)."""
    if n_workers < 2 or gamma <= 0 or scale <= 0:
        return 0.0
    return max(0.0, n_workers ** 2 * math.log(scale * n_workers / gamma) * math.log(n_workers))


def _stage_loads(assignment, costs):
    return [math.fsum(costs[i] for i in r) for r in assignment.stage_ranges()]


def _capacity_list(assignment, capacities):
    if capacities is None:
        return None
    if isinstance(capacities, Mapping):
        return [capacities[w] for w in assignment.stage_to_worker]
    return list(capacities)


def _candidate_moves(assignment, costs, memory, caps):
    loads = _stage_loads(assignment, costs)
    ranges = assignment.stage_ranges()
    mems = [math.fsum(memory[i] for i in r) for r in ranges] if memory is not None else None
    found = []
    for s in range(len(ranges) - 1):
        a, b = loads[s], loads[s + 1]
        if a == b:
            continue
        heavy, light = (s, s + 1) if a > b else (s + 1, s)
        if len(ranges[heavy]) < 2:
            continue
        layer = ranges[heavy][-1] if heavy == s else ranges[heavy][0]
        c = costs[layer]
        if not (c > 0 and loads[light] + c < loads[heavy]):
            continue
        if mems is not None and mems[light] + memory[layer] > caps[light]:
            continue
        found.append((abs(a - b), s, layer, heavy, light))
    return found


def diffusion_step(assignment: Assignment, costs: Sequence[float],
                   memory: Sequence[float] | None = None,
                   capacities: Mapping[int, float] | Sequence[float] | None = None,
                   ) -> tuple[Assignment, bool, tuple[int, int, int] | None]:
    """Move one boundary layer across the adjacent pair with the widest fixable gap.

    A move is allowed only if it strictly lowers the pair's maximum load and the
    receiving stage stays within memory. Returns ``(assignment, moved, move)``.
    """
    if len(costs) != assignment.n_layers:
        raise StructuralError(f"{len(costs)} costs for {assignment.n_layers} layers")
    caps = _capacity_list(assignment, capacities)
    found = _candidate_moves(assignment, costs, memory, caps)
    if not found:
        return assignment, False, None
    _, s, layer, heavy, light = min(found, key=lambda m: (-m[0], m[1]))
    bounds = list(assignment.boundaries)
    bounds[s] += -1 if heavy == s else 1
    src, dst = assignment.stage_to_worker[heavy], assignment.stage_to_worker[light]
    return assignment.with_boundaries(bounds), True, (layer, src, dst)


def diffusion_balance(assignment: Assignment, costs: Sequence[float], gamma: float,
                      max_rounds: int, memory: Sequence[float] | None = None,
                      capacities: Mapping[int, float] | Sequence[float] | None = None,
                      ) -> tuple[Assignment, DiffusionTelemetry, list[tuple[int, int, int]]]:
    """Repeat ``diffusion_step`` until the potential drops to ``gamma``, no move helps,
    or ``max_rounds`` moves have been made."""
    if gamma < 0:
        raise ValidationError("gamma must be >= 0")
    if max_rounds < 1:
        raise ValidationError("max_rounds must be >= 1")
    phis = [potential(_stage_loads(assignment, costs))]
    moves: list[tuple[int, int, int]] = []
    reason = "max_rounds"
    for _ in range(max_rounds):
        if phis[-1] <= gamma:
            reason = "gamma"
            break
        assignment, moved, move = diffusion_step(assignment, costs, memory, capacities)
        if not moved:
            reason = "local_optimum"
            break
        moves.append(move)
        phis.append(potential(_stage_loads(assignment, costs)))
    else:
        if phis[-1] <= gamma:
            reason = "gamma"
        elif not _candidate_moves(assignment, costs, memory, _capacity_list(assignment, capacities)):
            reason = "local_optimum"
    telemetry = DiffusionTelemetry(rounds=len(moves), potential_per_round=tuple(phis),
                                   converged=reason != "max_rounds", gamma=gamma, reason=reason)
    return assignment, telemetry, moves


# -- dispatch ----------------------------------------------------------------


def _basis_costs(profile, kind, layers, states):
    if kind.basis is Basis.TIME:
        if len(profile.layer_times) != len(layers):
            raise StructuralError(f"profile has {len(profile.layer_times)} layer times for "
                                  f"{len(layers)} layers")
        return list(profile.layer_times)
    return layer_costs(layers, states, Basis.PARAMS)


def measured_loads(profile: ProfileSnapshot, basis: Basis, assignment: Assignment,
                   layers: Sequence[LayerSpec], states: Sequence[LayerState]):
    """Stage loads as the balancer sees them: profiled times or retained parameters."""
    if Basis(basis) is Basis.TIME:
        costs = list(profile.layer_times)
    else:
        costs = layer_costs(layers, states, Basis.PARAMS)
    return loads_from_costs(assignment, costs, basis)


def diff_moves(old: Assignment, new: Assignment) -> tuple[tuple[int, int, int], ...]:
    before, after = old.worker_of_layer(), new.worker_of_layer()
    return tuple((i, a, b) for i, (a, b) in enumerate(zip(before, after)) if a != b)


def _improves(cur_loads, new_loads) -> bool:
    cur, new = imbalance(cur_loads), imbalance(new_loads)
    b_cur, b_new = bottleneck(cur_loads), bottleneck(new_loads)
    tol_b = _REL_TOL * max(1.0, abs(b_cur))
    tol_d = _REL_TOL * max(1.0, abs(cur.delta_l))
    if new.delta_l > cur.delta_l + tol_d or b_new > b_cur + tol_b:
        return False
    return b_new < b_cur - tol_b or new.delta_l < cur.delta_l - tol_d


def rebalance(profile: ProfileSnapshot, kind: BalancerKind, current: Assignment,
              layers: Sequence[LayerSpec], states: Sequence[LayerState],
              workers: Sequence[WorkerSpec], gamma: float = 0.0, max_rounds: int = 10_000,
              optimizer_state_factor: float = 3.0) -> MigrationPlan:
    """Turn a profile into a migration plan for the given balancer kind.

    Partition plans are only adopted when they lower the bottleneck or the
    imbalance without worsening either, so a repeated call on the same
    profile yields an empty plan.
    """
    kind = BalancerKind(kind)
    started = time.perf_counter()
    if kind.is_static:
        return MigrationPlan((), 0.0, time.perf_counter() - started, current)

    costs = _basis_costs(profile, kind, layers, states)
    memory = [effective_memory(l, s) for l, s in zip(layers, states)]
    cap_by_worker = {w.id: w.memory_capacity for w in workers}
    caps = [cap_by_worker[w] for w in current.stage_to_worker]
    telemetry = None

    if kind.is_diffusion:
        result, telemetry, _ = diffusion_balance(current, costs, gamma, max_rounds, memory, caps)
    else:
        bounds = partition(costs, current.n_stages, memory, caps)
        result = current.with_boundaries(bounds)
        if not _improves(loads_from_costs(current, costs), loads_from_costs(result, costs)):
            result = current

    moves = diff_moves(current, result)
    payload = math.fsum(layer_payload_bytes(layers[i], states[i], optimizer_state_factor)
                        for i, _, _ in moves)
    return MigrationPlan(moves, payload, time.perf_counter() - started, result, telemetry)


def initial_assignment(kind: BalancerKind, layers: Sequence[LayerSpec],
                       workers: Sequence[WorkerSpec]) -> Assignment:
    """Iteration-0 placement: parameter-balanced for the DeepSpeed-style baseline, else even."""
    active = [w for w in workers if w.active]
    ids = [w.id for w in active]
    if BalancerKind(kind) is BalancerKind.STATIC_PARAM_ONCE:
        params = [float(l.param_count) for l in layers]
        mem = [float(l.memory_bytes) for l in layers]
        bounds = partition(params, len(ids), mem, [w.memory_capacity for w in active])
        return Assignment(len(layers), bounds, ids)
    return Assignment.uniform(len(layers), ids)
