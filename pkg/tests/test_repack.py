import numpy as np
import pytest

from oracles import first_fit_repack_trace
from pipebalance.errors import StructuralError, ValidationError
from pipebalance.repack import apply_repack, plan_repack, plan_repack_for
from pipebalance.workload import Assignment, WorkerSpec


def test_two_workers_merge():
    plan = plan_repack([True, True], [30, 30], [2, 3], 1, 80)
    assert plan.transfers == ((0, 1, 0), (0, 1, 1))
    assert plan.released_workers == (0,)
    assert plan.resulting_active_count == 1 and plan.target_met
    assert plan.final_mem_usage == (0.0, 60.0)


def test_no_pair_fits():
    plan = plan_repack([True, True], [60, 60], [1, 1], 1, 80)
    assert plan.transfers == () and plan.resulting_active_count == 2
    assert not plan.target_met


@pytest.mark.parametrize("contiguous", [True, False])
def test_partial_consolidation_reports_target_unmet(contiguous):
    plan = plan_repack([True] * 4, [30, 30, 50, 60], [1] * 4, 2, 80, contiguous=contiguous)
    assert plan.merges == [(0, 1)]
    assert plan.resulting_active_count == 3 and not plan.target_met


def test_strict_inequality():
    assert plan_repack([True, True], [40, 40], [1, 1], 1, 80).transfers == ()


def test_target_above_active_rejected():
    with pytest.raises(ValidationError):
        plan_repack([True, True, False], [1, 1, 1], [1, 1, 1], 3, 80)
    with pytest.raises(ValidationError):
        plan_repack([True], [1], [1], 0, 80)


def test_length_mismatch_structural():
    with pytest.raises(StructuralError):
        plan_repack([True, True], [1], [1, 1], 1, 80)


def test_stops_at_target():
    plan = plan_repack([True] * 4, [1, 1, 1, 1], [1] * 4, 3, 80)
    assert plan.resulting_active_count == 3 and plan.merges == [(0, 1)]


def test_literal_mode_double_counts():
    # the unfixed listing leaves worker 0's memory in place and keeps scanning it
    fixed = plan_repack([True] * 3, [30, 30, 30], [1] * 3, 1, 100, contiguous=False)
    literal = plan_repack([True] * 3, [30, 30, 30], [1] * 3, 1, 100, literal=True)
    assert fixed.final_mem_usage == (0.0, 0.0, 90.0)
    assert sum(literal.final_mem_usage) > sum(fixed.final_mem_usage)


def _random_instances(n, seed):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        w = int(rng.integers(1, 13))
        mem = list(rng.uniform(0, 60, size=w))
        counts = [int(c) for c in rng.integers(1, 6, size=w)]
        target = int(rng.integers(1, w + 1))
        max_mem = float(rng.uniform(20, 120))
        yield mem, counts, target, max_mem


@pytest.mark.parametrize("contiguous", [True, False])
def test_plan_matches_reference_trace(contiguous):
    for mem, counts, target, max_mem in _random_instances(300, 4):
        plan = plan_repack([True] * len(mem), mem, counts, target, max_mem, contiguous=contiguous)
        pairs, final_mem, active = first_fit_repack_trace(mem, max_mem, target, contiguous)
        assert plan.merges == pairs
        assert plan.final_mem_usage == pytest.approx(final_mem)
        assert plan.resulting_active_count == sum(active)


def test_prefix_memory_cap_and_conservation():
    for mem, counts, target, max_mem in _random_instances(1000, 9):
        plan = plan_repack([True] * len(mem), mem, counts, target, max_mem)
        cur, layers = list(mem), list(counts)
        for src, dst in plan.merges:
            assert cur[src] + cur[dst] < max_mem
            cur[dst] += cur[src]
            cur[src] = 0.0
            layers[dst] += layers[src]
            layers[src] = 0
        assert plan.resulting_active_count >= target
        assert sum(layers) == sum(counts)
        assert all(layers[p] == 0 for p in plan.released_workers)


def test_apply_two_stage_merge():
    a = Assignment.from_sizes([2, 3], [0, 1])
    workers = [WorkerSpec(0, 100.0), WorkerSpec(1, 100.0)]
    plan = plan_repack_for(a, [30, 30], 1, 80)
    out, ws = apply_repack(plan, a, workers)
    assert out.stage_sizes() == [5] and out.stage_to_worker == (1,)
    assert [w.active for w in ws] == [False, True]
    assert plan.released_ids == (0,)


def test_apply_empty_plan_is_identity():
    a = Assignment.from_sizes([2, 2], [0, 1])
    workers = [WorkerSpec(0, 1.0), WorkerSpec(1, 1.0)]
    out, ws = apply_repack(plan_repack_for(a, [60, 60], 1, 80), a, workers)
    assert out == a and ws == workers


def test_apply_chain_of_merges_stays_contiguous():
    a = Assignment.from_sizes([1, 2, 3, 4], [7, 5, 3, 1])
    plan = plan_repack_for(a, [10, 10, 10, 70], 2, 100)
    out, ws = apply_repack(plan, a, [WorkerSpec(i, 1.0) for i in (1, 3, 5, 7)])
    # 0 -> 1, then 1 -> 2 (20 + 10 < 100), then the target is met
    assert out.stage_sizes() == [6, 4] and out.stage_to_worker == (3, 1)
    assert sum(out.stage_sizes()) == 10
    assert sorted(w.id for w in ws if not w.active) == [5, 7]


def test_apply_rejects_foreign_plan():
    a = Assignment.from_sizes([2, 2], [0, 1])
    plan = plan_repack_for(Assignment.from_sizes([2, 2], [1, 0]), [1, 1], 1, 80)
    with pytest.raises(StructuralError):
        apply_repack(plan, a, [WorkerSpec(0, 1.0), WorkerSpec(1, 1.0)])


def test_apply_noncontiguous_needs_opt_in():
    a = Assignment.from_sizes([1, 1, 1], [0, 1, 2])
    plan = plan_repack([True] * 3, [30, 70, 30], [1, 1, 1], 2, 80, contiguous=False,
                       worker_ids=a.stage_to_worker)
    assert plan.merges == [(0, 2)]
    workers = [WorkerSpec(i, 1.0) for i in range(3)]
    with pytest.raises(StructuralError):
        apply_repack(plan, a, workers)
    out, _ = apply_repack(plan, a, workers, allow_nonphysical=True)
    assert out.stage_to_worker == (1, 2) and out.stage_sizes() == [1, 2]
