import dataclasses
import json
from pathlib import Path

import pytest

from pipebalance import harness
from pipebalance.errors import InfeasibleError, ValidationError
from pipebalance.harness import CSV_COLUMNS, compare, emit, read_jsonl, run_scenario
from pipebalance.scenario import load_scenario, scenario_from_dict

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"


def small(case=None, **over):
    raw = {"name": "small", "iterations": 10, "seed": 2,
           "model": {"depth": 8, "cost_jitter": 0.3},
           "workers": {"count": 4, "memory_capacity": 1e9},
           "pipeline": {"n_microbatches": 8, "schedule": "1f1b"},
           "dynamism": case or {"case": "none"}}
    raw.update(over)
    return scenario_from_dict(raw)


def test_static_without_dynamism_is_constant():
    rep = run_scenario(small())
    assert len(rep.records) == 10
    assert len({r["delta_l"] for r in rep.records}) == 1
    assert all(r["layers_moved"] == 0 and not r["rebalanced"] for r in rep.records)
    assert rep.summary["overheads"]["migration"] == 0.0


def test_rebalance_cadence():
    sc = small({"case": "early_exit", "first_exit_layer": 1, "exit_prob_per_layer": 0.3},
               rebalance_interval=3, balancer={"kind": "partition_by_time"})
    rep = run_scenario(sc)
    assert [r["iteration"] for r in rep.records if r["rebalanced"]] == [3, 6, 9]
    assert all(r["profiling_s"] > 0 for r in rep.records if r["rebalanced"])
    assert all(r["profiling_s"] == 0 for r in rep.records if not r["rebalanced"])


def test_never_worsen_at_every_event():
    sc = small({"case": "mod", "capacity_fraction": 0.5, "predictor_noise": 0.5, "routed_stride": 1},
               iterations=15)
    for kind in ("partition_by_time", "diffusion_by_time", "partition_by_param", "diffusion_by_param"):
        rep = run_scenario(sc.with_balancer(kind), verify_idempotent=True)
        for ev in rep.events:
            assert ev["measured_delta_l_after"] <= ev["measured_delta_l_before"] + 1e-12
            assert ev["idempotent"]


def test_repack_needs_dynamic_kind():
    sc = small(repack={"enabled": True, "target_num_workers": 2})
    with pytest.raises(ValidationError):
        run_scenario(sc)


def test_initial_placement_infeasible():
    sc = small(workers={"count": 4, "memory_capacity": 1e6})
    with pytest.raises(InfeasibleError) as info:
        run_scenario(sc)
    assert info.value.iteration == 0


@pytest.fixture(scope="module")
def pruning():
    sc = load_scenario(SCENARIOS / "gradual_pruning_repack.toml").with_overrides(repack={"enabled": False})
    static = run_scenario(sc.with_balancer("static_uniform"))
    dynamic = run_scenario(sc.with_balancer("partition_by_time"))
    return static, dynamic


def test_pruning_milestones(pruning):
    static, _ = pruning
    retained = {r["iteration"]: r["retained_params_fraction"] for r in static.records}
    assert retained[2999] == 1.0
    assert 1 - retained[4000] == pytest.approx(0.52, abs=0.005)
    assert 1 - retained[5000] == pytest.approx(0.7875, abs=0.0005)
    assert 1 - retained[7000] == pytest.approx(0.9, abs=1e-4)


def test_pruning_dynamic_beats_static(pruning):
    static, dynamic = pruning
    assert dynamic.summary["mean_bubble_ratio"] < static.summary["mean_bubble_ratio"]


def test_repack_shrinks_monotonically():
    sc = load_scenario(SCENARIOS / "gradual_pruning_repack.toml")
    rep = run_scenario(sc)
    active = [r["active_workers"] for r in rep.records]
    assert all(b <= a for a, b in zip(active, active[1:]))
    assert min(active) >= sc.repack.target_num_workers
    released = [e for ev in rep.events if "repack" in ev for e in ev["repack"]["released"]]
    assert released and all(e["reason"] == "repack" for e in released)
    assert len({e["worker_id"] for e in released}) == 8 - active[-1]
    # the first consolidation happens once pruning has shrunk stage memory below the limit
    assert active[2999] == 8 and active[-1] < 8


# -- compare -----------------------------------------------------------------


def _fake(report, balancer, makespan):
    return dataclasses.replace(report, balancer=balancer, summary={**report.summary, "mean_makespan": makespan})


def test_compare_examples():
    base = run_scenario(small(iterations=2))
    assert compare(base, base).best_speedup == 1.0
    half = _fake(base, "partition_by_time", base.summary["mean_makespan"] / 2)
    assert compare(base, half).best_speedup == pytest.approx(2.0)
    a = _fake(base, "partition_by_param", base.summary["mean_makespan"] / 1.4)
    b = _fake(base, "partition_by_time", base.summary["mean_makespan"] / 1.7)
    res = compare(base, a, b)
    assert res.best_kind == "partition_by_time" and res.best_speedup == pytest.approx(1.7)


def test_compare_rejects_mismatched_runs():
    base = run_scenario(small(iterations=2))
    other = run_scenario(small(iterations=3))
    with pytest.raises(ValidationError):
        compare(base, other)
    with pytest.raises(ValidationError):
        compare(base, dataclasses.replace(base, seed=99))
    with pytest.raises(ValidationError):
        compare(base)


# -- emission ----------------------------------------------------------------


@pytest.fixture(scope="module")
def dyn_report():
    return run_scenario(small({"case": "early_exit", "first_exit_layer": 1, "exit_prob_per_layer": 0.3},
                              rebalance_interval=2, balancer={"kind": "diffusion_by_time"}))


def test_jsonl_round_trip(dyn_report, tmp_path):
    paths = emit(dyn_report, "jsonl", tmp_path / "run.jsonl")
    lines = paths[0].read_text().splitlines()
    assert len(lines) == 11 and json.loads(lines[0])["schema"] == harness.SCHEMA_VERSION
    back = read_jsonl(paths[0])
    assert back.records == dyn_report.records
    assert back.summary == dyn_report.summary
    assert back.scenario_hash == dyn_report.scenario_hash
    assert paths[1].name == "run.summary.json"


def test_csv_is_fixed_and_reproducible(dyn_report, tmp_path):
    emit(dyn_report, "csv", tmp_path / "a.csv")
    again = run_scenario(small({"case": "early_exit", "first_exit_layer": 1, "exit_prob_per_layer": 0.3},
                               rebalance_interval=2, balancer={"kind": "diffusion_by_time"}))
    emit(again, "csv", tmp_path / "b.csv")
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes()
    header = a.split(b"\r\n", 1)[0].decode()
    assert header == ",".join(CSV_COLUMNS)
    assert a.count(b"\r\n") == 11


def test_emit_rejects_unknown_format(dyn_report, tmp_path):
    with pytest.raises(ValidationError):
        emit(dyn_report, "parquet", tmp_path / "x")


def test_emit_unwritable_path_names_it(dyn_report, tmp_path):
    target = tmp_path / "missing" / "run.jsonl"
    with pytest.raises(OSError) as info:
        emit(dyn_report, "jsonl", target)
    assert str(target) in str(info.value)


def test_wallclock_kept_out_of_records(dyn_report, tmp_path):
    assert all("decision" not in json.dumps(r) for r in dyn_report.records)
    path = harness.write_wallclock(dyn_report, tmp_path / "wc.csv")
    assert path.read_text().splitlines()[0] == "iteration,decision_s"
    assert len(dyn_report.wallclock) == 5


def test_best_dynamic_picks_fastest():
    sc = small({"case": "early_exit", "first_exit_layer": 1, "exit_prob_per_layer": 0.3}, rebalance_interval=2)
    best, runs = harness.best_dynamic(sc)
    assert len(runs) == 4
    assert best.summary["mean_makespan"] == min(r.summary["mean_makespan"] for r in runs.values())
