import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pipebalance.errors import StructuralError, ValidationError
from pipebalance.workload import (Assignment, Basis, LayerSpec, LayerState, WorkerSpec, bottleneck,
                                  effective_cost, imbalance, layer_payload_bytes, validate_assignment,
                                  worker_loads)


def unit_layers(costs, params=100):
    # split each cost evenly between forward and backward
    return [LayerSpec(i, c / 2, c / 2, params, 10.0) for i, c in enumerate(costs)]


def dense(n):
    return [LayerState()] * n


def test_identical_layers_split_evenly():
    layers = unit_layers([1.0] * 4)
    loads = worker_loads(Assignment.from_sizes([2, 2], [0, 1]), layers, dense(4))
    assert loads.loads == (2.0, 2.0)


def test_uneven_split_hand_sum():
    layers = unit_layers([3, 1, 1, 3])
    loads = worker_loads(Assignment.from_sizes([1, 3], [0, 1]), layers, dense(4))
    assert loads.loads == (3.0, 5.0)


def test_zero_multiplier_layers_contribute_nothing():
    layers = unit_layers([2, 2, 2, 2])
    states = [LayerState(), LayerState(compute_multiplier=0.0), LayerState(compute_multiplier=0.0),
              LayerState()]
    loads = worker_loads(Assignment.from_sizes([2, 2], [0, 1]), layers, states)
    assert loads.loads == (2.0, 2.0)


def test_frozen_layer_keeps_forward_only():
    layer = LayerSpec(0, 1.0, 2.0, 10, 1.0)
    assert effective_cost(layer, LayerState(backward_multiplier=0.0)) == 1.0
    assert LayerState(backward_multiplier=0.0).frozen


def test_params_basis_uses_retained_counts():
    layers = unit_layers([1, 1], params=1000)
    states = [LayerState(param_multiplier=0.25), LayerState()]
    loads = worker_loads(Assignment.from_sizes([1, 1], [0, 1]), layers, states, Basis.PARAMS)
    assert loads.loads == (250.0, 1000.0)


@pytest.mark.parametrize("loads, expected", [([2, 2, 2, 2], 0.0), ([1, 3], 1.0), ([4, 4, 4, 0], 4 / 3)])
def test_imbalance_examples(loads, expected):
    assert imbalance(loads).delta_l == pytest.approx(expected, rel=1e-12)


def test_imbalance_all_zero_is_balanced():
    assert imbalance([0.0, 0.0]).delta_l == 0.0


def test_bottleneck_examples():
    assert bottleneck([2, 2, 2, 2]) == 2
    assert bottleneck([3, 5]) == 5
    assert bottleneck([4, 4]) < bottleneck([3, 5])


@pytest.mark.parametrize("fn", [imbalance, bottleneck])
def test_empty_loads_rejected(fn):
    with pytest.raises(ValidationError):
        fn([])


def test_length_mismatch_is_structural():
    with pytest.raises(StructuralError):
        worker_loads(Assignment.from_sizes([1, 1], [0, 1]), unit_layers([1, 1]), dense(3))


def test_inactive_worker_rejected():
    workers = [WorkerSpec(0, 100.0), WorkerSpec(1, 100.0, active=False)]
    with pytest.raises(ValidationError):
        worker_loads(Assignment.from_sizes([1, 1], [0, 1]), unit_layers([1, 1]), dense(2), workers=workers)


def test_assignment_rejects_bad_boundaries():
    with pytest.raises(ValidationError):
        Assignment(4, (2, 2), (0, 1, 2))
    with pytest.raises(StructuralError):
        Assignment(4, (2,), (0,))
    with pytest.raises(ValidationError):
        Assignment(4, (2,), (1, 1))


def test_uniform_gives_remainder_to_front():
    assert Assignment.uniform(10, [0, 1, 2]).stage_sizes() == [4, 3, 3]
    with pytest.raises(ValidationError):
        Assignment.uniform(2, [0, 1, 2])


def test_memory_feasibility_checked():
    layers = unit_layers([1, 1, 1])  # 10 bytes each
    a = Assignment.from_sizes([2, 1], [0, 1])
    validate_assignment(a, layers, dense(3), [WorkerSpec(0, 20.0), WorkerSpec(1, 10.0)])
    with pytest.raises(ValidationError):
        validate_assignment(a, layers, dense(3), [WorkerSpec(0, 19.0), WorkerSpec(1, 10.0)])


def test_state_bounds():
    with pytest.raises(ValidationError):
        LayerState(compute_multiplier=1.5)
    with pytest.raises(ValidationError):
        LayerSpec(0, 0.0, 1.0, 1, 1.0)


def test_payload_dense_and_sparse():
    layer = LayerSpec(0, 1, 1, 1_000_000, 1.0)
    assert layer_payload_bytes(layer, LayerState()) == 4e6 * 4
    # 10% density: nonzeros at 2x (value + index) plus 3x optimizer state
    assert layer_payload_bytes(layer, LayerState(param_multiplier=0.1)) == pytest.approx(4e5 * 5)


loads_st = st.lists(st.floats(0.0, 1e6, allow_nan=False), min_size=1, max_size=32)


@settings(max_examples=200, deadline=None)
@given(loads_st, st.floats(1e-3, 1e3))
def test_imbalance_scale_invariant(loads, alpha):
    a = imbalance(loads).delta_l
    b = imbalance([alpha * x for x in loads]).delta_l
    assert b == pytest.approx(a, rel=1e-12, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(loads_st)
def test_ordering_sanity(loads):
    r = imbalance(loads)
    assert r.l_max >= r.mean * (1 - 1e-12) and r.mean >= r.l_min * (1 - 1e-12) - 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 100.0), min_size=2, max_size=20), st.data())
def test_loads_conserve_total_cost(costs, data):
    layers = unit_layers(costs)
    n_stages = data.draw(st.integers(1, len(costs)))
    cuts = sorted(data.draw(st.sets(st.integers(1, len(costs) - 1), min_size=n_stages - 1,
                                    max_size=n_stages - 1))) if n_stages > 1 else []
    workers = data.draw(st.permutations(list(range(n_stages))))
    a = Assignment(len(costs), tuple(cuts), tuple(workers))
    loads = worker_loads(a, layers, dense(len(costs)))
    assert math.fsum(loads.loads) == pytest.approx(math.fsum(costs), rel=1e-9)
    # relabelling workers only permutes the by-worker view
    assert sorted(loads.by_worker().items()) == sorted(zip(workers, loads.loads))
