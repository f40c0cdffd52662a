"""Layers, workers, contiguous stage assignments and the load/imbalance metrics.

Loads are measured either in simulated seconds (``Basis.TIME``: forward plus
backward cost per micro-batch, scaled by the layer's dynamic multipliers) or in
retained parameters (``Basis.PARAMS``).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import StructuralError, ValidationError

BYTES_PER_PARAM = 4  # float32


class Basis(str, enum.Enum):
    TIME = "time"
    PARAMS = "params"


@dataclass(frozen=True)
class LayerSpec:
    """Static cost of one model layer at full density."""

    id: int
    base_compute_fwd: float
    base_compute_bwd: float
    param_count: int
    memory_bytes: float

    def __post_init__(self):
        if self.id < 0:
            raise ValidationError(f"layer id must be >= 0, got {self.id}")
        for name in ("base_compute_fwd", "base_compute_bwd", "param_count", "memory_bytes"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"layer {self.id}: {name} must be > 0")


@dataclass(frozen=True)
class LayerState:
    """Dynamic multipliers of a layer at one iteration.

    ``backward_multiplier`` scales only the backward pass on top of
    ``compute_multiplier``; a frozen layer has ``backward_multiplier == 0``.
    """

    compute_multiplier: float = 1.0
    param_multiplier: float = 1.0
    memory_multiplier: float = 1.0
    backward_multiplier: float = 1.0

    def __post_init__(self):
        for name in ("compute_multiplier", "param_multiplier", "memory_multiplier",
                     "backward_multiplier"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")

    @property
    def frozen(self) -> bool:
        return self.backward_multiplier == 0.0


DENSE = LayerState()


@dataclass(frozen=True)
class WorkerSpec:
    id: int
    memory_capacity: float
    active: bool = True

    def __post_init__(self):
        if not self.memory_capacity > 0:
            raise ValidationError(f"worker {self.id}: memory_capacity must be > 0")


def effective_fwd(layer: LayerSpec, state: LayerState) -> float:
    return layer.base_compute_fwd * state.compute_multiplier


def effective_bwd(layer: LayerSpec, state: LayerState) -> float:
    return layer.base_compute_bwd * state.compute_multiplier * state.backward_multiplier


def effective_cost(layer: LayerSpec, state: LayerState) -> float:
    """Forward plus backward seconds per micro-batch after dynamism."""
    return effective_fwd(layer, state) + effective_bwd(layer, state)


def retained_params(layer: LayerSpec, state: LayerState) -> float:
    return layer.param_count * state.param_multiplier


def effective_memory(layer: LayerSpec, state: LayerState) -> float:
    return layer.memory_bytes * state.memory_multiplier


def layer_payload_bytes(layer: LayerSpec, state: LayerState, optimizer_state_factor: float = 3.0,
                        csr_index_factor: float = 2.0) -> float:
    """Bytes moved when a layer migrates: weights plus optimizer state.

    Pruned layers travel in CSR form, so their nonzeros carry
    ``csr_index_factor`` times the dense per-value size.
    """
    nonzero_bytes = layer.param_count * BYTES_PER_PARAM * state.param_multiplier
    weight_factor = csr_index_factor if state.param_multiplier < 1.0 else 1.0
    return nonzero_bytes * (weight_factor + optimizer_state_factor)


def gradient_bytes(layer: LayerSpec, state: LayerState) -> float:
    """Gradient volume a layer contributes to the data-parallel all-reduce."""
    if state.frozen:
        return 0.0
    return layer.param_count * BYTES_PER_PARAM * state.param_multiplier


def layer_costs(layers: Sequence[LayerSpec], states: Sequence[LayerState],
                basis: Basis = Basis.TIME) -> list[float]:
    _check_lengths(layers, states)
    if Basis(basis) is Basis.TIME:
        return [effective_cost(l, s) for l, s in zip(layers, states)]
    return [retained_params(l, s) for l, s in zip(layers, states)]


def _check_lengths(layers, states):
    if len(layers) != len(states):
        raise StructuralError(f"{len(layers)} layers but {len(states)} layer states")


@dataclass(frozen=True)
class Assignment:
    """Contiguous split of layers ``0..n_layers-1`` into pipeline stages.

    ``boundaries`` holds the interior split indices (stage ``s`` owns layers
    ``[b[s-1], b[s])``); ``stage_to_worker[s]`` is the worker running stage ``s``.
    """

    n_layers: int
    boundaries: tuple[int, ...]
    stage_to_worker: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "boundaries", tuple(int(b) for b in self.boundaries))
        object.__setattr__(self, "stage_to_worker", tuple(int(w) for w in self.stage_to_worker))
        if self.n_layers < 1:
            raise ValidationError("an assignment needs at least one layer")
        if len(self.stage_to_worker) != len(self.boundaries) + 1:
            raise StructuralError(
                f"{len(self.boundaries)} boundaries need {len(self.boundaries) + 1} workers, "
                f"got {len(self.stage_to_worker)}")
        edges = (0, *self.boundaries, self.n_layers)
        if any(a >= b for a, b in zip(edges, edges[1:])):
            raise ValidationError(f"boundaries {self.boundaries} must be strictly increasing "
                                  f"inside (0, {self.n_layers})")
        if len(set(self.stage_to_worker)) != len(self.stage_to_worker):
            raise ValidationError(f"a worker holds more than one stage: {self.stage_to_worker}")

    @classmethod
    def from_sizes(cls, sizes: Sequence[int], workers: Sequence[int]) -> "Assignment":
        bounds, acc = [], 0
        for s in sizes[:-1]:
            acc += s
            bounds.append(acc)
        return cls(sum(sizes), tuple(bounds), tuple(workers))

    @classmethod
    def uniform(cls, n_layers: int, workers: Sequence[int]) -> "Assignment":
        """Megatron-style even split; earlier stages take the remainder."""
        n = len(workers)
        if n > n_layers:
            raise ValidationError(f"cannot split {n_layers} layers over {n} stages")
        q, r = divmod(n_layers, n)
        return cls.from_sizes([q + (1 if s < r else 0) for s in range(n)], workers)

    @property
    def n_stages(self) -> int:
        return len(self.stage_to_worker)

    def stage_ranges(self) -> list[range]:
        edges = (0, *self.boundaries, self.n_layers)
        return [range(a, b) for a, b in zip(edges, edges[1:])]

    def stage_sizes(self) -> list[int]:
        return [len(r) for r in self.stage_ranges()]

    def worker_of_layer(self) -> list[int]:
        out = []
        for w, r in zip(self.stage_to_worker, self.stage_ranges()):
            out.extend([w] * len(r))
        return out

    def layers_of(self, worker: int) -> range:
        for w, r in zip(self.stage_to_worker, self.stage_ranges()):
            if w == worker:
                return r
        return range(0)

    def with_boundaries(self, boundaries: Iterable[int]) -> "Assignment":
        return Assignment(self.n_layers, tuple(boundaries), self.stage_to_worker)


def stage_memory(assignment: Assignment, layers: Sequence[LayerSpec],
                 states: Sequence[LayerState]) -> list[float]:
    return [sum(effective_memory(layers[i], states[i]) for i in r) for r in assignment.stage_ranges()]


def validate_assignment(assignment: Assignment, layers: Sequence[LayerSpec],
                        states: Sequence[LayerState], workers: Sequence[WorkerSpec]) -> None:
    """Raise unless the assignment covers the layers and fits its active workers."""
    _check_lengths(layers, states)
    if assignment.n_layers != len(layers):
        raise StructuralError(f"assignment covers {assignment.n_layers} layers, model has {len(layers)}")
    by_id = {w.id: w for w in workers}
    for w in assignment.stage_to_worker:
        if w not in by_id:
            raise StructuralError(f"assignment references unknown worker {w}")
        if not by_id[w].active:
            raise ValidationError(f"assignment references inactive worker {w}")
    for w, mem in zip(assignment.stage_to_worker, stage_memory(assignment, layers, states)):
        if mem > by_id[w].memory_capacity:
            raise ValidationError(
                f"worker {w} needs {mem:.4g} bytes, capacity {by_id[w].memory_capacity:.4g}")


@dataclass(frozen=True)
class LoadVector:
    """Per-stage loads in pipeline order, tagged with the owning worker ids."""

    loads: tuple[float, ...]
    worker_ids: tuple[int, ...]
    basis: Basis = Basis.TIME

    def __post_init__(self):
        if len(self.loads) != len(self.worker_ids):
            raise StructuralError("loads and worker_ids differ in length")
        if any(x < 0 for x in self.loads):
            raise ValidationError("loads must be non-negative")

    def __len__(self):
        return len(self.loads)

    def __iter__(self):
        return iter(self.loads)

    def by_worker(self) -> dict[int, float]:
        return dict(zip(self.worker_ids, self.loads))


@dataclass(frozen=True)
class ImbalanceReport:
    l_max: float
    l_min: float
    mean: float
    delta_l: float


def worker_loads(assignment: Assignment, layers: Sequence[LayerSpec],
                 states: Sequence[LayerState], basis: Basis = Basis.TIME,
                 workers: Sequence[WorkerSpec] | None = None) -> LoadVector:
    """Sum the per-layer workload of every stage on the chosen basis."""
    _check_lengths(layers, states)
    if assignment.n_layers != len(layers):
        raise StructuralError(f"assignment covers {assignment.n_layers} layers, model has {len(layers)}")
    if workers is not None:
        inactive = {w.id for w in workers if not w.active}
        bad = inactive.intersection(assignment.stage_to_worker)
        if bad:
            raise ValidationError(f"assignment references inactive workers {sorted(bad)}")
    costs = layer_costs(layers, states, basis)
    return loads_from_costs(assignment, costs, basis)


def loads_from_costs(assignment: Assignment, costs: Sequence[float],
                     basis: Basis = Basis.TIME) -> LoadVector:
    if len(costs) != assignment.n_layers:
        raise StructuralError(f"{len(costs)} costs for {assignment.n_layers} layers")
    loads = tuple(math.fsum(costs[i] for i in r) for r in assignment.stage_ranges())
    return LoadVector(loads, assignment.stage_to_worker, Basis(basis))


def _as_loads(loads) -> tuple[float, ...]:
    values = tuple(loads.loads if isinstance(loads, LoadVector) else loads)
    if not values:
        raise ValidationError("empty load vector")
    if any(x < 0 for x in values):
        raise ValidationError("loads must be non-negative")
    return values


def imbalance(loads: LoadVector | Sequence[float]) -> ImbalanceReport:
    """(max - min) / mean of the loads; defined as 0 for an all-zero vector."""
    values = _as_loads(loads)
    hi, lo = max(values), min(values)
    mean = math.fsum(values) / len(values)
    delta = (hi - lo) / mean if mean > 0 else 0.0
    return ImbalanceReport(l_max=hi, l_min=lo, mean=mean, delta_l=delta)


def bottleneck(loads: LoadVector | Sequence[float]) -> float:
    return max(_as_loads(loads))
