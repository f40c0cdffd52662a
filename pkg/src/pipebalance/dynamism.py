"""Per-iteration layer multipliers for the six dynamism cases.

Every generator is a pure function of ``(case, previous snapshot, iteration,
seed)``: randomness comes from a generator seeded with ``[seed, iteration,
case code]``, so snapshots can be recomputed bit-for-bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import ClassVar, Sequence, Union

import numpy as np

from .errors import StructuralError, ValidationError
from .workload import LayerSpec, LayerState, effective_cost

# density below which pruned layers switch to sparse (CSR) kernels and storage
DEFAULT_SPARSE_BREAKPOINT = 0.25
CSR_INDEX_FACTOR = 2.0
_INDEX_BYTES = 4
_VALUE_BYTES = 4


def _check_fraction(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValidationError(f"{name} must lie in [0, 1], got {value}")


@dataclass(frozen=True)
class PruningSchedule:
    s_initial: float
    s_final: float
    t0: int
    delta_t: int
    n_steps: int

    def __post_init__(self):
        if not 0.0 <= self.s_initial < 1.0:
            raise ValidationError(f"s_initial must lie in [0, 1), got {self.s_initial}")
        if not 0.0 < self.s_final <= 1.0:
            raise ValidationError(f"s_final must lie in (0, 1], got {self.s_final}")
        if self.s_final <= self.s_initial:
            raise ValidationError("s_final must exceed s_initial")
        if self.delta_t < 1 or self.n_steps < 1:
            raise ValidationError("delta_t and n_steps must be >= 1")

    @property
    def end(self) -> int:
        return self.t0 + self.n_steps * self.delta_t

    def is_step(self, t: int) -> bool:
        return self.t0 <= t <= self.end and (t - self.t0) % self.delta_t == 0


def sparsity_at(schedule: PruningSchedule, t: float) -> float:
    """Cubic gradual-pruning schedule, clamped outside the pruning window."""
    if t <= schedule.t0:
        return schedule.s_initial
    if t >= schedule.end:
        return schedule.s_final
    progress = (t - schedule.t0) / (schedule.n_steps * schedule.delta_t)
    return schedule.s_final + (schedule.s_initial - schedule.s_final) * (1.0 - progress) ** 3


def retained_count(n_params: int, sparsity: float) -> int:
    """``floor(n * (1 - sparsity))`` with float noise around integers absorbed."""
    return int(math.floor(n_params * (1.0 - sparsity) + 1e-9))


@dataclass(frozen=True, eq=False)
class ShardedParams:
    """Parameter magnitudes split across pipeline ranks.

    ``layer_offsets[r]`` lists ``(layer_id, start, end)`` slices of shard ``r``.
    """

    shards: tuple[np.ndarray, ...]
    layer_offsets: tuple[tuple[tuple[int, int, int], ...], ...]

    def __post_init__(self):
        shards = tuple(np.abs(np.asarray(s, dtype=np.float32)).reshape(-1) for s in self.shards)
        object.__setattr__(self, "shards", shards)
        offsets = tuple(tuple((int(l), int(a), int(b)) for l, a, b in per) for per in self.layer_offsets)
        object.__setattr__(self, "layer_offsets", offsets)
        if not shards:
            raise ValidationError("at least one shard is required")
        if len(offsets) != len(shards):
            raise StructuralError(f"{len(shards)} shards but {len(offsets)} offset lists")
        for r, (arr, per) in enumerate(zip(shards, offsets)):
            covered = sum(b - a for _, a, b in per)
            if any(not 0 <= a <= b <= arr.size for _, a, b in per) or covered != arr.size:
                raise StructuralError(f"shard {r}: layer offsets do not tile {arr.size} params")

    @property
    def global_count(self) -> int:
        return int(sum(s.size for s in self.shards))

    @classmethod
    def from_flat(cls, shards: Sequence[Sequence[float]]) -> "ShardedParams":
        """One pseudo-layer per shard; handy for tests of the pruning kernel."""
        arrays = [np.asarray(s, dtype=np.float32) for s in shards]
        return cls(tuple(arrays), tuple(((r, 0, a.size),) for r, a in enumerate(arrays)))

    def layer_sizes(self) -> dict[int, int]:
        sizes: dict[int, int] = {}
        for per in self.layer_offsets:
            for layer, a, b in per:
                sizes[layer] = sizes.get(layer, 0) + (b - a)
        return sizes


def synthesize_sharded_params(stage_layers: Sequence[Sequence[int]], params_per_layer: int,
                              seed: int, scale_spread: float = 0.5) -> ShardedParams:
    """Seeded magnitudes: layer ``l`` draws ``|N(0, sigma_l)|`` with log-normal ``sigma_l``.

    Differing per-layer scales are what makes global pruning non-uniform
    across layers.
    """
    if params_per_layer < 1:
        raise ValidationError("params_per_layer must be >= 1")
    n_layers = sum(len(s) for s in stage_layers)
    rng = np.random.default_rng([seed, 0x5EED])
    sigmas = rng.lognormal(0.0, scale_spread, size=n_layers)
    shards, offsets = [], []
    for layer_ids in stage_layers:
        parts, per, pos = [], [], 0
        for layer in layer_ids:
            parts.append(np.abs(rng.normal(0.0, sigmas[layer], size=params_per_layer)))
            per.append((layer, pos, pos + params_per_layer))
            pos += params_per_layer
        shards.append(np.concatenate(parts) if parts else np.zeros(0))
        offsets.append(tuple(per))
    return ShardedParams(tuple(shards), tuple(offsets))


def save_sharded_params(params: ShardedParams, bin_path: str | Path) -> Path:
    """Write little-endian float32 magnitudes plus a ``.json`` sidecar with offsets."""
    bin_path = Path(bin_path)
    flat = np.concatenate(params.shards).astype("<f4")
    bin_path.write_bytes(flat.tobytes())
    sidecar = {"dtype": "float32-le", "shards": []}
    pos = 0
    for arr, per in zip(params.shards, params.layer_offsets):
        sidecar["shards"].append({"offset": pos, "length": int(arr.size),
                                  "layers": [list(x) for x in per]})
        pos += int(arr.size)
    side_path = bin_path.with_suffix(".json")
    side_path.write_text(json.dumps(sidecar, indent=2))
    return side_path


def load_sharded_params(bin_path: str | Path, sidecar_path: str | Path | None = None) -> ShardedParams:
    bin_path = Path(bin_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else bin_path.with_suffix(".json")
    meta = json.loads(sidecar_path.read_text())
    flat = np.frombuffer(bin_path.read_bytes(), dtype="<f4")
    shards, offsets = [], []
    for entry in meta["shards"]:
        a, n = int(entry["offset"]), int(entry["length"])
        if a + n > flat.size:
            raise StructuralError(f"sidecar shard [{a}, {a + n}) exceeds {flat.size} stored values")
        shards.append(flat[a:a + n])
        offsets.append(tuple(tuple(x) for x in entry["layers"]))
    return ShardedParams(tuple(shards), tuple(offsets))


@dataclass(frozen=True)
class PruneResult:
    keep: tuple[np.ndarray, ...]  # sorted local indices kept per shard
    k: int
    bytes_moved: int


def global_magnitude_prune(shards: ShardedParams, sparsity: float) -> PruneResult:
    """Keep the ``k`` largest magnitudes over all shards via local top-k, gather, select, scatter.

    Equal magnitudes are ordered by (shard, local index). Shard 0 plays the
    gathering rank; ``bytes_moved`` counts the point-to-point traffic of the
    other ranks (values and indices up, kept indices back down).
    """
    if not 0.0 <= sparsity < 1.0:
        raise ValidationError(f"sparsity must lie in [0, 1), got {sparsity}")
    k = retained_count(shards.global_count, sparsity)

    mags, ranks, idxs = [], [], []
    bytes_moved = 0
    for r, arr in enumerate(shards.shards):
        kk = min(k, arr.size)
        local = np.argsort(-arr, kind="stable")[:kk]
        mags.append(arr[local])
        ranks.append(np.full(kk, r, dtype=np.int64))
        idxs.append(local.astype(np.int64))
        if r != 0:
            bytes_moved += kk * (_VALUE_BYTES + _INDEX_BYTES)

    mag = np.concatenate(mags)
    rank = np.concatenate(ranks)
    idx = np.concatenate(idxs)
    chosen = np.lexsort((idx, rank, -mag))[:k]

    keep = []
    for r in range(len(shards.shards)):
        mine = np.sort(idx[chosen][rank[chosen] == r])
        keep.append(mine)
        if r != 0:
            bytes_moved += mine.size * _INDEX_BYTES
    return PruneResult(tuple(keep), k, bytes_moved)


# -- dynamism cases -----------------------------------------------------------


@dataclass(frozen=True)
class NoDynamism:
    tag: ClassVar[str] = "none"
    code: ClassVar[int] = 0


@dataclass(frozen=True)
class MoE:
    """Token routing over experts; each MoE layer is as slow as its busiest expert.

    Expert loads are relative to the uniform share (mean 1 over experts). The
    layer multiplier caps them at ``capacity_factor`` (overflow tokens drop)
    and normalises by it so the result stays in [0, 1].
    """

    experts_per_layer: int = 8
    tokens_per_batch: int = 4096
    routing_skew: float = 1.0
    moe_layer_stride: int = 1
    capacity_factor: float = 2.0
    ffn_fraction: float = 0.67
    tag: ClassVar[str] = "moe"
    code: ClassVar[int] = 1

    def __post_init__(self):
        if self.experts_per_layer < 1 or self.tokens_per_batch < 1 or self.moe_layer_stride < 1:
            raise ValidationError("experts_per_layer, tokens_per_batch and moe_layer_stride must be >= 1")
        if self.routing_skew <= 0:
            raise ValidationError("routing_skew (Dirichlet concentration) must be > 0")
        if self.capacity_factor < 1:
            raise ValidationError("capacity_factor must be >= 1")
        _check_fraction("ffn_fraction", self.ffn_fraction)

    def is_moe_layer(self, i: int) -> bool:
        return i % self.moe_layer_stride == self.moe_layer_stride - 1


@dataclass(frozen=True)
class GradualPruning:
    schedule: PruningSchedule
    shards: ShardedParams
    sparse_breakpoint: float = DEFAULT_SPARSE_BREAKPOINT
    tag: ClassVar[str] = "gradual_pruning"
    code: ClassVar[int] = 2

    def __post_init__(self):
        if not 0.0 < self.sparse_breakpoint <= 1.0:
            raise ValidationError("sparse_breakpoint must lie in (0, 1]")


@dataclass(frozen=True)
class LayerFreezing:
    """Freeze one layer every ``freeze_interval`` iterations.

    With probability ``converge_front_bias`` the frontmost unfrozen layer is
    chosen, otherwise a uniformly random unfrozen one. At most
    ``max_frozen_fraction`` of the model ever freezes.
    """

    freeze_interval: int = 50
    converge_front_bias: float = 1.0
    max_frozen_fraction: float = 0.75
    tag: ClassVar[str] = "layer_freezing"
    code: ClassVar[int] = 3

    def __post_init__(self):
        if self.freeze_interval < 1:
            raise ValidationError("freeze_interval must be >= 1")
        _check_fraction("converge_front_bias", self.converge_front_bias)
        _check_fraction("max_frozen_fraction", self.max_frozen_fraction)


@dataclass(frozen=True)
class SparseAttention:
    """Per-layer attention density drawn each iteration from [low, high].

    ``depth_decay`` shrinks the drawn density linearly with depth (0 keeps
    every layer on the same range).
    """

    sparsity_low: float = 0.1
    sparsity_high: float = 1.0
    attention_fraction_of_layer: float = 0.5
    depth_decay: float = 0.0
    tag: ClassVar[str] = "sparse_attention"
    code: ClassVar[int] = 4

    def __post_init__(self):
        for name in ("sparsity_low", "sparsity_high", "attention_fraction_of_layer", "depth_decay"):
            _check_fraction(name, getattr(self, name))
        if self.sparsity_low > self.sparsity_high:
            raise ValidationError("sparsity_low must not exceed sparsity_high")


@dataclass(frozen=True)
class EarlyExit:
    """Tokens leave at each layer from ``first_exit_layer`` on with a fixed probability.

    The exit probability ramps linearly from 0 over ``ramp_iterations``.
    """

    first_exit_layer: int = 0
    exit_prob_per_layer: float = 0.1
    ramp_iterations: int = 0
    tag: ClassVar[str] = "early_exit"
    code: ClassVar[int] = 5

    def __post_init__(self):
        if self.first_exit_layer < 0 or self.ramp_iterations < 0:
            raise ValidationError("first_exit_layer and ramp_iterations must be >= 0")
        _check_fraction("exit_prob_per_layer", self.exit_prob_per_layer)


@dataclass(frozen=True)
class MoD:
    """Top-k routing around whole blocks; every ``routed_stride``-th block is routed."""

    capacity_fraction: float = 0.5
    predictor_noise: float = 0.0
    routed_stride: int = 2
    tag: ClassVar[str] = "mod"
    code: ClassVar[int] = 6

    def __post_init__(self):
        _check_fraction("capacity_fraction", self.capacity_fraction)
        _check_fraction("predictor_noise", self.predictor_noise)
        if self.routed_stride < 1:
            raise ValidationError("routed_stride must be >= 1")

    def is_routed(self, i: int) -> bool:
        return i % self.routed_stride == self.routed_stride - 1


DynamismCase = Union[NoDynamism, MoE, GradualPruning, LayerFreezing, SparseAttention, EarlyExit, MoD]
CASE_TYPES = {c.tag: c for c in (NoDynamism, MoE, GradualPruning, LayerFreezing, SparseAttention,
                                  EarlyExit, MoD)}


@dataclass(frozen=True)
class MultiplierSnapshot:
    iteration: int
    states: tuple[LayerState, ...]
    total_effective_cost: float


def snapshot_for(iteration: int, states: Sequence[LayerState],
                 layers: Sequence[LayerSpec]) -> MultiplierSnapshot:
    if len(states) != len(layers):
        raise StructuralError(f"{len(states)} states for {len(layers)} layers")
    total = math.fsum(effective_cost(l, s) for l, s in zip(layers, states))
    return MultiplierSnapshot(iteration, tuple(states), total)


def initial_snapshot(layers: Sequence[LayerSpec]) -> MultiplierSnapshot:
    return snapshot_for(0, [LayerState()] * len(layers), layers)


def _rng(seed: int, iteration: int, code: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, iteration, code])


def expert_relative_loads(rng: np.random.Generator, experts: int, tokens: int,
                          skew: float) -> np.ndarray:
    """Tokens per expert divided by the uniform share; averages exactly 1."""
    probs = rng.dirichlet(np.full(experts, skew))
    counts = rng.multinomial(tokens, probs)
    return counts * experts / tokens


def early_exit_retention(depth: int, first_exit_layer: int, exit_prob: float) -> list[float]:
    """Fraction of tokens still alive when entering each layer."""
    return [1.0 if i < first_exit_layer else (1.0 - exit_prob) ** (i - first_exit_layer + 1)
            for i in range(depth)]


def pruned_layer_state(density: float, breakpoint: float = DEFAULT_SPARSE_BREAKPOINT) -> LayerState:
    """Dense kernels and storage above the breakpoint, CSR below it."""
    if density > breakpoint:
        return LayerState(compute_multiplier=1.0, param_multiplier=density, memory_multiplier=1.0)
    return LayerState(compute_multiplier=density / breakpoint, param_multiplier=density,
                      memory_multiplier=min(1.0, CSR_INDEX_FACTOR * density))


def layer_densities(shards: ShardedParams, keep: Sequence[np.ndarray]) -> dict[int, float]:
    kept: dict[int, int] = {}
    total: dict[int, int] = {}
    for per, mine in zip(shards.layer_offsets, keep):
        for layer, a, b in per:
            lo, hi = np.searchsorted(mine, [a, b])
            kept[layer] = kept.get(layer, 0) + int(hi - lo)
            total[layer] = total.get(layer, 0) + (b - a)
    return {l: (kept[l] / total[l] if total[l] else 1.0) for l in total}


def next_snapshot(case: DynamismCase, prev: MultiplierSnapshot, iteration: int, seed: int,
                  layers: Sequence[LayerSpec]) -> MultiplierSnapshot:
    """Advance the layer multipliers by one iteration."""
    if iteration != prev.iteration + 1:
        raise StructuralError(f"expected iteration {prev.iteration + 1}, got {iteration}")
    if len(prev.states) != len(layers):
        raise StructuralError(f"{len(prev.states)} states for {len(layers)} layers")
    depth = len(layers)
    states: list[LayerState]

    if isinstance(case, NoDynamism):
        states = list(prev.states)

    elif isinstance(case, MoE):
        rng = _rng(seed, iteration, case.code)
        states = []
        for i in range(depth):
            if not case.is_moe_layer(i):
                states.append(LayerState())
                continue
            rel = expert_relative_loads(rng, case.experts_per_layer, case.tokens_per_batch,
                                        case.routing_skew)
            straggler = min(float(rel.max()), case.capacity_factor) / case.capacity_factor
            cm = (1.0 - case.ffn_fraction) + case.ffn_fraction * straggler
            states.append(LayerState(compute_multiplier=min(1.0, cm)))

    elif isinstance(case, GradualPruning):
        if not case.schedule.is_step(iteration):
            states = list(prev.states)
        else:
            s = sparsity_at(case.schedule, iteration)
            if s >= 1.0:
                raise ValidationError("pruning schedule reaches sparsity 1; nothing would remain")
            result = global_magnitude_prune(case.shards, s)
            dens = layer_densities(case.shards, result.keep)
            states = [pruned_layer_state(dens[i], case.sparse_breakpoint) if i in dens else prev.states[i]
                      for i in range(depth)]

    elif isinstance(case, LayerFreezing):
        states = list(prev.states)
        if iteration % case.freeze_interval == 0:
            unfrozen = [i for i, st in enumerate(states) if not st.frozen]
            n_frozen = depth - len(unfrozen)
            if unfrozen and n_frozen < math.floor(case.max_frozen_fraction * depth):
                rng = _rng(seed, iteration, case.code)
                if rng.random() < case.converge_front_bias:
                    pick = unfrozen[0]
                else:
                    pick = unfrozen[int(rng.integers(len(unfrozen)))]
                old = states[pick]
                states[pick] = LayerState(old.compute_multiplier, old.param_multiplier,
                                          old.memory_multiplier, backward_multiplier=0.0)

    elif isinstance(case, SparseAttention):
        rng = _rng(seed, iteration, case.code)
        draws = rng.uniform(case.sparsity_low, case.sparsity_high, size=depth)
        a = case.attention_fraction_of_layer
        states = []
        for i in range(depth):
            rel_depth = i / (depth - 1) if depth > 1 else 0.0
            s_i = float(draws[i]) * (1.0 - case.depth_decay * rel_depth)
            states.append(LayerState(compute_multiplier=min(1.0, (1.0 - a) + a * s_i)))

    elif isinstance(case, EarlyExit):
        if case.first_exit_layer >= depth:
            raise ValidationError(f"first_exit_layer {case.first_exit_layer} >= depth {depth}")
        ramp = 1.0 if case.ramp_iterations == 0 else min(1.0, iteration / case.ramp_iterations)
        retention = early_exit_retention(depth, case.first_exit_layer, case.exit_prob_per_layer * ramp)
        states = [LayerState(compute_multiplier=r) for r in retention]

    elif isinstance(case, MoD):
        rng = _rng(seed, iteration, case.code)
        noise = rng.uniform(-1.0, 1.0, size=depth)
        states = []
        for i in range(depth):
            if not case.is_routed(i):
                states.append(LayerState())
                continue
            r = case.capacity_fraction * (1.0 + case.predictor_noise * float(noise[i]))
            states.append(LayerState(compute_multiplier=min(1.0, max(0.0, r))))

    else:
        raise StructuralError(f"unknown dynamism case {type(case).__name__}")

    return snapshot_for(iteration, states, layers)
