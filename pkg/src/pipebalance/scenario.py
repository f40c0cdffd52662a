"""Scenario files: TOML, validated against a JSON schema, resolved into domain objects.

A scenario file looks like::

    name = "early_exit"
    iterations = 200
    seed = 7
    # rebalance_interval defaults per dynamism case

    [model]
    depth = 24
    fwd_cost = 1e-3          # seconds per micro-batch, or a list of length depth
    bwd_ratio = 2.0          # bwd = fwd * ratio unless bwd_cost is given
    param_count = 1000000    # or a list
    memory_bytes = 16e6      # or a list; defaults to 16 bytes per parameter
    cost_jitter = 0.0        # relative U(-j, j) spread on generated costs

    [workers]
    count = 8
    memory_capacity = 64e6

    [pipeline]               # every PipelineConfig field, all optional
    n_microbatches = 32

    [dynamism]
    case = "early_exit"      # none | moe | gradual_pruning | layer_freezing |
    first_exit_layer = 2     # sparse_attention | early_exit | mod
    exit_prob_per_layer = 0.25

    [balancer]
    kind = "partition_by_time"

    [repack]
    enabled = false

Unknown keys are rejected. Errors carry the dotted path of the offending key.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import jsonschema
import numpy as np

from .balancers import BalancerKind
from .dynamism import (CASE_TYPES, DEFAULT_SPARSE_BREAKPOINT, EarlyExit, GradualPruning,
                       LayerFreezing, MoD, MoE, NoDynamism, PruningSchedule, SparseAttention,
                       synthesize_sharded_params)
from .errors import ValidationError
from .simulator import MigrationOverlap, PipelineConfig, Schedule
from .workload import BYTES_PER_PARAM, Assignment, LayerSpec, WorkerSpec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULT_INTERVALS = {
    "none": 1000,
    "moe": 1,
    "sparse_attention": 1,
    "mod": 1,
    "early_exit": 100,
    "gradual_pruning": 1000,
    "layer_freezing": 50,
}
PER_ITERATION_PROFILE_FRACTION = 0.01

_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_frac = {"type": "number", "minimum": 0, "maximum": 1}
_count = {"type": "integer", "minimum": 1}
_nonneg_int = {"type": "integer", "minimum": 0}


def _pos_or_list(item=_pos):
    return {"oneOf": [item, {"type": "array", "items": item, "minItems": 1}]}


def _case(tag, props, required=()):
    return {
        "if": {"properties": {"case": {"const": tag}}},
        "then": {"properties": {"case": True, **props}, "required": ["case", *required],
                 "additionalProperties": False},
    }


SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["model", "workers", "dynamism"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "iterations": _count,
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "rebalance_interval": _count,
        "profiling_cost_fraction": _nonneg,
        "model": {
            "type": "object",
            "required": ["depth"],
            "additionalProperties": False,
            "properties": {
                "depth": _count,
                "seed": _nonneg_int,
                "fwd_cost": _pos_or_list(),
                "bwd_cost": _pos_or_list(),
                "bwd_ratio": _pos,
                "param_count": _pos_or_list({"type": "integer", "minimum": 1}),
                "memory_bytes": _pos_or_list(),
                "cost_jitter": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "workers": {
            "type": "object",
            "required": ["count", "memory_capacity"],
            "additionalProperties": False,
            "properties": {"count": _count, "memory_capacity": _pos},
        },
        "pipeline": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_microbatches": _count,
                "schedule": {"enum": [s.value for s in Schedule]},
                "p2p_latency": _nonneg,
                "p2p_bandwidth": _pos,
                "activation_bytes_per_microbatch": _nonneg,
                "data_parallel_ways": _count,
                "allreduce_bandwidth": _pos,
                "allreduce_latency": _nonneg,
                "migration_overlap": {"enum": [m.value for m in MigrationOverlap]},
                "optimizer_state_factor": _nonneg,
                "csr_index_factor": _pos,
                "tokens_per_microbatch": _count,
                "profile_noise": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "dynamism": {
            "type": "object",
            "required": ["case"],
            "properties": {"case": {"enum": sorted(CASE_TYPES)}},
            "allOf": [
                _case("none", {}),
                _case("moe", {"experts_per_layer": _count, "tokens_per_batch": _count,
                              "routing_skew": _pos, "moe_layer_stride": _count,
                              "capacity_factor": {"type": "number", "minimum": 1},
                              "ffn_fraction": _frac}),
                _case("gradual_pruning", {"s_initial": _frac, "s_final": _frac, "t0": _nonneg_int,
                                          "delta_t": _count, "n_steps": _count,
                                          "params_per_layer": _count, "scale_spread": _nonneg,
                                          "sparse_breakpoint": _frac},
                      ["s_final", "t0", "delta_t", "n_steps"]),
                _case("layer_freezing", {"freeze_interval": _count, "converge_front_bias": _frac,
                                         "max_frozen_fraction": _frac}),
                _case("sparse_attention", {"sparsity_low": _frac, "sparsity_high": _frac,
                                           "attention_fraction_of_layer": _frac,
                                           "depth_decay": _frac}),
                _case("early_exit", {"first_exit_layer": _nonneg_int, "exit_prob_per_layer": _frac,
                                     "ramp_iterations": _nonneg_int}),
                _case("mod", {"capacity_fraction": _frac, "predictor_noise": _frac,
                              "routed_stride": _count}),
            ],
        },
        "balancer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": [k.value for k in BalancerKind]},
                "gamma": _nonneg,
                "max_rounds": _count,
            },
        },
        "repack": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "target_num_workers": _count,
                "headroom": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "contiguous": {"type": "boolean"},
                "restart_cost": _nonneg,
            },
        },
    },
}

_VALIDATOR = jsonschema.Draft202012Validator(SCHEMA)


@dataclass(frozen=True)
class RepackConfig:
    """``headroom`` scales worker capacity into the merge limit; ``restart_cost`` is
    charged (simulated seconds) whenever workers are released."""

    enabled: bool = False
    target_num_workers: int = 1
    headroom: float = 0.9
    contiguous: bool = True
    restart_cost: float = 0.0


@dataclass(frozen=True)
class Scenario:
    name: str
    layers: tuple[LayerSpec, ...]
    workers: tuple[WorkerSpec, ...]
    pipeline: PipelineConfig
    case: Any
    balancer: BalancerKind
    gamma: float
    max_rounds: int
    rebalance_interval: int
    repack: RepackConfig
    iterations: int
    seed: int
    profiling_cost_fraction: float
    raw: Mapping[str, Any]

    @property
    def content_hash(self) -> str:
        return scenario_hash(self.raw)

    def with_balancer(self, kind: BalancerKind | str) -> "Scenario":
        raw = copy.deepcopy(dict(self.raw))
        raw.setdefault("balancer", {})["kind"] = BalancerKind(kind).value
        return scenario_from_dict(raw)

    def with_seed(self, seed: int) -> "Scenario":
        raw = copy.deepcopy(dict(self.raw))
        raw["seed"] = int(seed)
        return scenario_from_dict(raw)

    def with_overrides(self, **sections: Mapping[str, Any]) -> "Scenario":
        """Merge top-level keys or whole sections into the raw scenario and re-resolve."""
        raw = copy.deepcopy(dict(self.raw))
        for key, value in sections.items():
            if isinstance(value, Mapping):
                raw.setdefault(key, {}).update(value)
            else:
                raw[key] = value
        return scenario_from_dict(raw)


def _path(err: jsonschema.ValidationError) -> str:
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def validate_dict(raw: Mapping[str, Any]) -> None:
    errors = sorted(_VALIDATOR.iter_errors(raw), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        # oneOf/if-then report the innermost useful message
        lines = []
        for err in errors:
            leaf = min(err.context, key=lambda e: len(e.absolute_path), default=None) if err.context else None
            lines.append(f"{_path(err)}: {(leaf or err).message}")
        raise ValidationError("invalid scenario:\n  " + "\n  ".join(lines))


def _per_layer(value, depth: int, name: str) -> list:
    if isinstance(value, list):
        if len(value) != depth:
            raise ValidationError(f"model.{name}: expected {depth} values, got {len(value)}")
        return list(value)
    return [value] * depth


def _build_layers(model: Mapping[str, Any], seed: int) -> tuple[LayerSpec, ...]:
    depth = model["depth"]
    fwd = [float(x) for x in _per_layer(model.get("fwd_cost", 1e-3), depth, "fwd_cost")]
    if "bwd_cost" in model:
        bwd = [float(x) for x in _per_layer(model["bwd_cost"], depth, "bwd_cost")]
    else:
        bwd = [f * model.get("bwd_ratio", 2.0) for f in fwd]
    jitter = model.get("cost_jitter", 0.0)
    if jitter > 0:
        rng = np.random.default_rng([model.get("seed", seed), 0xC057])
        scale = 1.0 + rng.uniform(-jitter, jitter, size=depth)
        fwd = [f * float(s) for f, s in zip(fwd, scale)]
        bwd = [b * float(s) for b, s in zip(bwd, scale)]
    params = [int(x) for x in _per_layer(model.get("param_count", 1_000_000), depth, "param_count")]
    # weights, gradients and two Adam moments: 16 bytes per parameter
    default_mem = [p * BYTES_PER_PARAM * 4.0 for p in params]
    mem = ([float(x) for x in _per_layer(model["memory_bytes"], depth, "memory_bytes")]
           if "memory_bytes" in model else default_mem)
    return tuple(LayerSpec(i, fwd[i], bwd[i], params[i], mem[i]) for i in range(depth))


def _build_case(dyn: Mapping[str, Any], layers, n_workers: int, seed: int):
    opts = {k: v for k, v in dyn.items() if k != "case"}
    tag = dyn["case"]
    if tag == "gradual_pruning":
        sched = PruningSchedule(opts.get("s_initial", 0.0), opts["s_final"], opts["t0"],
                                opts["delta_t"], opts["n_steps"])
        stages = Assignment.uniform(len(layers), list(range(n_workers))).stage_ranges()
        shards = synthesize_sharded_params([list(r) for r in stages], opts.get("params_per_layer", 256),
                                           seed, opts.get("scale_spread", 0.5))
        return GradualPruning(sched, shards, opts.get("sparse_breakpoint", DEFAULT_SPARSE_BREAKPOINT))
    cls = {"none": NoDynamism, "moe": MoE, "layer_freezing": LayerFreezing,
           "sparse_attention": SparseAttention, "early_exit": EarlyExit, "mod": MoD}[tag]
    return cls(**opts)


def scenario_from_dict(raw: Mapping[str, Any]) -> Scenario:
    """Validate and resolve a parsed scenario document."""
    raw = json.loads(json.dumps(raw))  # plain, detached copy
    validate_dict(raw)
    seed = raw.get("seed", 0)
    tag = raw["dynamism"]["case"]
    interval = raw.get("rebalance_interval", DEFAULT_INTERVALS[tag])
    workers_sec = raw["workers"]
    if workers_sec["count"] > raw["model"]["depth"]:
        raise ValidationError(f"workers.count: {workers_sec['count']} workers for "
                              f"{raw['model']['depth']} layers")
    layers = _build_layers(raw["model"], seed)
    workers = tuple(WorkerSpec(i, float(workers_sec["memory_capacity"]))
                    for i in range(workers_sec["count"]))
    pipe = dict(raw.get("pipeline", {}))
    pipe.setdefault("migration_overlap", "overlap_backward" if interval == 1 else "serial")
    pipeline = PipelineConfig(**pipe)
    case = _build_case(raw["dynamism"], layers, len(workers), seed)
    bal = raw.get("balancer", {})
    rep = raw.get("repack", {})
    repack = RepackConfig(**rep)
    if repack.enabled and repack.target_num_workers > len(workers):
        raise ValidationError(f"repack.target_num_workers: {repack.target_num_workers} exceeds "
                              f"{len(workers)} workers")
    fraction = raw.get("profiling_cost_fraction", PER_ITERATION_PROFILE_FRACTION if interval == 1 else 1.0)
    return Scenario(name=raw.get("name", tag), layers=layers, workers=workers, pipeline=pipeline,
                    case=case, balancer=BalancerKind(bal.get("kind", "static_uniform")),
                    gamma=float(bal.get("gamma", 0.0)), max_rounds=int(bal.get("max_rounds", 10_000)),
                    rebalance_interval=interval, repack=repack, iterations=raw.get("iterations", 100),
                    seed=seed, profiling_cost_fraction=float(fraction), raw=raw)


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ValidationError(f"{path}: cannot read scenario ({exc.strerror})") from exc
    try:
        return scenario_from_dict(raw)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def scenario_hash(raw: Mapping[str, Any]) -> str:
    """SHA-256 over the canonical scenario minus its name and balancer section."""
    body = {k: v for k, v in raw.items() if k not in ("balancer", "name")}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
