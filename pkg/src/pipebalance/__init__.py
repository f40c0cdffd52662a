"""Load balancing for pipeline-parallel training of dynamic models, on a simulated cluster."""

from .balancers import (BalancerKind, MigrationPlan, ProfileSnapshot, diffusion_balance, partition,
                        potential, rebalance)
from .dynamism import (EarlyExit, GradualPruning, LayerFreezing, MoD, MoE, NoDynamism,
                       PruningSchedule, SparseAttention, global_magnitude_prune, next_snapshot,
                       sparsity_at)
from .errors import InfeasibleError, PipeBalanceError, StructuralError, ValidationError
from .harness import RunReport, compare, emit, run_scenario
from .repack import RepackPlan, apply_repack, plan_repack
from .scenario import Scenario, load_scenario, scenario_from_dict
from .simulator import (IterationTrace, PipelineConfig, bubble_ratio, hybrid_allreduce_penalty,
                        migration_overhead, simulate_iteration)
from .workload import (Assignment, LayerSpec, LayerState, WorkerSpec, bottleneck, imbalance,
                       worker_loads)

__version__ = "0.1.0"

__all__ = [
    "Assignment", "BalancerKind", "EarlyExit", "GradualPruning", "InfeasibleError", "IterationTrace",
    "LayerFreezing", "LayerSpec", "LayerState", "MigrationPlan", "MoD", "MoE", "NoDynamism",
    "PipeBalanceError", "PipelineConfig", "ProfileSnapshot", "PruningSchedule", "RepackPlan",
    "RunReport", "Scenario", "SparseAttention", "StructuralError", "ValidationError", "WorkerSpec",
    "apply_repack", "bottleneck", "bubble_ratio", "compare", "diffusion_balance", "emit",
    "global_magnitude_prune", "hybrid_allreduce_penalty", "imbalance", "load_scenario",
    "migration_overhead", "next_snapshot", "partition", "plan_repack", "potential", "rebalance",
    "run_scenario", "scenario_from_dict", "simulate_iteration", "sparsity_at", "worker_loads",
]
