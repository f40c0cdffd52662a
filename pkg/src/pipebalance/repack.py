"""First-fit consolidation of pipeline stages onto fewer workers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import StructuralError, ValidationError
from .workload import Assignment, WorkerSpec


@dataclass(frozen=True)
class RepackPlan:
    """``transfers`` are ``(src, dst, local layer index)`` over positions in the input lists.

    ``worker_ids`` maps those positions back to worker ids when the plan was
    built from a pipeline; ``contiguous`` records whether only adjacent
    stages were merged.
    """

    transfers: tuple[tuple[int, int, int], ...]
    released_workers: tuple[int, ...]
    resulting_active_count: int
    target_met: bool
    final_mem_usage: tuple[float, ...]
    contiguous: bool = True
    worker_ids: tuple[int, ...] | None = None

    @property
    def released_ids(self) -> tuple[int, ...]:
        if self.worker_ids is None:
            return self.released_workers
        return tuple(self.worker_ids[p] for p in self.released_workers)

    @property
    def merges(self) -> list[tuple[int, int]]:
        """Distinct ``(src, dst)`` position pairs in transfer order."""
        seen, out = set(), []
        for src, dst, _ in self.transfers:
            if (src, dst) not in seen:
                seen.add((src, dst))
                out.append((src, dst))
        return out


def plan_repack(active: Sequence[bool], mem_usage: Sequence[float], layer_counts: Sequence[int],
                target_num_workers: int, max_mem: float, *, contiguous: bool = True,
                literal: bool = False, worker_ids: Sequence[int] | None = None) -> RepackPlan:
    """First-fit pairwise scan: fold ``src`` into the first later ``dst`` it fits with.

    Two workers merge when ``mem[src] + mem[dst] < max_mem`` and more than
    ``target_num_workers`` are still active. In the default mode a folded
    ``src`` has its memory zeroed and is never scanned again, and inactive
    destinations are skipped. ``literal=True`` keeps the stale bookkeeping of
    the original listing (for comparison only; it can double-count memory).
    With ``contiguous`` only the next active worker in list order is a
    candidate destination, so merged stages stay pipeline-adjacent.
    """
    n = len(active)
    if not (len(mem_usage) == len(layer_counts) == n):
        raise StructuralError("active, mem_usage and layer_counts must have equal length")
    if worker_ids is not None and len(worker_ids) != n:
        raise StructuralError("worker_ids must match the other per-worker lists")
    if target_num_workers < 1:
        raise ValidationError("target_num_workers must be >= 1")
    act = [bool(a) for a in active]
    if target_num_workers > sum(act):
        raise ValidationError(f"target {target_num_workers} exceeds {sum(act)} active workers")
    mem = [float(m) for m in mem_usage]
    counts = [int(c) for c in layer_counts]

    transfers: list[tuple[int, int, int]] = []
    released: list[int] = []
    for src in range(n):
        if not literal and not act[src]:
            continue
        for dst in range(src + 1, n):
            if not literal and not act[dst]:
                continue
            if mem[src] + mem[dst] < max_mem and sum(act) > target_num_workers:
                act[src] = False
                transfers.extend((src, dst, i) for i in range(counts[src]))
                released.append(src)
                mem[dst] += mem[src]
                counts[dst] += counts[src]
                if not literal:
                    mem[src] = 0.0
                    counts[src] = 0
                    break
            if contiguous and not literal:
                break  # only the next active worker is adjacent

    n_active = sum(act)
    ids = tuple(worker_ids) if worker_ids is not None else None
    return RepackPlan(tuple(transfers), tuple(dict.fromkeys(released)), n_active,
                      n_active <= target_num_workers, tuple(mem), contiguous and not literal, ids)


def plan_repack_for(assignment: Assignment, stage_mem: Sequence[float], target_num_workers: int,
                    max_mem: float, contiguous: bool = True) -> RepackPlan:
    """Build the per-worker lists from a pipeline (stage order) and plan."""
    n = assignment.n_stages
    return plan_repack([True] * n, stage_mem, assignment.stage_sizes(), target_num_workers,
                       max_mem, contiguous=contiguous, worker_ids=assignment.stage_to_worker)


def apply_repack(plan: RepackPlan, assignment: Assignment, workers: Sequence[WorkerSpec],
                 allow_nonphysical: bool = False) -> tuple[Assignment, list[WorkerSpec]]:
    """Fold the planned stages into their destinations and deactivate the sources.

    Contiguous plans merge each source stage into the next surviving stage.
    Non-contiguous plans cannot keep stage runs physical; with
    ``allow_nonphysical`` the surviving workers keep pipeline order and the
    layers are re-split by the planned per-worker layer counts.
    """
    ids = plan.worker_ids or assignment.stage_to_worker
    if tuple(ids) != assignment.stage_to_worker:
        raise StructuralError(f"plan was built for workers {tuple(ids)}, assignment has "
                              f"{assignment.stage_to_worker}")
    if not plan.transfers:
        return assignment, list(workers)
    sizes = assignment.stage_sizes()
    for src, dst, local in plan.transfers:
        if not (0 <= src < dst < len(sizes)):
            raise StructuralError(f"transfer {src}->{dst} outside the {len(sizes)} stages")

    released = set(plan.released_workers)
    if not plan.contiguous and not allow_nonphysical:
        raise StructuralError("non-contiguous repack plans need allow_nonphysical=True")
    per_merge: dict[tuple[int, int], int] = {}
    for src, dst, _ in plan.transfers:
        per_merge[(src, dst)] = per_merge.get((src, dst), 0) + 1
    new_sizes = sizes[:]
    for src, dst in plan.merges:
        if plan.contiguous and any(p not in released for p in range(src + 1, dst)):
            raise StructuralError(f"merge {src}->{dst} skips a surviving stage")
        if per_merge[(src, dst)] != new_sizes[src]:
            raise StructuralError(f"plan moves {per_merge[(src, dst)]} layers off stage {src}, "
                                  f"which holds {new_sizes[src]}")
        new_sizes[dst] += new_sizes[src]
        new_sizes[src] = 0

    keep = [p for p in range(len(sizes)) if p not in released]
    result = Assignment.from_sizes([new_sizes[p] for p in keep], [ids[p] for p in keep])
    gone = {ids[p] for p in released}
    new_workers = [WorkerSpec(w.id, w.memory_capacity, w.active and w.id not in gone) for w in workers]
    return result, new_workers
