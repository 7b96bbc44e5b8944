"""End-to-end planning: validate, sort, fuse, align, group, template, simulate."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Any, Optional, Sequence

from .alignment import (ChunkLayout, align_htask, apply_alignment, effective_token_stats,
                        zero_pad_stats)
from .cost import HybridTask, MemoryEstimate, memory_estimate
from .fusion import FusionPlan, InfeasiblePlan, fuse_tasks
from .grouping import BucketPlan, select_grouping
from .pipeline import (PipelineTemplate, check_last_stage_busy, simulate,
                       steady_dominance_ratio)
from .profile import ProfileTable
from .workload import (BackboneSpec, PlannerConfig, Task, backbone_to_dict, planner_to_dict,
                       sort_by_tokens, validate_workload)

REPORT_VERSION = 1


@dataclass
class PlanResult:
    tasks: list[Task]  # token-sorted
    fusion: FusionPlan
    htasks: tuple[HybridTask, ...]  # after alignment overrides
    layouts: tuple[ChunkLayout, ...]
    grouping: BucketPlan
    memory: MemoryEstimate
    wall_clock_s: float

    @property
    def template(self) -> PipelineTemplate:
        return self.grouping.chosen.template

    @property
    def schedule(self):
        return self.grouping.chosen.schedule

    @property
    def bubbles(self):
        return self.grouping.chosen.bubbles

    @property
    def makespan(self) -> float:
        return self.grouping.chosen.makespan

    @property
    def bucket_latencies(self) -> dict[int, tuple[float, ...]]:
        return self.grouping.chosen.bucket_latencies

    def task_rates(self) -> dict[str, float]:
        """Tokens per millisecond each task makes in one simulated iteration."""
        C = self.template.micro_batches
        return {t.task_id: C * t.tokens_per_microbatch / self.makespan
                for h in self.htasks for t in h.members}


def plan(tasks: Sequence[Task], backbone: BackboneSpec, table: ProfileTable,
         cfg: PlannerConfig, *, align: bool = True, validate: bool = True) -> PlanResult:
    """Raise ``WorkloadError`` on invalid input and ``InfeasiblePlan`` when nothing fits."""
    t0 = time.perf_counter()
    if validate:
        validate_workload(tasks, backbone, cfg, table).raise_if_rejected()
    ordered = sort_by_tokens(tasks)
    fusion = fuse_tasks(ordered, backbone, table, cfg)
    htasks = fusion.htasks
    layouts: tuple[ChunkLayout, ...] = ()
    if align:
        layouts = tuple(align_htask(h, cfg) for h in htasks)
        htasks = tuple(apply_alignment(h, lay, cfg.micro_batch_count)
                       for h, lay in zip(htasks, layouts))
    grouping = select_grouping(htasks, backbone, table, cfg)
    mem = memory_estimate(ordered, backbone, cfg)
    return PlanResult(ordered, fusion, htasks, layouts, grouping, mem,
                      time.perf_counter() - t0)


def _num(x: float) -> Optional[float]:
    return None if x == float("inf") else x


def plan_report(res: PlanResult, backbone: BackboneSpec, cfg: PlannerConfig) -> dict[str, Any]:
    tpl = res.template
    sched = res.schedule
    bub = res.bubbles
    align_rows = []
    for h, lay in zip(res.fusion.htasks, res.layouts):
        total, orig, frac = effective_token_stats(lay.stats)
        zp = zero_pad_stats(h.members)
        align_rows.append({
            "htask": lay.htask,
            "chunk_size": lay.chunk_size,
            "padding_flag": lay.padding_flag,
            "chunks": len(lay.chunks),
            "original_tokens": orig,
            "intra_task_pad": lay.stats.intra_task_pad,
            "inter_task_pad": lay.stats.inter_task_pad,
            "total_tokens": total,
            "effective_fraction": frac,
            "zero_pad_inter_task_pad": zp.inter_task_pad,
            "zero_pad_effective_fraction": effective_token_stats(zp)[2],
        })
    return {
        "version": REPORT_VERSION,
        "backbone": backbone_to_dict(backbone),
        "planner": planner_to_dict(cfg),
        "fusion": {
            "boundaries": list(res.fusion.boundaries),
            "modeled_cost_ms": res.fusion.modeled_cost,
            "htasks": [{"name": h.name,
                        "tasks": [t.task_id for t in h.members],
                        "tokens_per_microbatch": [t.tokens_per_microbatch for t in h.members],
                        "cost_ms": c}
                       for h, c in zip(res.htasks, res.fusion.htask_costs)],
        },
        "grouping": {
            "buckets": [list(b) for b in res.grouping.buckets],
            "bucket_loads_ms": list(res.grouping.bucket_loads),
            "variance": res.grouping.variance,
            "chosen_P": res.grouping.chosen_P,
            "curve": [[P, _num(m)] for P, m in res.grouping.curve],
        },
        "template": {
            "bucket_order": list(tpl.bucket_order),
            "micro_batches": tpl.micro_batches,
            "num_stages": tpl.num_stages,
            "eager_limit": list(tpl.eager_limit),
            "bucket_latencies_ms": {str(b): list(v) for b, v in
                                    sorted(res.bucket_latencies.items())},
        },
        "simulation": {
            "makespan_ms": sched.makespan,
            "warmup_ms": bub.warmup_ms,
            "steady_ms": bub.steady_ms,
            "drain_ms": bub.drain_ms,
            "last_stage_idle_steady_ms": bub.last_stage_idle_steady,
            "internal_bubble_fraction": bub.internal_bubble_fraction,
            "steady_dominance_ratio": steady_dominance_ratio(sched),
            "last_stage_busy": check_last_stage_busy(sched).busy,
        },
        "alignment": align_rows,
        "memory": {
            "per_stage_bytes": list(res.memory.per_stage_bytes),
            "peak_bytes": res.memory.peak_bytes,
            "limit_bytes": res.memory.limit,
        },
        "planner_wall_clock_s": res.wall_clock_s,
    }


def template_from_report(doc: dict[str, Any]) -> tuple[PipelineTemplate, dict[int, tuple[float, ...]]]:
    """Rebuild the simulator inputs stored in a plan report; raises ValueError if malformed."""
    try:
        t = doc["template"]
        lat = {int(b): tuple(float(x) for x in v) for b, v in t["bucket_latencies_ms"].items()}
        tpl = PipelineTemplate(tuple(int(b) for b in t["bucket_order"]),
                               int(t["micro_batches"]), int(t["num_stages"]),
                               tuple(int(x) for x in t["eager_limit"]))
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise ValueError(f"malformed plan: {e!r}") from e
    if sorted(tpl.bucket_order) != sorted(lat) or tpl.micro_batches < 1:
        raise ValueError("malformed plan: template and latencies disagree")
    if len(tpl.eager_limit) != tpl.num_stages or min(tpl.eager_limit, default=0) < 1:
        raise ValueError("malformed plan: bad eager limits")
    if any(len(v) != tpl.num_stages or min(v) < 0 for v in lat.values()):
        raise ValueError("malformed plan: bad stage latencies")
    return tpl, lat


def resimulate(doc: dict[str, Any]):
    tpl, lat = template_from_report(doc)
    return simulate(tpl, lat)


__all__ = ["PlanResult", "plan", "plan_report", "template_from_report", "resimulate",
           "InfeasiblePlan"]
