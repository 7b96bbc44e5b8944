"""Temporal grouping of hybrid tasks into buckets with balanced first-stage load."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .cost import HybridTask, activation_bytes_per_microbatch, stage_latency
from .fusion import InfeasiblePlan
from .intrastage import bucket_stage_latencies
from .pipeline import (BubbleReport, PipelineSchedule, PipelineTemplate, TemplateError,
                       generate_template, simulate)
from .profile import ProfileTable
from .workload import BackboneSpec, PlannerConfig

EXACT_LIMIT = 12


def bucket_loads(weights: Sequence[float], assignment: Sequence[int], P: int) -> list[float]:
    loads = [0.0] * P
    for w, b in zip(weights, assignment):
        loads[b] += w
    return loads


def variance_objective(weights: Sequence[float], assignment: Sequence[int], P: int) -> float:
    """Unnormalized sum of squared deviations of bucket loads from their mean.

    Labels are canonicalized first, so every labeling of one partition gives
    the same float.
    """
    loads = bucket_loads(weights, canonical(assignment), P)
    mean = sum(loads) / P
    return sum((x - mean) ** 2 for x in loads)


def canonical(assignment: Sequence[int]) -> tuple[int, ...]:
    """Relabel buckets by first appearance (restricted-growth form)."""
    relabel: dict[int, int] = {}
    return tuple(relabel.setdefault(b, len(relabel)) for b in assignment)


def _water_fill_sq(sums: Sequence[float], extra: float) -> float:
    """min sum_j L_j^2 when ``extra`` is spread continuously over loads ``sums``."""
    xs = sorted(sums)
    n = len(xs)
    acc = 0.0
    level = xs[-1] + extra / n
    for k in range(n):
        # raise the k+1 smallest to a common level
        acc += xs[k]
        lvl = (acc + extra) / (k + 1)
        if k + 1 == n or lvl <= xs[k + 1]:
            level = lvl
            break
    return sum(max(x, level) ** 2 for x in xs)


def _exact_partition(weights: Sequence[float], P: int) -> tuple[int, ...]:
    """Branch and bound over restricted-growth strings in lexicographic order.

    The first optimum found is kept, so ties resolve to the lexicographically
    smallest assignment vector.
    """
    N = len(weights)
    total = sum(weights)
    suffix = [0.0] * (N + 1)
    for i in range(N - 1, -1, -1):
        suffix[i] = suffix[i + 1] + weights[i]
    best_val = math.inf
    best: Optional[tuple[int, ...]] = None
    assign = [0] * N
    sums = [0.0] * P
    slack = 1e-9 * max(1.0, total * total)

    def rec(i: int, used: int) -> None:
        nonlocal best_val, best
        if N - i < P - used:
            return
        if i == N:
            val = variance_objective(weights, assign, P)
            if val < best_val:
                best_val, best = val, tuple(assign)
            return
        if best is not None:
            lb = _water_fill_sq(sums, suffix[i]) - total * total / P
            if lb > best_val + slack:
                return
        for b in range(min(used + 1, P)):
            assign[i] = b
            sums[b] += weights[i]
            rec(i + 1, max(used, b + 1))
            sums[b] -= weights[i]

    rec(0, 0)
    assert best is not None
    return best


def _lpt_seed(weights: Sequence[float], P: int) -> list[int]:
    order = sorted(range(len(weights)), key=lambda i: (-weights[i], i))
    loads = [0.0] * P
    assign = [0] * len(weights)
    for i in order:
        b = min(range(P), key=lambda j: (loads[j], j))
        assign[i] = b
        loads[b] += weights[i]
    return assign


def _local_search(weights: Sequence[float], assign: list[int], P: int) -> list[int]:
    """Best-improvement single moves and pairwise swaps until no strict gain."""
    N = len(weights)
    cur = variance_objective(weights, assign, P)
    while True:
        counts = [0] * P
        for b in assign:
            counts[b] += 1
        best_val, best_move = cur, None
        for i in range(N):
            a = assign[i]
            if counts[a] > 1:
                for b in range(P):
                    if b == a:
                        continue
                    assign[i] = b
                    v = variance_objective(weights, assign, P)
                    assign[i] = a
                    if v < best_val:
                        best_val, best_move = v, ((i, b),)
            for j in range(i + 1, N):
                b = assign[j]
                if a == b:
                    continue
                assign[i], assign[j] = b, a
                v = variance_objective(weights, assign, P)
                assign[i], assign[j] = a, b
                if v < best_val:
                    best_val, best_move = v, ((i, b), (j, a))
        if best_move is None:
            return assign
        for i, b in best_move:
            assign[i] = b
        cur = best_val


def balance_partition(weights: Sequence[float], P: int) -> tuple[int, ...]:
    """Assignment of items to P non-empty buckets minimizing the variance objective."""
    N = len(weights)
    if N == 0:
        raise ValueError("empty hybrid-task list")
    if not 1 <= P <= N:
        raise ValueError(f"P must satisfy 1 <= P <= N ({N}), got {P}")
    if N <= EXACT_LIMIT:
        return _exact_partition(weights, P)
    return canonical(_local_search(weights, _lpt_seed(weights, P), P))


def first_stage_latencies(htasks: Sequence[HybridTask], backbone: BackboneSpec,
                          table: ProfileTable) -> list[float]:
    return [stage_latency(h, 0, backbone, table) for h in htasks]


def group_htasks(htasks: Sequence[HybridTask], P: int, backbone: BackboneSpec,
                 table: ProfileTable) -> tuple[tuple[int, ...], ...]:
    """Buckets as tuples of hybrid-task indices, bucket j holding label j."""
    assign = balance_partition(first_stage_latencies(htasks, backbone, table), P)
    return tuple(tuple(i for i, b in enumerate(assign) if b == j) for j in range(P))


@dataclass
class GroupingCandidate:
    P: int
    buckets: tuple[tuple[int, ...], ...]
    bucket_latencies: dict[int, tuple[float, ...]]
    template: Optional[PipelineTemplate]
    schedule: Optional[PipelineSchedule]
    bubbles: Optional[BubbleReport]
    makespan: float
    reason: str = ""


@dataclass
class BucketPlan:
    buckets: tuple[tuple[int, ...], ...]
    bucket_loads: tuple[float, ...]
    variance: float
    chosen_P: int
    curve: list[tuple[int, float]]
    chosen: GroupingCandidate
    candidates: list[GroupingCandidate] = field(default_factory=list)


def memory_terms(htasks: Sequence[HybridTask], buckets: Sequence[Sequence[int]],
                 backbone: BackboneSpec) -> tuple[float, dict[int, float]]:
    """(static bytes per stage, per-bucket activation of one micro-batch)."""
    S = backbone.num_stages
    grads = sum(t.grad_buffer_bytes for h in htasks for t in h.members)
    static = (backbone.backbone_param_bytes + grads) / S
    act = {j: sum(activation_bytes_per_microbatch(t) for i in b for t in htasks[i].members)
           for j, b in enumerate(buckets)}
    return static, act


def evaluate_grouping(htasks: Sequence[HybridTask], buckets: Sequence[Sequence[int]],
                      backbone: BackboneSpec, table: ProfileTable, cfg: PlannerConfig,
                      order: Optional[Sequence[int]] = None) -> GroupingCandidate:
    lat = {j: bucket_stage_latencies([htasks[i] for i in b], backbone, table)
           for j, b in enumerate(buckets)}
    static, act = memory_terms(htasks, buckets, backbone)
    P = len(buckets)
    try:
        tpl = generate_template(lat, cfg.micro_batch_count, static_bytes=static,
                                activation_bytes=act, memory_limit=cfg.memory_limit_per_gpu,
                                order=order)
    except TemplateError as e:
        return GroupingCandidate(P, tuple(map(tuple, buckets)), lat, None, None, None,
                                 math.inf, str(e))
    sched, rep = simulate(tpl, lat)
    return GroupingCandidate(P, tuple(map(tuple, buckets)), lat, tpl, sched, rep,
                             sched.makespan)


def select_grouping(htasks: Sequence[HybridTask], backbone: BackboneSpec,
                    table: ProfileTable, cfg: PlannerConfig) -> BucketPlan:
    """Try every bucket count, simulate each template, keep the fastest (ties: fewer)."""
    N = len(htasks)
    if N == 0:
        raise ValueError("empty hybrid-task list")
    top = N if cfg.max_buckets is None else min(N, cfg.max_buckets)
    weights = first_stage_latencies(htasks, backbone, table)
    cands = []
    for P in range(1, top + 1):
        assign = balance_partition(weights, P)
        buckets = tuple(tuple(i for i, b in enumerate(assign) if b == j) for j in range(P))
        cands.append(evaluate_grouping(htasks, buckets, backbone, table, cfg))
    best = min(cands, key=lambda c: (c.makespan, c.P))
    if best.makespan == math.inf:
        raise InfeasiblePlan("infeasible: memory")
    loads = tuple(sum(weights[i] for i in b) for b in best.buckets)
    assign = [0] * N
    for j, b in enumerate(best.buckets):
        for i in b:
            assign[i] = j
    return BucketPlan(
        buckets=best.buckets,
        bucket_loads=loads,
        variance=variance_objective(weights, assign, best.P),
        chosen_P=best.P,
        curve=[(c.P, c.makespan) for c in cands],
        chosen=best,
        candidates=cands,
    )
