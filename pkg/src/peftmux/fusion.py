"""Spatial task fusion: contiguous bin-packing of token-sorted tasks by DP."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .cost import HybridTask, extending_pipeline_latencies, memory_estimate
from .profile import ProfileTable
from .workload import BackboneSpec, PlannerConfig, Task


class InfeasiblePlan(RuntimeError):
    """No plan satisfies the memory limit."""


@dataclass(frozen=True)
class FusionPlan:
    boundaries: tuple[int, ...]  # start index of each hybrid task
    htasks: tuple[HybridTask, ...]
    htask_costs: tuple[float, ...]  # L(H) of each hybrid task
    modeled_cost: float
    dp_table: tuple[tuple[float, ...], ...]  # dp_table[m-1][n-1] = F(m, n)

    @property
    def ranges(self) -> list[tuple[int, int]]:
        return [(h.start, h.end) for h in self.htasks]


def range_costs(tasks: Sequence[Task], backbone: BackboneSpec, table: ProfileTable,
                cfg: PlannerConfig) -> list[list[float]]:
    """cost[i][j] = L(H_{i..j}), or inf when the range fails the memory gate."""
    M = len(tasks)
    cost = [[math.inf] * M for _ in range(M)]
    for i in range(M):
        prefix = extending_pipeline_latencies(tasks[i:], backbone, table, cfg.micro_batch_count)
        for j, lat in zip(range(i, M), prefix):
            if memory_estimate(tasks[i:j + 1], backbone, cfg).oom:
                # more members only add memory
                break
            cost[i][j] = lat
    return cost


def partition_cost(ranges: Sequence[tuple[int, int]], cost: Sequence[Sequence[float]],
                   num_stages: int) -> float:
    """Objective of a contiguous partition: first hybrid task in full, the rest per stage."""
    total = cost[ranges[0][0]][ranges[0][1]]
    for i, j in ranges[1:]:
        total = total + cost[i][j] / num_stages
    return total


def fuse_tasks(tasks: Sequence[Task], backbone: BackboneSpec, table: ProfileTable,
               cfg: PlannerConfig) -> FusionPlan:
    """Partition token-sorted ``tasks`` into hybrid tasks minimizing modeled latency.

    F(m, 1) = L(H_{1..m});
    F(m, n) = min_{n-1 <= i <= m-1} F(i, n-1) + L(H_{i+1..m}) / S.
    Ties go to fewer hybrid tasks, then to the earliest split.
    """
    M = len(tasks)
    if M == 0:
        raise ValueError("empty task list")
    keys = [t.tokens_per_microbatch for t in tasks]
    if any(b < a for a, b in zip(keys, keys[1:])):
        raise ValueError("tasks must be sorted ascending by token count")

    S = backbone.num_stages
    cost = range_costs(tasks, backbone, table, cfg)
    inf = math.inf
    # F[m][n], 1-based in both indices; arg[m][n] = i (tasks in the first n-1 groups)
    F = [[inf] * (M + 1) for _ in range(M + 1)]
    arg = [[-1] * (M + 1) for _ in range(M + 1)]
    for m in range(1, M + 1):
        F[m][1] = cost[0][m - 1]
        arg[m][1] = 0
    for n in range(2, M + 1):
        for m in range(n, M + 1):
            best, best_i = inf, -1
            for i in range(n - 1, m):
                prev = F[i][n - 1]
                if prev == inf or cost[i][m - 1] == inf:
                    continue
                v = prev + cost[i][m - 1] / S
                if v < best:
                    best, best_i = v, i
            F[m][n], arg[m][n] = best, best_i

    best_n = min(range(1, M + 1), key=lambda n: (F[M][n], n))
    if F[M][best_n] == inf:
        raise InfeasiblePlan("infeasible: memory")

    starts = []
    m, n = M, best_n
    while n >= 1:
        i = arg[m][n]
        starts.append(i)
        m, n = i, n - 1
    starts.reverse()
    ends = [s - 1 for s in starts[1:]] + [M - 1]
    htasks = tuple(HybridTask.from_range(tasks, s, e) for s, e in zip(starts, ends))
    table_rows = tuple(tuple(F[m][1:]) for m in range(1, M + 1))
    return FusionPlan(
        boundaries=tuple(starts),
        htasks=htasks,
        htask_costs=tuple(cost[h.start][h.end] for h in htasks),
        modeled_cost=F[M][best_n],
        dp_table=table_rows,
    )
