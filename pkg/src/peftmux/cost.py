"""Latency and memory model for hybrid tasks.

Stage latency of a hybrid task is the sharded base-operator time at the fused
token count plus, per fused adapter group, the larger of the
utilization-weighted adapter sum and the slowest single adapter.
Communication is assumed overlapped and left out here; the intra-stage
scheduler and the pipeline simulator account for it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

from .profile import ProfileTable
from .workload import BackboneSpec, PlannerConfig, Task


@dataclass(frozen=True)
class HybridTask:
    """Tasks ``start..end`` (inclusive, 0-based) of the token-sorted list, batched."""

    start: int
    end: int
    members: tuple[Task, ...]

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError("hybrid task range must satisfy start <= end")
        if len(self.members) != self.end - self.start + 1:
            raise ValueError("member count does not match range")

    @classmethod
    def from_range(cls, tasks: Sequence[Task], start: int, end: int) -> "HybridTask":
        return cls(start, end, tuple(tasks[start:end + 1]))

    @classmethod
    def single(cls, task: Task, index: int = 0) -> "HybridTask":
        return cls(index, index, (task,))

    @property
    def name(self) -> str:
        return "+".join(t.task_id for t in self.members)

    @property
    def total_tokens(self) -> int:
        return sum(t.tokens_per_microbatch for t in self.members)

    @property
    def fused_adapter_groups(self) -> dict[str, tuple[int, ...]]:
        """Attach point -> indices of members whose adapter attaches there."""
        groups: dict[str, list[int]] = {}
        for k, t in enumerate(self.members):
            for p in t.adapter.attach_points:
                groups.setdefault(p, []).append(k)
        return {p: tuple(ks) for p, ks in groups.items()}


@dataclass(frozen=True)
class StageLatency:
    baseop_part: tuple[float, ...]
    adapter_part: tuple[float, ...]

    @property
    def per_stage(self) -> tuple[float, ...]:
        return tuple(b + a for b, a in zip(self.baseop_part, self.adapter_part))


@dataclass(frozen=True)
class MemoryEstimate:
    per_stage_bytes: tuple[float, ...]
    backbone_share: float
    grad_share: float
    activation_sum: float
    limit: float

    @property
    def peak_bytes(self) -> float:
        return max(self.per_stage_bytes)

    @property
    def oom(self) -> bool:
        return self.peak_bytes > self.limit


def fused_adapter_latency(latencies: Iterable[float], utilizations: Iterable[float]) -> float:
    """max(sum_k u_k * t_k, max_k t_k) for one horizontally fused adapter group."""
    lat = list(latencies)
    if not lat:
        return 0.0
    weighted = sum(u * t for u, t in zip(utilizations, lat))
    return max(weighted, max(lat))


def adapter_samples(tasks: Sequence[Task], attach_point: str,
                    table: ProfileTable) -> tuple[list[float], list[float]]:
    """(t_a(n_k), u_a(n_k)) for every task attached at ``attach_point``."""
    lat, util = [], []
    for t in tasks:
        if attach_point not in t.adapter.attach_points:
            continue
        op = t.adapter.op_for(attach_point)
        n = t.tokens_per_microbatch
        lat.append(table.eval_latency(op, n))
        util.append(table.eval_utilization(op, n))
    return lat, util


def baseop_latency(tokens: float, stage: int, backbone: BackboneSpec,
                   table: ProfileTable) -> float:
    g = backbone.gpu_count[stage]
    return sum(table.eval_latency(op, tokens) / g
               for op in backbone.stage_operators[stage] if not table.is_comm(op))


def _adapter_part(h: HybridTask, stage: int, backbone: BackboneSpec,
                  table: ProfileTable) -> float:
    groups = h.fused_adapter_groups
    total = 0.0
    for op in backbone.stage_operators[stage]:
        if op not in groups:
            continue
        lat, util = adapter_samples([h.members[k] for k in groups[op]], op, table)
        total += fused_adapter_latency(lat, util)
    return total


def _check_stage(stage: int, backbone: BackboneSpec) -> None:
    if not 0 <= stage < backbone.num_stages:
        raise IndexError(f"stage {stage} out of range [0, {backbone.num_stages})")


def stage_latency(h: HybridTask, stage: int, backbone: BackboneSpec,
                  table: ProfileTable) -> float:
    """Latency (ms) of one forward (= backward) pass of ``h`` on ``stage`` (0-based)."""
    _check_stage(stage, backbone)
    return (baseop_latency(h.total_tokens, stage, backbone, table)
            + _adapter_part(h, stage, backbone, table))


def stage_latencies(h: HybridTask, backbone: BackboneSpec,
                    table: ProfileTable) -> StageLatency:
    n = h.total_tokens
    base = tuple(baseop_latency(n, s, backbone, table) for s in range(backbone.num_stages))
    adap = tuple(_adapter_part(h, s, backbone, table) for s in range(backbone.num_stages))
    return StageLatency(base, adap)


def pipeline_latency_from_stages(per_stage: Sequence[float], micro_batches: int) -> float:
    if micro_batches < 1:
        raise ValueError("micro_batches must be ≥1")
    return 2 * sum(per_stage[:-1]) + 2 * micro_batches * max(per_stage)


def pipeline_latency(h: HybridTask, backbone: BackboneSpec, table: ProfileTable,
                     micro_batches: int) -> float:
    """End-to-end 1F1B latency: warm-up/drain term plus C steady forward-backward pairs."""
    return pipeline_latency_from_stages(stage_latencies(h, backbone, table).per_stage,
                                        micro_batches)


def extending_pipeline_latencies(tasks: Sequence[Task], backbone: BackboneSpec,
                                 table: ProfileTable, micro_batches: int) -> Iterator[float]:
    """L(H) of tasks[:1], tasks[:2], ... computed incrementally.

    Same arithmetic, in the same order, as :func:`pipeline_latency` on each
    prefix, so the values agree bit for bit.
    """
    S = backbone.num_stages
    acc: dict[str, list[float]] = {}  # attach point -> [sum u*t, max t]
    present = set(backbone.all_operators())
    tokens = 0
    for t in tasks:
        tokens += t.tokens_per_microbatch
        n = t.tokens_per_microbatch
        for p in t.adapter.attach_points:
            if p not in present:
                continue
            op = t.adapter.op_for(p)
            lat, u = table.eval_latency(op, n), table.eval_utilization(op, n)
            a = acc.get(p)
            if a is None:
                acc[p] = [0 + u * lat, lat]
            else:
                a[0] += u * lat
                a[1] = max(a[1], lat)
        per_stage = []
        for s in range(S):
            adapter = 0.0
            for op in backbone.stage_operators[s]:
                a = acc.get(op)
                if a is not None:
                    adapter += max(a[0], a[1])
            per_stage.append(baseop_latency(tokens, s, backbone, table) + adapter)
        yield pipeline_latency_from_stages(per_stage, micro_batches)


def activation_bytes_per_microbatch(task: Task) -> float:
    """Activation of one in-flight micro-batch on one stage."""
    return float(task.activation_bytes_per_token * task.micro_batch_size * task.padded_seq_len)


def memory_estimate(tasks: Sequence[Task], backbone: BackboneSpec,
                    cfg: PlannerConfig) -> MemoryEstimate:
    """Per-stage memory of a set of co-located tasks under 1F1B.

    Backbone weights and input-gradient buffers are split over the stages;
    activations are charged for the worst case of S in-flight copies.
    """
    S = backbone.num_stages
    grads = sum(t.grad_buffer_bytes for t in tasks)
    activation = sum(activation_bytes_per_microbatch(t) * S for t in tasks)
    per_stage = tuple((backbone.backbone_param_bytes + grads) / S + activation
                      for _ in range(S))
    backbone_share = backbone.backbone_param_bytes / S
    grad_share = grads / S
    return MemoryEstimate(per_stage, backbone_share, grad_share, activation,
                          cfg.memory_limit_per_gpu)
