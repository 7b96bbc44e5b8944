"""Input domain types: backbone topology, PEFT tasks, adapters, planner config.

All types are frozen dataclasses. Construction does not validate; call
:func:`validate_workload` to get a full diagnostic report.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

ADAPTER_TYPES = ("additive", "selective", "reparameterized")

# Operator ids containing one of these markers are treated as attention cores
# when a backbone does not list them explicitly.
ATTENTION_CORE_MARKERS = ("attn_core", "attention_core", "sdpa", "flash_attn")


class WorkloadError(ValueError):
    """Raised when a workload is rejected or a workload file is malformed."""


@dataclass(frozen=True)
class AdapterSpec:
    adapter_type: str
    attach_points: tuple[str, ...]
    adapter_op_ids: tuple[str, ...]

    def op_for(self, attach_point: str) -> str:
        """Adapter operator used at ``attach_point``.

        A single adapter op id is shared by every attach point; otherwise ids
        pair with attach points positionally.
        """
        if len(self.adapter_op_ids) == 1:
            return self.adapter_op_ids[0]
        return self.adapter_op_ids[self.attach_points.index(attach_point)]


@dataclass(frozen=True)
class BackboneSpec:
    num_stages: int
    gpu_count: tuple[int, ...]
    stage_operators: tuple[tuple[str, ...], ...]
    backbone_param_bytes: int
    attention_ops: tuple[str, ...] = ()
    comm_bytes_per_token: int = 0

    def is_attention_core(self, op_id: str) -> bool:
        if self.attention_ops:
            return op_id in self.attention_ops
        return any(m in op_id for m in ATTENTION_CORE_MARKERS)

    def all_operators(self) -> list[str]:
        return [op for ops in self.stage_operators for op in ops]


@dataclass(frozen=True)
class Task:
    task_id: str
    adapter: AdapterSpec
    micro_batch_size: int
    padded_seq_len: int
    seq_lengths: tuple[int, ...]
    activation_bytes_per_token: int = 0
    grad_buffer_bytes: int = 0
    tokens_override: Optional[int] = None
    dataset_id: str = ""

    @property
    def tokens_per_microbatch(self) -> int:
        """n_i: tokens per micro-batch, b_i * l_i unless alignment overrode it."""
        if self.tokens_override is not None:
            return self.tokens_override
        return self.micro_batch_size * self.padded_seq_len

    @property
    def truncated_lengths(self) -> tuple[int, ...]:
        return tuple(min(n, self.padded_seq_len) for n in self.seq_lengths)

    def with_tokens(self, tokens: int) -> "Task":
        return replace(self, tokens_override=tokens)


@dataclass(frozen=True)
class PlannerConfig:
    micro_batch_count: int
    memory_limit_per_gpu: float
    chunk_min: int = 64
    max_buckets: Optional[int] = None


@dataclass
class ValidationReport:
    accepted: bool
    errors: list[str] = field(default_factory=list)
    task_diagnostics: dict[str, list[str]] = field(default_factory=dict)
    task_memory: dict[str, float] = field(default_factory=dict)

    def raise_if_rejected(self) -> None:
        if not self.accepted:
            raise WorkloadError("; ".join(self.all_messages()))

    def all_messages(self) -> list[str]:
        msgs = list(self.errors)
        for tid, diags in self.task_diagnostics.items():
            msgs.extend(f"{tid}: {d}" for d in diags)
        return msgs


def _is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def validate_workload(tasks: Sequence[Task], backbone: BackboneSpec,
                      cfg: PlannerConfig, table=None) -> ValidationReport:
    """Check every workload invariant and the standalone memory of each task.

    ``table`` is an optional :class:`~peftmux.profile.ProfileTable`; when given,
    every operator id referenced by the backbone or an adapter must resolve.
    """
    from .cost import memory_estimate

    report = ValidationReport(accepted=True)
    errors = report.errors

    if not tasks:
        errors.append("empty task list")

    # backbone
    S = backbone.num_stages
    if S < 1:
        errors.append("num_stages must be ≥1")
    if len(backbone.gpu_count) != S:
        errors.append(f"gpu_count has {len(backbone.gpu_count)} entries, expected {S}")
    if any(g < 1 for g in backbone.gpu_count):
        errors.append("every stage needs ≥1 GPU")
    if len(backbone.stage_operators) != S:
        errors.append(f"stage_operators has {len(backbone.stage_operators)} entries, expected {S}")
    if backbone.backbone_param_bytes <= 0:
        errors.append("backbone_param_bytes must be >0")
    if table is not None:
        for op in backbone.all_operators():
            if not table.has_op(op):
                errors.append(f"unresolvable operator id {op!r}")

    # planner
    if cfg.micro_batch_count < 1:
        errors.append("micro_batch_count must be ≥1")
    if not _is_power_of_two(cfg.chunk_min):
        errors.append("chunk_min must be a power of 2")
    if cfg.memory_limit_per_gpu <= 0:
        errors.append("memory_limit_per_gpu must be >0")
    if cfg.max_buckets is not None and cfg.max_buckets < 1:
        errors.append("max_buckets must be ≥1")

    seen: set[str] = set()
    backbone_ops = set(backbone.all_operators())
    for t in tasks:
        diags: list[str] = []
        if t.task_id in seen:
            errors.append(f"duplicate task_id {t.task_id!r}")
        seen.add(t.task_id)
        if t.micro_batch_size < 1:
            diags.append("micro_batch_size must be ≥1")
        if t.padded_seq_len < 1:
            diags.append("padded_seq_len must be ≥1")
        if not t.seq_lengths:
            diags.append("seq_lengths must be non-empty")
        elif min(t.seq_lengths) < 1:
            diags.append("seq_lengths must be positive")
        if t.tokens_per_microbatch <= 0:
            diags.append("tokens_per_microbatch must be >0")
        if t.activation_bytes_per_token < 0 or t.grad_buffer_bytes < 0:
            diags.append("byte fields must be ≥0")
        a = t.adapter
        if a.adapter_type not in ADAPTER_TYPES:
            diags.append(f"unknown adapter_type {a.adapter_type!r}")
        if not a.attach_points:
            diags.append("adapter attach_points must be non-empty")
        if not a.adapter_op_ids:
            diags.append("adapter_op_ids must be non-empty")
        elif len(a.adapter_op_ids) not in (1, len(a.attach_points)):
            diags.append("adapter_op_ids must have 1 entry or one per attach point")
        for p in a.attach_points:
            if p not in backbone_ops:
                diags.append(f"attach point {p!r} is not a backbone operator")
            if backbone.is_attention_core(p):
                diags.append(f"attach point {p!r} is an attention-core operator")
        if table is not None:
            for op in a.adapter_op_ids:
                if not table.has_op(op):
                    diags.append(f"unresolvable adapter operator id {op!r}")
        if not diags and S >= 1 and cfg.memory_limit_per_gpu > 0:
            mem = memory_estimate([t], backbone, cfg)
            report.task_memory[t.task_id] = mem.peak_bytes
            if mem.oom:
                diags.append(
                    f"standalone memory {mem.peak_bytes:.0f} B exceeds "
                    f"memory_limit_per_gpu {cfg.memory_limit_per_gpu:.0f} B")
        if diags:
            report.task_diagnostics[t.task_id] = diags

    report.accepted = not errors and not report.task_diagnostics
    return report


def sort_by_tokens(tasks: Iterable[Task]) -> list[Task]:
    """Ascending by tokens per micro-batch, ties by task id."""
    return sorted(tasks, key=lambda t: (t.tokens_per_microbatch, t.task_id))


# -- workload file -----------------------------------------------------------

def _adapter_from_dict(d: dict[str, Any]) -> AdapterSpec:
    return AdapterSpec(
        adapter_type=d["adapter_type"],
        attach_points=tuple(d["attach_points"]),
        adapter_op_ids=tuple(d["adapter_op_ids"]),
    )


def task_from_dict(d: dict[str, Any]) -> Task:
    return Task(
        task_id=str(d["task_id"]),
        adapter=_adapter_from_dict(d["adapter"]),
        micro_batch_size=int(d["micro_batch_size"]),
        padded_seq_len=int(d["padded_seq_len"]),
        seq_lengths=tuple(int(x) for x in d["seq_lengths"]),
        activation_bytes_per_token=int(d.get("activation_bytes_per_token", 0)),
        grad_buffer_bytes=int(d.get("grad_buffer_bytes", 0)),
        tokens_override=(int(d["tokens_per_microbatch"])
                         if d.get("tokens_per_microbatch") is not None else None),
        dataset_id=str(d.get("dataset_id", "")),
    )


def backbone_from_dict(d: dict[str, Any]) -> BackboneSpec:
    return BackboneSpec(
        num_stages=int(d["num_stages"]),
        gpu_count=tuple(int(g) for g in d["gpu_count"]),
        stage_operators=tuple(tuple(ops) for ops in d["stage_operators"]),
        backbone_param_bytes=int(d["backbone_param_bytes"]),
        attention_ops=tuple(d.get("attention_ops", ())),
        comm_bytes_per_token=int(d.get("comm_bytes_per_token", 0)),
    )


def planner_from_dict(d: dict[str, Any]) -> PlannerConfig:
    return PlannerConfig(
        micro_batch_count=int(d["micro_batch_count"]),
        memory_limit_per_gpu=float(d["memory_limit_per_gpu"]),
        chunk_min=int(d.get("chunk_min", 64)),
        max_buckets=d.get("max_buckets"),
    )


def task_to_dict(t: Task) -> dict[str, Any]:
    d = {
        "task_id": t.task_id,
        "adapter": {
            "adapter_type": t.adapter.adapter_type,
            "attach_points": list(t.adapter.attach_points),
            "adapter_op_ids": list(t.adapter.adapter_op_ids),
        },
        "micro_batch_size": t.micro_batch_size,
        "padded_seq_len": t.padded_seq_len,
        "seq_lengths": list(t.seq_lengths),
        "activation_bytes_per_token": t.activation_bytes_per_token,
        "grad_buffer_bytes": t.grad_buffer_bytes,
    }
    if t.tokens_override is not None:
        d["tokens_per_microbatch"] = t.tokens_override
    if t.dataset_id:
        d["dataset_id"] = t.dataset_id
    return d


def backbone_to_dict(b: BackboneSpec) -> dict[str, Any]:
    d: dict[str, Any] = {
        "num_stages": b.num_stages,
        "gpu_count": list(b.gpu_count),
        "stage_operators": [list(ops) for ops in b.stage_operators],
        "backbone_param_bytes": b.backbone_param_bytes,
    }
    if b.attention_ops:
        d["attention_ops"] = list(b.attention_ops)
    if b.comm_bytes_per_token:
        d["comm_bytes_per_token"] = b.comm_bytes_per_token
    return d


def planner_to_dict(c: PlannerConfig) -> dict[str, Any]:
    return {
        "micro_batch_count": c.micro_batch_count,
        "memory_limit_per_gpu": c.memory_limit_per_gpu,
        "chunk_min": c.chunk_min,
        "max_buckets": c.max_buckets,
    }


def load_workload(path: str | Path) -> tuple[list[Task], BackboneSpec, PlannerConfig]:
    """Read a workload document with top-level ``backbone``/``tasks``/``planner``."""
    with open(path) as f:
        doc = json.load(f)
    return workload_from_dict(doc)


def workload_from_dict(doc: dict[str, Any]) -> tuple[list[Task], BackboneSpec, PlannerConfig]:
    try:
        backbone = backbone_from_dict(doc["backbone"])
        tasks = [task_from_dict(t) for t in doc["tasks"]]
        planner = planner_from_dict(doc["planner"])
    except (KeyError, TypeError, ValueError) as e:
        raise WorkloadError(f"malformed workload: {e!r}") from e
    return tasks, backbone, planner


def dump_workload(tasks: Sequence[Task], backbone: BackboneSpec,
                  cfg: PlannerConfig) -> dict[str, Any]:
    return {
        "backbone": backbone_to_dict(backbone),
        "tasks": [task_to_dict(t) for t in tasks],
        "planner": planner_to_dict(cfg),
    }
