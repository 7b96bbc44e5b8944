"""Planner and simulator for co-scheduling parameter-efficient fine-tuning tasks on a shared backbone."""

from .alignment import (ChunkLayout, Pack, align_htask, choose_chunk_size, chunk_partition,
                        effective_token_stats, pack_sequences, zero_pad_stats)
from .cluster import TraceEvent, compare_modes, replay, synthetic_trace
from .cost import HybridTask, memory_estimate, pipeline_latency, stage_latency
from .fusion import FusionPlan, InfeasiblePlan, fuse_tasks
from .grouping import BucketPlan, group_htasks, select_grouping
from .intrastage import (LaunchSchedule, OpGraph, OpNode, Subgraph, build_subgraphs,
                         fusion_groups, overlapped_stage_latency, schedule_subgraphs)
from .pipeline import (PipelineSchedule, PipelineTemplate, check_last_stage_busy,
                       generate_template, simulate)
from .planner import PlanResult, plan, plan_report
from .profile import ProfileTable, load_profile
from .semantics import DenseMatrix, batched_backward, batched_forward
from .workload import (AdapterSpec, BackboneSpec, PlannerConfig, Task, load_workload,
                       sort_by_tokens, validate_workload)

__version__ = "0.1.0"
