"""Deterministic synthetic backbones, profiles and task mixes for demos and tests."""

from __future__ import annotations

import numpy as np

from .profile import ProfileTable, synthetic_profile
from .workload import AdapterSpec, BackboneSpec, PlannerConfig, Task

GiB = 1024 ** 3

# (base_ms, ms_per_token above the knee, knee tokens)
DEMO_OPS = {
    "ln": (0.02, 0.00001, 2048),
    "qkv": (0.10, 0.00010, 2048),
    "attn_core": (0.08, 0.00008, 2048),
    "o_proj": (0.05, 0.00005, 2048),
    "mlp_up": (0.12, 0.00012, 2048),
    "mlp_down": (0.12, 0.00012, 2048),
    "lora": (0.03, 0.00002, 4096),
    "ia3": (0.01, 0.00001, 4096),
}
DEMO_COMMS = {"allreduce": (0.02, 2e-8)}
DEMO_LAYER = ("ln", "qkv", "attn_core", "o_proj", "allreduce", "mlp_up", "mlp_down", "allreduce")

# dataset id -> padded length (SST2-, QA- and RTE-like)
DEMO_DATASETS = {"sst2": 64, "qa": 128, "rte": 256}


def demo_profile() -> ProfileTable:
    return synthetic_profile(DEMO_OPS, DEMO_COMMS)


def demo_backbone(num_stages: int = 4, gpus_per_stage: int = 2,
                  layers_per_stage: int = 2) -> BackboneSpec:
    return BackboneSpec(
        num_stages=num_stages,
        gpu_count=(gpus_per_stage,) * num_stages,
        stage_operators=tuple(DEMO_LAYER * layers_per_stage for _ in range(num_stages)),
        backbone_param_bytes=14 * GiB,
        attention_ops=("attn_core",),
        comm_bytes_per_token=8192,
    )


def demo_config(micro_batches: int = 4, mem_gb: float = 80.0, **kw) -> PlannerConfig:
    return PlannerConfig(micro_batch_count=micro_batches, memory_limit_per_gpu=mem_gb * GiB, **kw)


def demo_task(task_id: str, dataset: str, micro_batch_size: int, micro_batches: int,
              rng: np.random.Generator, adapter: str = "lora") -> Task:
    l = DEMO_DATASETS[dataset]
    count = micro_batch_size * micro_batches
    lengths = tuple(int(x) for x in rng.integers(max(1, l // 4), l + 1, size=count))
    spec = (AdapterSpec("reparameterized", ("qkv", "o_proj"), ("lora",)) if adapter == "lora"
            else AdapterSpec("additive", ("mlp_down",), ("ia3",)))
    return Task(task_id, spec, micro_batch_size, l, lengths,
                activation_bytes_per_token=1024 ** 2, grad_buffer_bytes=64 * 1024 ** 2,
                dataset_id=dataset)


def demo_tasks(n: int, seed: int = 0, micro_batches: int = 4) -> list[Task]:
    rng = np.random.default_rng(seed)
    names = sorted(DEMO_DATASETS)
    out = []
    for i in range(n):
        ds = names[int(rng.integers(len(names)))]
        b = int(rng.choice([2, 4, 8, 16]))
        kind = "lora" if rng.random() < 0.75 else "ia3"
        out.append(demo_task(f"t{i:02d}", ds, b, micro_batches, rng, kind))
    return out
