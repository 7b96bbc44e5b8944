import random

import pytest

from peftmux.profile import ProfileTable, Sample
from peftmux.workload import AdapterSpec, BackboneSpec, PlannerConfig, Task

GB = 10 ** 9


def make_task(tid, b=1, l=64, lengths=None, attach=("proj",), op="lora", act=0, grad=0,
              tokens=None, dataset=""):
    lengths = tuple(lengths) if lengths is not None else (l,) * b
    return Task(tid, AdapterSpec("reparameterized", tuple(attach), (op,)), b, l, lengths,
                activation_bytes_per_token=act, grad_buffer_bytes=grad, tokens_override=tokens,
                dataset_id=dataset)


def linear_table(ops, grid=(1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096, 8192,
                            16384, 32768, 65536), comms=None):
    """ops: {op: (a, b, knee, util_knee)}; t = a + b*max(x, knee), u = min(1, x/util_knee)."""
    entries = {}
    for op, (a, b, knee, uk) in ops.items():
        entries[op] = [Sample(x, a + b * max(x, knee), min(1.0, x / uk)) for x in grid]
    return ProfileTable(entries, dict(comms or {}))


def toy_backbone(S=2, ops=("proj",), gpus=1, mb=8 * GB, comm_bytes=0):
    return BackboneSpec(S, (gpus,) * S, tuple(tuple(ops) for _ in range(S)), mb,
                        comm_bytes_per_token=comm_bytes)


def big_config(C=4, **kw):
    return PlannerConfig(micro_batch_count=C, memory_limit_per_gpu=10 ** 15, **kw)


@pytest.fixture
def rng():
    return random.Random(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
