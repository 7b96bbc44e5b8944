"""Trace-driven FCFS replay of a GPU cluster, dedicated vs. multiplexed instances.

A task's work is a token budget: its trace duration times the rate it gets
alone on a dedicated instance. In multiplexed mode tasks on the same backbone
share an instance while the memory model allows it, and every join or leave
re-plans the instance and so changes every resident's rate.
"""

from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .cost import memory_estimate
from .fusion import InfeasiblePlan
from .planner import plan
from .profile import ProfileTable
from .workload import BackboneSpec, PlannerConfig, Task

DEDICATED = "dedicated"
MULTIPLEXED = "multiplexed"
MODES = (DEDICATED, MULTIPLEXED)

MS_PER_MIN = 60_000.0


@dataclass(frozen=True)
class TraceEvent:
    arrival_min: float
    duration_min: float
    backbone_id: str
    dataset_id: str
    micro_batch_size: int


def load_trace(path: str | Path) -> list[TraceEvent]:
    out = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or header[0].strip() != "arrival_min":
            raise ValueError("trace needs a header row starting with arrival_min")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                a, d, bb, ds, b = (c.strip() for c in row)
                ev = TraceEvent(float(a), float(d), bb, ds, int(b))
            except ValueError as e:
                raise ValueError(f"trace line {lineno}: {e}") from e
            if ev.duration_min <= 0 or ev.micro_batch_size < 1 or ev.arrival_min < 0:
                raise ValueError(f"trace line {lineno}: invalid values")
            out.append(ev)
    return sort_trace(out)


def dump_trace(trace: Sequence[TraceEvent], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["arrival_min", "duration_min", "backbone_id", "dataset_id",
                    "micro_batch_size"])
        for e in trace:
            w.writerow([repr(e.arrival_min), repr(e.duration_min), e.backbone_id, e.dataset_id,
                        e.micro_batch_size])


def sort_trace(trace: Sequence[TraceEvent]) -> list[TraceEvent]:
    return sorted(trace, key=lambda e: e.arrival_min)  # stable


def synthetic_trace(num_tasks: int, seed: int = 0, *, rate_per_min: float = 2.59,
                    mean_min: float = 372.6, std_min: float = 612.9, scale: float = 60.0,
                    backbones: Sequence[str] = ("default",),
                    datasets: Sequence[str] = ("qa", "rte", "sst2"),
                    micro_batch_sizes: Sequence[int] = (2, 4, 8)) -> list[TraceEvent]:
    """Poisson arrivals and lognormal durations matching the given mean and std.

    Durations are divided by ``scale`` to bring a production trace to desk size.
    """
    rng = np.random.default_rng(seed)
    sigma2 = math.log1p((std_min / mean_min) ** 2)
    mu = math.log(mean_min) - sigma2 / 2
    gaps = rng.exponential(1.0 / rate_per_min, size=num_tasks)
    arrivals = np.cumsum(gaps) - gaps[0]
    durations = rng.lognormal(mu, math.sqrt(sigma2), size=num_tasks) / scale
    bb = rng.integers(len(backbones), size=num_tasks)
    ds = rng.integers(len(datasets), size=num_tasks)
    mb = rng.integers(len(micro_batch_sizes), size=num_tasks)
    return [TraceEvent(float(arrivals[i]), float(durations[i]), backbones[bb[i]],
                       datasets[ds[i]], int(micro_batch_sizes[mb[i]]))
            for i in range(num_tasks)]


TaskFactory = Callable[[str, TraceEvent], Task]


def template_factory(templates: Mapping[str, Task], micro_batches: int) -> TaskFactory:
    """Tasks cloned from a per-dataset template, resized to the event's micro-batch size.

    The global batch holds ``micro_batch_size * micro_batches`` sequences,
    taken cyclically from the template's lengths.
    """
    def make(task_id: str, ev: TraceEvent) -> Task:
        try:
            tpl = templates[ev.dataset_id]
        except KeyError:
            raise ValueError(f"no task template for dataset {ev.dataset_id!r}") from None
        n = ev.micro_batch_size * micro_batches
        lengths = tuple(tpl.seq_lengths[k % len(tpl.seq_lengths)] for k in range(n))
        return replace(tpl, task_id=task_id, micro_batch_size=ev.micro_batch_size,
                       seq_lengths=lengths, tokens_override=None, dataset_id=ev.dataset_id)
    return make


def _signature(t: Task) -> tuple:
    a = t.adapter
    return (t.micro_batch_size, t.padded_seq_len, t.seq_lengths, a.adapter_type,
            a.attach_points, a.adapter_op_ids, t.activation_bytes_per_token,
            t.grad_buffer_bytes, t.tokens_override or 0, t.dataset_id)


@dataclass
class _Job:
    index: int
    event: TraceEvent
    task: Task
    budget: float  # tokens
    remaining: float
    rate: float = 0.0  # tokens per minute
    start: Optional[float] = None
    finish: Optional[float] = None


@dataclass
class _Instance:
    iid: int
    backbone_id: str
    gpus: int
    residents: list[_Job] = field(default_factory=list)


class Planner:
    """Caches plans by resident composition; identical mixes re-plan identically."""

    def __init__(self, backbones: Mapping[str, BackboneSpec], table: ProfileTable,
                 cfg: PlannerConfig):
        self.backbones = backbones
        self.table = table
        self.cfg = cfg
        self._cache: dict[tuple, Optional[dict[str, float]]] = {}

    def rates(self, backbone_id: str, tasks: Sequence[Task]) -> Optional[dict[str, float]]:
        """Tokens per minute for every task, or None if the mix is infeasible.

        Plans are keyed by task shape, with canonical ids, so the result does
        not depend on job names.
        """
        sigs = [_signature(t) for t in tasks]
        key = (backbone_id, tuple(sorted(sigs)))
        if key not in self._cache:
            canon = [replace(tasks[i], task_id=f"c{r:04d}")
                     for r, i in enumerate(sorted(range(len(tasks)), key=lambda i: sigs[i]))]
            try:
                res = plan(canon, self.backbones[backbone_id], self.table, self.cfg)
            except InfeasiblePlan:
                self._cache[key] = None
            else:
                by_id = res.task_rates()
                self._cache[key] = {_signature(t): by_id[t.task_id] * MS_PER_MIN for t in canon}
        rates = self._cache[key]
        if rates is None:
            return None
        return {t.task_id: rates[s] for t, s in zip(tasks, sigs)}

    def fits(self, backbone_id: str, tasks: Sequence[Task]) -> bool:
        be = self.backbones[backbone_id]
        return not memory_estimate(tasks, be, self.cfg).oom


def replay(trace: Sequence[TraceEvent], cluster_gpus: int, mode: str,
           backbones: Mapping[str, BackboneSpec], table: ProfileTable, cfg: PlannerConfig,
           make_task: TaskFactory, policy: str = "fcfs") -> dict:
    """Replay ``trace`` and return a JSON-ready report for one mode."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if policy != "fcfs":
        raise ValueError("only the fcfs policy is implemented")
    trace = sort_trace(trace)
    planner = Planner(backbones, table, cfg)

    jobs: list[_Job] = []
    for i, ev in enumerate(trace):
        if ev.backbone_id not in backbones:
            raise ValueError(f"unknown backbone {ev.backbone_id!r}")
        need = sum(backbones[ev.backbone_id].gpu_count)
        if need > cluster_gpus:
            raise ValueError(f"task {i} needs {need} GPUs, cluster has {cluster_gpus}")
        task = make_task(f"job{i:05d}", ev)
        solo = planner.rates(ev.backbone_id, [task])
        if solo is None:
            raise InfeasiblePlan(f"infeasible: memory (task {i} alone)")
        budget = ev.duration_min * solo[task.task_id]
        jobs.append(_Job(i, ev, task, budget, budget))

    free = cluster_gpus
    instances: list[_Instance] = []
    next_iid = 0
    queue: deque[_Job] = deque()
    pending = deque(jobs)
    clock = 0.0
    replans = 0
    max_residents = 0

    def replan(inst: _Instance) -> None:
        nonlocal replans
        replans += 1
        rates = planner.rates(inst.backbone_id, [j.task for j in inst.residents])
        if rates is None:  # gated by memory before joining; unreachable in practice
            raise InfeasiblePlan("infeasible: memory (instance)")
        for j in inst.residents:
            j.rate = rates[j.task.task_id]

    def dispatch() -> set[int]:
        nonlocal free, next_iid, max_residents
        touched: set[int] = set()
        while queue:
            job = queue[0]
            bb = job.event.backbone_id
            target = None
            if mode == MULTIPLEXED:
                for inst in instances:
                    if inst.backbone_id != bb:
                        continue
                    mix = [j.task for j in inst.residents] + [job.task]
                    if planner.fits(bb, mix) and planner.rates(bb, mix) is not None:
                        target = inst
                        break
            if target is None:
                need = sum(backbones[bb].gpu_count)
                if need > free:
                    break  # head-of-line blocking
                target = _Instance(next_iid, bb, need)
                next_iid += 1
                free -= need
                instances.append(target)
            queue.popleft()
            job.start = clock
            target.residents.append(job)
            max_residents = max(max_residents, len(target.residents))
            touched.add(target.iid)
        return touched

    while pending or queue or instances:
        t_arr = pending[0].event.arrival_min if pending else math.inf
        t_done = math.inf
        for inst in instances:
            for j in inst.residents:
                t_done = min(t_done, clock + j.remaining / j.rate)
        t = min(t_arr, t_done)
        if t == math.inf:
            raise RuntimeError("replay stalled")  # queued work with nothing running
        touched: set[int] = set()
        for inst in instances:
            keep = []
            for j in inst.residents:
                if clock + j.remaining / j.rate <= t:
                    j.remaining = 0.0
                    j.finish = t
                    touched.add(inst.iid)
                else:
                    j.remaining -= j.rate * (t - clock)
                    keep.append(j)
            inst.residents = keep
        clock = t
        for inst in [i for i in instances if not i.residents]:
            free += inst.gpus
            instances.remove(inst)
        while pending and pending[0].event.arrival_min <= clock:
            queue.append(pending.popleft())
        touched |= dispatch()
        for inst in instances:
            if inst.iid in touched:
                replan(inst)

    first = min((j.event.arrival_min for j in jobs), default=0.0)
    last = max((j.finish for j in jobs), default=0.0)
    tokens = sum(j.budget for j in jobs)
    span = last - first
    delays = [j.start - j.event.arrival_min for j in jobs]
    jct = [j.finish - j.event.arrival_min for j in jobs]
    return {
        "mode": mode,
        "cluster_gpus": cluster_gpus,
        "num_tasks": len(jobs),
        "total_tokens": tokens,
        "makespan_min": span,
        "throughput_tokens_per_min": tokens / span if span > 0 else 0.0,
        "mean_queueing_delay_min": sum(delays) / len(delays) if delays else 0.0,
        "mean_completion_time_min": sum(jct) / len(jct) if jct else 0.0,
        "replans": replans,
        "max_residents_per_instance": max_residents,
        "tasks": [{"task": j.task.task_id, "arrival_min": j.event.arrival_min,
                   "start_min": j.start, "finish_min": j.finish, "budget_tokens": j.budget}
                  for j in jobs],
    }


def compare_modes(trace: Sequence[TraceEvent], cluster_gpus: int,
                  backbones: Mapping[str, BackboneSpec], table: ProfileTable,
                  cfg: PlannerConfig, make_task: TaskFactory) -> dict:
    reports = {m: replay(trace, cluster_gpus, m, backbones, table, cfg, make_task)
               for m in MODES}
    d = reports[DEDICATED]["throughput_tokens_per_min"]
    m = reports[MULTIPLEXED]["throughput_tokens_per_min"]
    return {"modes": reports, "throughput_ratio": m / d if d > 0 else None}


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"
