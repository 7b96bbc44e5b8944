"""Structured multi-bucket 1F1B template and its discrete-event simulator.

A template fixes the forward launch order: buckets by descending first-stage
latency, the C micro-batches of a bucket back to back. The simulator runs
that order with ready-backward priority and eager forward launching bounded
by a per-stage in-flight activation limit.
"""

from __future__ import annotations

import csv
import heapq
import io
import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Optional, Sequence

FORWARD = "forward"
BACKWARD = "backward"


class SimulationError(RuntimeError):
    pass


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineTemplate:
    bucket_order: tuple[int, ...]
    micro_batches: int
    num_stages: int
    eager_limit: tuple[int, ...]

    @property
    def units(self) -> list[tuple[int, int]]:
        """(bucket, micro-batch) in forward launch order."""
        return [(b, m) for b in self.bucket_order for m in range(self.micro_batches)]

    @property
    def launch_sequence(self) -> list[tuple[int, int, str]]:
        return [(b, m, FORWARD) for b, m in self.units]

    def reordered(self, order: Sequence[int]) -> "PipelineTemplate":
        if sorted(order) != sorted(self.bucket_order):
            raise TemplateError("order must be a permutation of the template's buckets")
        return PipelineTemplate(tuple(order), self.micro_batches, self.num_stages,
                                self.eager_limit)


def descending_order(first_stage: Mapping[int, float]) -> tuple[int, ...]:
    return tuple(sorted(first_stage, key=lambda b: (-first_stage[b], b)))


def eager_limits(num_stages: int, total_units: int, *, static_bytes: float = 0.0,
                 activation_bytes: Optional[Mapping[int, float]] = None,
                 memory_limit: Optional[float] = None) -> tuple[int, ...]:
    """Largest in-flight micro-batch count per stage that keeps memory under the limit.

    Every in-flight micro-batch is charged the largest per-micro-batch
    activation over all buckets, so the count is safe for any mix.
    """
    if memory_limit is None or not activation_bytes or max(activation_bytes.values()) <= 0:
        return (total_units,) * num_stages
    per_mb = max(activation_bytes.values())
    room = memory_limit - static_bytes
    limit = math.floor(room / per_mb) if room > 0 else 0
    if limit < 1:
        raise TemplateError("infeasible: memory (no micro-batch fits even with limit 1)")
    return (min(limit, total_units),) * num_stages


def generate_template(bucket_latencies: Mapping[int, Sequence[float]], micro_batches: int,
                      *, static_bytes: float = 0.0,
                      activation_bytes: Optional[Mapping[int, float]] = None,
                      memory_limit: Optional[float] = None,
                      order: Optional[Sequence[int]] = None) -> PipelineTemplate:
    """Build the structured template for buckets with per-stage latencies (fwd = bwd).

    ``activation_bytes`` maps a bucket to the activation of one of its
    micro-batches on one stage; with ``memory_limit`` unset launching is
    unbounded.
    """
    if not bucket_latencies:
        raise TemplateError("no buckets")
    if micro_batches < 1:
        raise TemplateError("micro_batches must be ≥1")
    stage_counts = {len(v) for v in bucket_latencies.values()}
    if len(stage_counts) != 1:
        raise TemplateError("every bucket needs the same number of stage latencies")
    S = stage_counts.pop()
    if S < 1:
        raise TemplateError("at least one stage required")
    if order is None:
        order = descending_order({b: lat[0] for b, lat in bucket_latencies.items()})
    elif sorted(order) != sorted(bucket_latencies):
        raise TemplateError("order must be a permutation of the buckets")
    K = len(bucket_latencies) * micro_batches
    limits = eager_limits(S, K, static_bytes=static_bytes, activation_bytes=activation_bytes,
                          memory_limit=memory_limit)
    return PipelineTemplate(tuple(order), micro_batches, S, limits)


class Event(NamedTuple):
    stage: int
    bucket: int
    microbatch: int
    direction: str
    start: float
    end: float


@dataclass(frozen=True)
class PipelineSchedule:
    events: tuple[tuple[Event, ...], ...]  # per stage, time ordered
    makespan: float
    warmup_end: float  # first forward start on the last stage
    steady_end: float  # last backward end on the last stage

    @property
    def num_stages(self) -> int:
        return len(self.events)

    def idle_intervals(self, stage: int) -> list[tuple[float, float]]:
        gaps = []
        t = 0.0
        for e in self.events[stage]:
            if e.start > t:
                gaps.append((t, e.start))
            t = e.end
        if self.makespan > t:
            gaps.append((t, self.makespan))
        return gaps

    def rows(self) -> list[tuple]:
        return [(e.stage, e.bucket, e.microbatch, e.direction, e.start, e.end)
                for stage in self.events for e in stage]


@dataclass(frozen=True)
class BubbleReport:
    warmup_ms: float
    steady_ms: float
    drain_ms: float
    last_stage_idle_steady: float
    internal_bubble_fraction: float


def simulate(template: PipelineTemplate, bucket_latencies: Mapping[int, Sequence[float]]
             ) -> tuple[PipelineSchedule, BubbleReport]:
    """Run the template; forward and backward of a micro-batch share its stage latency.

    Dispatch on an idle stage: the earliest ready backward, otherwise the
    next forward in launch order if the stage is below its in-flight limit.
    All completions at one instant are applied before any dispatch.
    """
    S = template.num_stages
    units = template.units
    K = len(units)
    for b in template.bucket_order:
        if b not in bucket_latencies or len(bucket_latencies[b]) != S:
            raise TemplateError(f"bucket {b} needs {S} stage latencies")
    lat = [[float(bucket_latencies[b][s]) for s in range(S)] for b, _ in units]
    limit = template.eager_limit

    fwd_avail = [K] + [0] * (S - 1)  # units whose forward reached stage s
    next_fwd = [0] * S
    inflight = [0] * S
    bwd_ready: list[list[int]] = [[] for _ in range(S)]
    running: list[Optional[tuple[int, str]]] = [None] * S
    events: list[list[Event]] = [[] for _ in range(S)]
    pending: list[tuple[float, int]] = []
    now = 0.0
    finished = 0

    while True:
        for s in range(S):
            if running[s] is not None:
                continue
            if bwd_ready[s]:
                u = heapq.heappop(bwd_ready[s])
                d = BACKWARD
            elif next_fwd[s] < fwd_avail[s] and inflight[s] < limit[s]:
                u = next_fwd[s]
                next_fwd[s] += 1
                inflight[s] += 1
                d = FORWARD
            else:
                continue
            end = now + lat[u][s]
            b, m = units[u]
            events[s].append(Event(s, b, m, d, now, end))
            running[s] = (u, d)
            heapq.heappush(pending, (end, s))
        if not pending:
            break
        now = pending[0][0]
        while pending and pending[0][0] == now:
            _, s = heapq.heappop(pending)
            u, d = running[s]
            running[s] = None
            finished += 1
            if d == FORWARD:
                if s + 1 < S:
                    fwd_avail[s + 1] += 1
                else:
                    heapq.heappush(bwd_ready[s], u)
            else:
                inflight[s] -= 1
                if s > 0:
                    heapq.heappush(bwd_ready[s - 1], u)

    if finished != 2 * K * S:
        raise SimulationError(f"deadlock: {finished} of {2 * K * S} passes completed")

    last = events[S - 1]
    warmup_end = next(e.start for e in last if e.direction == FORWARD)
    steady_end = max(e.end for e in last if e.direction == BACKWARD)
    makespan = max(e.end for st in events for e in st)
    schedule = PipelineSchedule(tuple(tuple(st) for st in events), makespan,
                                warmup_end, steady_end)
    return schedule, bubble_report(schedule)


def bubble_report(schedule: PipelineSchedule) -> BubbleReport:
    last = schedule.num_stages - 1
    idle_steady = 0.0
    for a, b in schedule.idle_intervals(last):
        lo, hi = max(a, schedule.warmup_end), min(b, schedule.steady_end)
        if hi > lo:
            idle_steady += hi - lo
    busy = sum(e.end - e.start for st in schedule.events for e in st)
    capacity = schedule.num_stages * schedule.makespan
    frac = 1.0 - busy / capacity if capacity > 0 else 0.0
    return BubbleReport(
        warmup_ms=schedule.warmup_end,
        steady_ms=schedule.steady_end - schedule.warmup_end,
        drain_ms=schedule.makespan - schedule.steady_end,
        last_stage_idle_steady=idle_steady,
        internal_bubble_fraction=min(1.0, max(0.0, frac)),
    )


class BusyCheck(NamedTuple):
    busy: bool
    violation: Optional[tuple[float, float]]  # first idle gap on the last stage


def check_last_stage_busy(schedule: PipelineSchedule) -> BusyCheck:
    """Is the last stage gap-free from its first forward to its last backward?"""
    ev = schedule.events[-1]
    for prev, nxt in zip(ev, ev[1:]):
        if nxt.start > prev.end:
            return BusyCheck(False, (prev.end, nxt.start))
    return BusyCheck(True, None)


def steady_dominance_ratio(schedule: PipelineSchedule) -> Optional[float]:
    """T_steady / (T_warmup + T_drain); None when there is no warm-up or drain (S = 1)."""
    rep = bubble_report(schedule)
    denom = rep.warmup_ms + rep.drain_ms
    if schedule.num_stages == 1 or denom == 0:
        return None
    return rep.steady_ms / denom


def validate_schedule(schedule: PipelineSchedule, template: PipelineTemplate,
                      bucket_latencies: Mapping[int, Sequence[float]]) -> list[str]:
    """List every violated dependency, overlap, duration or in-flight constraint."""
    problems = []
    S = template.num_stages
    fwd: dict[tuple[int, int, int], Event] = {}
    bwd: dict[tuple[int, int, int], Event] = {}
    for s, stage_events in enumerate(schedule.events):
        for a, b in zip(stage_events, stage_events[1:]):
            if b.start < a.end:
                problems.append(f"overlap on stage {s}: {a} / {b}")
        for e in stage_events:
            want = bucket_latencies[e.bucket][s]
            if e.end - e.start != want and not math.isclose(e.end - e.start, want):
                problems.append(f"wrong duration {e}")
            (fwd if e.direction == FORWARD else bwd)[(s, e.bucket, e.microbatch)] = e
    for b, m in template.units:
        for s in range(S):
            f, g = fwd.get((s, b, m)), bwd.get((s, b, m))
            if f is None or g is None:
                problems.append(f"missing pass for bucket {b} mb {m} stage {s}")
                continue
            if s > 0 and f.start < fwd[(s - 1, b, m)].end:
                problems.append(f"forward before upstream forward: {f}")
            if g.start < f.end:
                problems.append(f"backward before own forward: {g}")
            if s < S - 1 and g.start < bwd[(s + 1, b, m)].end:
                problems.append(f"backward before downstream backward: {g}")
    for s, stage_events in enumerate(schedule.events):
        count = 0
        for e in stage_events:
            count += 1 if e.direction == FORWARD else 0
            if count > template.eager_limit[s]:
                problems.append(f"stage {s} exceeds in-flight limit at {e}")
                break
            count -= 1 if e.direction == BACKWARD else 0
    return problems


GANTT_HEADER = ("stage", "bucket", "microbatch", "direction", "start_ms", "end_ms")


def gantt_csv(schedule: PipelineSchedule) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GANTT_HEADER)
    for row in schedule.rows():
        w.writerow([*row[:4], repr(row[4]), repr(row[5])])
    return buf.getvalue()
