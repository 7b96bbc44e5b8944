"""Intra-stage orchestration of several hybrid tasks' operator DAGs.

Each DAG is cut into subgraphs (runs of consecutive compute operators with at
most one trailing collective; adapters on their own). Adapter subgraphs are
horizontally fused where that adds no synchronization, and the resulting
multi-DAG is ordered with a latency-aware Kahn variant: among the shallowest
ready subgraphs, launch the one with the largest compute time.
"""

from __future__ import annotations

import csv
import heapq
import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from .cost import HybridTask, fused_adapter_latency
from .profile import ProfileTable
from .workload import BackboneSpec

COMPUTE = "compute"
COMM = "communication"
ADAPTER = "adapter"


class SchedulingError(ValueError):
    pass


@dataclass(frozen=True)
class OpNode:
    node_id: str
    kind: str
    op_id: str
    owner: str
    token_count: int
    latency: float
    utilization: float = 1.0
    fusion_key: Optional[str] = None


@dataclass
class OpGraph:
    """One hybrid task's operators on one stage."""

    graph_id: str
    nodes: dict[str, OpNode] = field(default_factory=dict)
    edges: list[tuple[str, str]] = field(default_factory=list)
    bucket: int = 0
    num_tasks: int = 1

    def add(self, node: OpNode, after: Iterable[str] = ()) -> OpNode:
        if node.node_id in self.nodes:
            raise SchedulingError(f"duplicate node id {node.node_id!r}")
        self.nodes[node.node_id] = node
        for p in after:
            self.edges.append((p, node.node_id))
        return node

    def topo_order(self) -> list[str]:
        indeg = {v: 0 for v in self.nodes}
        succ: dict[str, list[str]] = defaultdict(list)
        for u, v in self.edges:
            if u not in self.nodes or v not in self.nodes:
                raise SchedulingError(f"edge {u}->{v} references an unknown node")
            succ[u].append(v)
            indeg[v] += 1
        pos = {v: i for i, v in enumerate(self.nodes)}
        ready = [(pos[v], v) for v, d in indeg.items() if d == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            _, u = heapq.heappop(ready)
            order.append(u)
            for v in succ[u]:
                indeg[v] -= 1
                if indeg[v] == 0:
                    heapq.heappush(ready, (pos[v], v))
        if len(order) != len(self.nodes):
            raise SchedulingError(f"graph {self.graph_id} has a cycle")
        return order


@dataclass
class Subgraph:
    subgraph_id: str
    graph_id: str
    owner: str
    nodes: tuple[OpNode, ...]
    bucket: int = 0
    compute_latency: float = 0.0  # compute + adapter nodes; the dequeue key
    comm_latency: float = 0.0
    priority: int = 0  # topological depth, smaller launches earlier

    @property
    def kind(self) -> str:
        if all(n.kind == ADAPTER for n in self.nodes):
            return ADAPTER
        if all(n.kind == COMM for n in self.nodes):
            return COMM
        return COMPUTE

    @property
    def has_comm(self) -> bool:
        return any(n.kind == COMM for n in self.nodes)

    @property
    def fusion_keys(self) -> tuple[str, ...]:
        return tuple(sorted({n.fusion_key for n in self.nodes if n.fusion_key}))


@dataclass
class SubgraphSet:
    subgraphs: dict[str, Subgraph]
    preds: dict[str, set[str]]
    node_owner: dict[str, str]  # node id -> subgraph id

    def succs(self) -> dict[str, set[str]]:
        out: dict[str, set[str]] = {s: set() for s in self.subgraphs}
        for v, ps in self.preds.items():
            for p in ps:
                out[p].add(v)
        return out


def _plain_latencies(nodes: Sequence[OpNode]) -> tuple[float, float]:
    comp = sum(n.latency for n in nodes if n.kind != COMM)
    comm = sum(n.latency for n in nodes if n.kind == COMM)
    return comp, comm


def build_subgraphs(graphs: Sequence[OpGraph]) -> SubgraphSet:
    """Segment every DAG and assign priorities by depth in the subgraph graph."""
    subgraphs: dict[str, Subgraph] = {}
    node_owner: dict[str, str] = {}
    preds: dict[str, set[str]] = {}
    for g in graphs:
        order = g.topo_order()
        node_preds: dict[str, list[str]] = defaultdict(list)
        for u, v in g.edges:
            node_preds[v].append(u)
        members: dict[str, list[OpNode]] = {}
        tail: dict[str, str] = {}
        closed: set[str] = set()
        for v in order:
            node = g.nodes[v]
            ps = node_preds[v]
            target = None
            if node.kind != ADAPTER and len(ps) == 1:
                u = ps[0]
                su = node_owner[u]
                if (g.nodes[u].kind == COMPUTE and tail[su] == u and su not in closed):
                    target = su
            if target is None:
                target = f"{g.graph_id}#{len(members)}"
                members[target] = []
            members[target].append(node)
            tail[target] = v
            node_owner[v] = target
            if node.kind == COMM or node.kind == ADAPTER:
                closed.add(target)
        for sid, nodes in members.items():
            comp, comm = _plain_latencies(nodes)
            owner = nodes[0].owner if all(n.kind == ADAPTER for n in nodes) else g.graph_id
            subgraphs[sid] = Subgraph(sid, g.graph_id, owner, tuple(nodes), g.bucket,
                                      comp, comm)
            preds[sid] = set()
        for u, v in g.edges:
            su, sv = node_owner[u], node_owner[v]
            if su != sv:
                preds[sv].add(su)
    sset = SubgraphSet(subgraphs, preds, node_owner)
    assign_priorities(sset)
    return sset


def _quotient_order(sset: SubgraphSet) -> list[str]:
    indeg = {s: len(ps) for s, ps in sset.preds.items()}
    succ = sset.succs()
    ready = sorted(s for s, d in indeg.items() if d == 0)
    order = []
    while ready:
        u = ready.pop(0)
        order.append(u)
        for v in sorted(succ[u]):
            indeg[v] -= 1
            if indeg[v] == 0:
                ready.append(v)
    if len(order) != len(sset.subgraphs):
        stuck = sorted(s for s, d in indeg.items() if d > 0)
        v = stuck[0]
        u = sorted(p for p in sset.preds[v] if p in stuck)[0]
        raise SchedulingError(f"dependency cycle through edge {u} -> {v}")
    return order


def assign_priorities(sset: SubgraphSet) -> None:
    depth: dict[str, int] = {}
    for s in _quotient_order(sset):
        depth[s] = max((depth[p] + 1 for p in sset.preds[s]), default=0)
        sset.subgraphs[s].priority = depth[s]


def fusion_groups(graphs: Sequence[OpGraph], sset: SubgraphSet) -> list[tuple[str, ...]]:
    """Partition fusion-candidate subgraphs into horizontally fused groups.

    (1) within one hybrid task, candidates with the same key always fuse;
    (2) across hybrid tasks of one bucket, only if every hybrid task there
        holds a single task and no candidate shares a subgraph with a
        collective (fusing it would synchronize before that collective);
    (3) never across buckets.
    """
    by_graph = {g.graph_id: g for g in graphs}
    single_task_bucket: dict[int, bool] = defaultdict(lambda: True)
    for g in graphs:
        if g.num_tasks != 1:
            single_task_bucket[g.bucket] = False

    groups: dict[tuple, list[str]] = {}
    for sid, sg in sset.subgraphs.items():
        keys = sg.fusion_keys
        if not keys:
            continue
        g = by_graph[sg.graph_id]
        if single_task_bucket[g.bucket] and not sg.has_comm:
            gk = (g.bucket, None, keys)
        else:
            gk = (g.bucket, g.graph_id, keys)
        groups.setdefault(gk, []).append(sid)
    return sorted((tuple(sorted(v)) for v in groups.values()))


def apply_fusion(sset: SubgraphSet, groups: Sequence[Sequence[str]]) -> SubgraphSet:
    """Merge each group into one subgraph carrying the union of its dependencies."""
    rename: dict[str, str] = {}
    merged: dict[str, Subgraph] = {}
    for grp in groups:
        if len(grp) < 2:
            continue
        members = [sset.subgraphs[s] for s in grp]
        new_id = "fused[" + ",".join(grp) + "]"
        nodes = tuple(n for m in members for n in m.nodes)
        keyed = [n for n in nodes if n.fusion_key and n.kind != COMM]
        plain = [n for n in nodes if not n.fusion_key and n.kind != COMM]
        comp = (fused_adapter_latency([n.latency for n in keyed], [n.utilization for n in keyed])
                + sum(n.latency for n in plain))
        comm = sum(n.latency for n in nodes if n.kind == COMM)
        owners = sorted({m.owner for m in members})
        merged[new_id] = Subgraph(new_id, members[0].graph_id, "+".join(owners), nodes,
                                  members[0].bucket, comp, comm)
        for s in grp:
            rename[s] = new_id
    subgraphs = {s: sg for s, sg in sset.subgraphs.items() if s not in rename}
    subgraphs.update(merged)
    preds: dict[str, set[str]] = {s: set() for s in subgraphs}
    for v, ps in sset.preds.items():
        nv = rename.get(v, v)
        for p in ps:
            np_ = rename.get(p, p)
            if np_ != nv:
                preds[nv].add(np_)
    node_owner = {n: rename.get(s, s) for n, s in sset.node_owner.items()}
    out = SubgraphSet(subgraphs, preds, node_owner)
    assign_priorities(out)
    return out


@dataclass(frozen=True)
class SegmentTiming:
    subgraph_id: str
    compute_start: float
    compute_end: float
    comm_start: Optional[float]
    comm_end: Optional[float]

    @property
    def finish(self) -> float:
        return self.comm_end if self.comm_end is not None else self.compute_end


@dataclass
class LaunchSchedule:
    entries: list[tuple[str, float]]  # (subgraph id, launch time t)
    subgraphs: SubgraphSet

    @property
    def order(self) -> list[str]:
        return [s for s, _ in self.entries]


def schedule_subgraphs(sset: SubgraphSet) -> LaunchSchedule:
    """Priority-based multi-DAG Kahn ordering.

    Dequeue the smallest depth; among those, the largest compute time; then
    owner and subgraph id.
    """
    indeg = {s: len(ps) for s, ps in sset.preds.items()}
    succ = sset.succs()
    subs = sset.subgraphs

    def key(s: str):
        sg = subs[s]
        return (sg.priority, -sg.compute_latency, sg.owner, s)

    queue = [key(s) for s, d in indeg.items() if d == 0]
    heapq.heapify(queue)
    entries = []
    t = 0.0
    while queue:
        *_, s = heapq.heappop(queue)
        entries.append((s, t))
        t += subs[s].compute_latency
        for v in succ[s]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(queue, key(v))
    if len(entries) != len(subs):
        _quotient_order(sset)  # raises with the offending edge
        raise SchedulingError("dependency cycle")
    return LaunchSchedule(entries, sset)


def two_channel_timing(order: Sequence[str], sset: SubgraphSet) -> list[SegmentTiming]:
    """Time a launch order on one compute and one communication channel.

    Compute runs in launch order; a subgraph starts once every predecessor
    (including its trailing collective) has finished. Collectives queue on
    the communication channel and overlap later compute.
    """
    finish: dict[str, float] = {}
    compute_free = comm_free = 0.0
    out = []
    for s in order:
        sg = sset.subgraphs[s]
        ready = max((finish[p] for p in sset.preds[s]), default=0.0)
        if sg.compute_latency > 0:
            start = max(compute_free, ready)
            cend = start + sg.compute_latency
            compute_free = cend
        else:
            start = cend = ready
        if sg.comm_latency > 0:
            ms = max(cend, comm_free)
            mend = ms + sg.comm_latency
            comm_free = mend
            seg = SegmentTiming(s, start, cend, ms, mend)
        else:
            seg = SegmentTiming(s, start, cend, None, None)
        finish[s] = seg.finish
        out.append(seg)
    return out


def overlapped_stage_latency(schedule: LaunchSchedule) -> float:
    timing = two_channel_timing(schedule.order, schedule.subgraphs)
    return max((seg.finish for seg in timing), default=0.0)


def is_linear_extension(order: Sequence[str], sset: SubgraphSet) -> bool:
    pos = {s: i for i, s in enumerate(order)}
    if len(pos) != len(order) or set(pos) != set(sset.subgraphs):
        return False
    return all(pos[p] < pos[v] for v, ps in sset.preds.items() for p in ps)


# -- planner-facing helpers -------------------------------------------------

def build_stage_graph(h: HybridTask, stage: int, backbone: BackboneSpec,
                      table: ProfileTable, *, graph_id: Optional[str] = None,
                      bucket: int = 0) -> OpGraph:
    """Operator DAG of one hybrid task on one stage.

    The backbone operators form a chain at the fused token count. Each
    member's adapter at an attach point branches off the attach point's input
    and joins at the next operator.
    """
    gid = graph_id or h.name
    g = OpGraph(gid, bucket=bucket, num_tasks=len(h.members))
    tokens = h.total_tokens
    ops = backbone.stage_operators[stage]
    ngpu = backbone.gpu_count[stage]
    attach: dict[str, list] = defaultdict(list)
    for t in h.members:
        for p in t.adapter.attach_points:
            attach[p].append(t)

    prev: Optional[str] = None
    pending_adapters: list[str] = []
    for i, op in enumerate(ops):
        nid = f"{gid}/{i}:{op}"
        if table.is_comm(op):
            lat = table.eval_comm(op, tokens * backbone.comm_bytes_per_token)
            node = OpNode(nid, COMM, op, gid, tokens, lat)
        else:
            node = OpNode(nid, COMPUTE, op, gid, tokens, table.eval_latency(op, tokens) / ngpu)
        g.add(node, ([prev] if prev else []) + pending_adapters)
        pending_adapters = []
        for t in attach.get(op, []):
            a_op = t.adapter.op_for(op)
            n = t.tokens_per_microbatch
            a = OpNode(f"{gid}/{i}:{op}@{t.task_id}", ADAPTER, a_op, t.task_id, n,
                       table.eval_latency(a_op, n), table.eval_utilization(a_op, n),
                       fusion_key=f"adapter@{i}:{op}")
            g.add(a, [prev] if prev else [])
            pending_adapters.append(a.node_id)
        prev = nid
    return g


def plan_stage(htasks: Sequence[HybridTask], stage: int, backbone: BackboneSpec,
               table: ProfileTable, bucket: int = 0) -> LaunchSchedule:
    graphs = [build_stage_graph(h, stage, backbone, table, bucket=bucket) for h in htasks]
    sset = build_subgraphs(graphs)
    sset = apply_fusion(sset, fusion_groups(graphs, sset))
    return schedule_subgraphs(sset)


def bucket_stage_latencies(htasks: Sequence[HybridTask], backbone: BackboneSpec,
                           table: ProfileTable) -> tuple[float, ...]:
    """Overlapped per-stage latency of a bucket of interleaved hybrid tasks."""
    return tuple(overlapped_stage_latency(plan_stage(htasks, s, backbone, table))
                 for s in range(backbone.num_stages))


LAUNCH_HEADER = ("order", "subgraph_id", "owner", "kind", "launch_t_ms", "duration_ms",
                 "channel")


def launch_rows(schedule: LaunchSchedule) -> list[tuple]:
    rows = []
    for i, (s, t) in enumerate(schedule.entries):
        sg = schedule.subgraphs.subgraphs[s]
        if sg.compute_latency > 0 or sg.comm_latency == 0:
            rows.append((i, s, sg.owner, sg.kind if sg.kind != COMM else COMPUTE, t,
                         sg.compute_latency, "compute"))
        if sg.comm_latency > 0:
            rows.append((i, s, sg.owner, COMM, t + sg.compute_latency, sg.comm_latency,
                         "communication"))
    return rows


def launch_csv(schedule: LaunchSchedule) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LAUNCH_HEADER)
    w.writerows(launch_rows(schedule))
    return buf.getvalue()
