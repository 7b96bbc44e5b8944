import random

import pytest

from conftest import GB, big_config, linear_table, make_task, toy_backbone
from peftmux.cost import (HybridTask, extending_pipeline_latencies, fused_adapter_latency,
                          memory_estimate, pipeline_latency, stage_latencies, stage_latency)
from peftmux.pipeline import generate_template, simulate
from peftmux.profile import ProfileError, ProfileTable, Sample
from peftmux.workload import BackboneSpec, PlannerConfig


def flat_table(op_ms, lora_ms=2.0, lora_u=0.3):
    return ProfileTable({"proj": [Sample(1, op_ms), Sample(10 ** 6, op_ms)],
                         "lora": [Sample(1, lora_ms, lora_u), Sample(10 ** 6, lora_ms, lora_u)]})


def test_single_operator_sharded():
    bb = BackboneSpec(1, (2,), (("proj",),), GB)
    t = make_task("a", attach=("other",))
    assert stage_latency(HybridTask.single(t), 0, bb, flat_table(10.0)) == 5.0


def test_adapter_group_max_bound_dominates():
    bb = BackboneSpec(1, (1,), (("proj",),), GB)
    h = HybridTask(0, 1, (make_task("a"), make_task("b")))
    lat = stage_latencies(h, bb, flat_table(1.0))
    assert lat.adapter_part == (2.0,)
    assert lat.per_stage == (3.0,)


def _oracle_stage(h, s, bb, table):
    """Straight-line evaluation of the stage-latency formula."""
    n = 0
    for t in h.members:
        n += t.tokens_per_microbatch
    total = 0.0
    for op in bb.stage_operators[s]:
        if table.is_comm(op):
            continue
        samples = table.entries[op]
        total += _lerp(samples, n, "latency_ms") / bb.gpu_count[s]
    for op in bb.stage_operators[s]:
        lats, ws = [], []
        for t in h.members:
            if op in t.adapter.attach_points:
                a_op = t.adapter.adapter_op_ids[0]
                x = t.tokens_per_microbatch
                lat = _lerp(table.entries[a_op], x, "latency_ms")
                u = min(1.0, max(0.0, _lerp(table.entries[a_op], x, "utilization")))
                lats.append(lat)
                ws.append(u * lat)
        if lats:
            total += max(sum(ws), max(lats))
    return total


def _lerp(samples, x, field):
    pts = [(s.tokens, getattr(s, field)) for s in samples]
    if x <= pts[0][0]:
        return pts[0][1]
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        if x0 <= x <= x1:
            return y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    (x0, y0), (x1, y1) = pts[-2], pts[-1]
    return max(y1, y1 + (y1 - y0) * (x - x1) / (x1 - x0))


def test_stage_latency_matches_independent_formula():
    r = random.Random(7)
    table = linear_table({"proj": (0.5, 0.002, 512, 512), "mlp": (0.8, 0.003, 256, 256),
                          "lora": (0.1, 0.0005, 1024, 2048), "ia3": (0.05, 0.0001, 64, 4096)},
                         comms={"ar": [(1, 0.1), (10 ** 9, 5.0)]})
    for _ in range(300):
        S = r.randint(1, 4)
        ops = tuple(tuple(r.sample(["proj", "mlp", "ar"], r.randint(1, 3))) for _ in range(S))
        bb = BackboneSpec(S, tuple(r.randint(1, 4) for _ in range(S)), ops, GB)
        members = tuple(
            make_task(f"t{k}", b=r.randint(1, 8), l=r.choice([64, 128, 256]),
                      attach=tuple(r.sample(["proj", "mlp"], r.randint(1, 2))),
                      op=r.choice(["lora", "ia3"]))
            for k in range(r.randint(1, 5)))
        h = HybridTask(0, len(members) - 1, members)
        for s in range(S):
            assert stage_latency(h, s, bb, table) == pytest.approx(
                _oracle_stage(h, s, bb, table), rel=1e-9)


def test_stage_index_and_profile_errors():
    bb = toy_backbone(S=2)
    h = HybridTask.single(make_task("a"))
    with pytest.raises(IndexError):
        stage_latency(h, 2, bb, flat_table(1.0))
    with pytest.raises(ProfileError):
        stage_latency(h, 0, toy_backbone(ops=("zzz",)), flat_table(1.0))


def test_pipeline_single_stage():
    bb = BackboneSpec(1, (1,), (("proj",),), GB)
    h = HybridTask.single(make_task("a", attach=("x",)))
    assert pipeline_latency(h, bb, flat_table(3.0), 5) == 2 * 5 * 3.0


def test_pipeline_two_stage_hand_value():
    bb = toy_backbone(S=2)
    h = HybridTask.single(make_task("a", attach=("x",)))
    assert pipeline_latency(h, bb, flat_table(1.0), 4) == 10.0


def test_pipeline_strictly_increasing_in_c():
    bb = toy_backbone(S=3)
    h = HybridTask.single(make_task("a"))
    vals = [pipeline_latency(h, bb, flat_table(1.5), c) for c in range(1, 10)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


@pytest.mark.parametrize("S", [1, 2, 3, 4])
@pytest.mark.parametrize("C", [1, 2, 4, 8])
def test_model_bounds_simulator_for_uniform_single_bucket(S, C):
    bb = toy_backbone(S=S)
    h = HybridTask.single(make_task("a", attach=("x",)))
    table = flat_table(1.25)
    model = pipeline_latency(h, bb, table, C)
    lat = {0: stage_latencies(h, bb, table).per_stage}
    sched, _ = simulate(generate_template(lat, C), lat)
    assert model >= sched.makespan
    assert (model - sched.makespan) / sched.makespan <= 0.15


def test_memory_worked_example():
    S = 4
    coef = 4.3 * GB / (S * 8 * 512)
    t = make_task("a", b=8, l=512, act=coef, grad=0.4 * GB)
    bb = toy_backbone(S=S, mb=12 * GB)
    m = memory_estimate([t], bb, big_config())
    assert m.peak_bytes == pytest.approx(7.4 * GB, rel=1e-12)
    assert m.backbone_share + m.grad_share + m.activation_sum == pytest.approx(m.peak_bytes)


def test_memory_no_tasks():
    bb = toy_backbone(S=4, mb=12 * GB)
    assert memory_estimate([], bb, big_config()).peak_bytes == 3 * GB


def test_memory_doubling_batch_doubles_activation_only():
    bb = toy_backbone(S=2, mb=GB)
    a = memory_estimate([make_task("a", b=2, l=128, act=10, grad=100)], bb, big_config())
    b = memory_estimate([make_task("a", b=4, l=128, act=10, grad=100)], bb, big_config())
    assert b.activation_sum == 2 * a.activation_sum
    assert (b.backbone_share, b.grad_share) == (a.backbone_share, a.grad_share)


def test_memory_oom_flag():
    bb = toy_backbone(S=2, mb=GB)
    t = make_task("a", act=10)
    peak = memory_estimate([t], bb, big_config()).peak_bytes
    assert memory_estimate([t], bb, PlannerConfig(1, peak)).oom is False
    assert memory_estimate([t], bb, PlannerConfig(1, peak - 1)).oom is True


def test_stage_latency_monotone_in_tokens():
    table = linear_table({"proj": (0.5, 0.002, 512, 512), "lora": (0.1, 0.001, 64, 2048)})
    bb = toy_backbone(S=1)
    prev = 0.0
    for n in range(16, 5000, 97):
        h = HybridTask(0, 1, (make_task("a", tokens=100), make_task("b", tokens=n)))
        cur = stage_latency(h, 0, bb, table)
        assert cur >= prev
        prev = cur


def test_fused_adapter_term_bounds():
    r = random.Random(2)
    for _ in range(500):
        lat = [r.uniform(0.1, 5) for _ in range(r.randint(1, 6))]
        u = [r.random() for _ in lat]
        v = fused_adapter_latency(lat, u)
        assert v >= max(lat) and v >= sum(a * b for a, b in zip(u, lat))
        assert v in (max(lat), sum(a * b for a, b in zip(u, lat)))


def test_incremental_prefix_costs_bit_identical():
    r = random.Random(5)
    table = linear_table({"proj": (0.5, 0.002, 512, 512), "mlp": (0.8, 0.003, 256, 256),
                          "lora": (0.1, 0.0005, 1024, 2048)})
    bb = BackboneSpec(3, (1, 2, 1), (("proj", "mlp"), ("mlp",), ("proj", "proj")), GB)
    for _ in range(50):
        ts = [make_task(f"t{i}", tokens=r.randint(16, 4000),
                        attach=tuple(r.sample(["proj", "mlp"], r.randint(1, 2))))
              for i in range(6)]
        got = list(extending_pipeline_latencies(ts, bb, table, 4))
        want = [pipeline_latency(HybridTask.from_range(ts, 0, j), bb, table, 4)
                for j in range(6)]
        assert got == want


def test_hybrid_task_invariants():
    with pytest.raises(ValueError):
        HybridTask(2, 1, ())
    h = HybridTask(0, 1, (make_task("a", attach=("p", "q")), make_task("b", attach=("q",))))
    assert h.fused_adapter_groups == {"p": (0,), "q": (0, 1)}
