import math
import random

import pytest

from conftest import GB, big_config, linear_table, make_task, toy_backbone
from peftmux.cost import HybridTask
from peftmux.fusion import InfeasiblePlan
from peftmux.grouping import (_local_search, _lpt_seed, balance_partition, bucket_loads,
                              evaluate_grouping, group_htasks, select_grouping,
                              variance_objective)
from peftmux.pipeline import simulate
from peftmux.profile import ProfileTable, Sample
from peftmux.workload import PlannerConfig


def set_partitions(n, P):
    """Every partition of range(n) into exactly P non-empty labelled-by-first-use blocks."""
    def rec(i, blocks):
        if i == n:
            if len(blocks) == P:
                yield [list(b) for b in blocks]
            return
        if n - i < P - len(blocks):
            return
        for b in blocks:
            b.append(i)
            yield from rec(i + 1, blocks)
            b.pop()
        if len(blocks) < P:
            blocks.append([i])
            yield from rec(i + 1, blocks)
            blocks.pop()
    yield from rec(0, [])


def stirling2(n, k):
    return sum((-1) ** j * math.comb(k, j) * (k - j) ** n for j in range(k + 1)) // math.factorial(k)


def partition_variance(weights, blocks):
    loads = [sum(weights[i] for i in b) for b in blocks]
    mean = sum(loads) / len(loads)
    return sum((x - mean) ** 2 for x in loads)


def brute_min(weights, P):
    return min(partition_variance(weights, b) for b in set_partitions(len(weights), P))


def as_assignment(n, blocks):
    a = [0] * n
    for j, b in enumerate(blocks):
        for i in b:
            a[i] = j
    return a


def test_enumerator_counts_match_stirling():
    for n in range(1, 8):
        for k in range(1, n + 1):
            assert sum(1 for _ in set_partitions(n, k)) == stirling2(n, k)


def test_p_equals_n():
    w = [3.0, 1.0, 4.0, 1.5]
    a = balance_partition(w, 4)
    assert sorted(a) == [0, 1, 2, 3]
    mean = sum(w) / 4
    assert variance_objective(w, a, 4) == pytest.approx(sum((x - mean) ** 2 for x in w))


def test_p_one():
    w = [3.0, 1.0, 4.0]
    assert balance_partition(w, 1) == (0, 0, 0)
    assert variance_objective(w, (0, 0, 0), 1) == 0.0


def test_eight_tasks_three_buckets_matches_enumeration():
    r = random.Random(8)
    for _ in range(10):
        w = [r.choice([0.5, 1.25, 2.0, 3.75, 4.5, 6.25]) for _ in range(8)]
        a = balance_partition(w, 3)
        assert len(set(a)) == 3
        assert variance_objective(w, a, 3) == brute_min(w, 3)


def test_tie_break_lexicographically_smallest():
    w = [1.0, 1.0, 1.0, 1.0]
    a = balance_partition(w, 2)
    best = brute_min(w, 2)
    optimal = sorted(tuple(as_assignment(4, b)) for b in set_partitions(4, 2)
                     if partition_variance(w, b) == best)
    assert a == optimal[0] == (0, 0, 1, 1)


def test_large_n_heuristic_is_valid_and_not_worse_than_seed():
    r = random.Random(21)
    for _ in range(20):
        N = r.randint(13, 30)
        P = r.randint(2, 6)
        w = [r.uniform(0.5, 10) for _ in range(N)]
        seed = _lpt_seed(w, P)
        assert len(set(seed)) == P
        improved = _local_search(w, list(seed), P)
        assert variance_objective(w, improved, P) <= variance_objective(w, seed, P)
        a = balance_partition(w, P)
        assert len(a) == N and set(a) == set(range(P))
        assert variance_objective(w, a, P) <= variance_objective(w, seed, P)


def test_partition_errors():
    with pytest.raises(ValueError):
        balance_partition([], 1)
    with pytest.raises(ValueError):
        balance_partition([1.0], 2)
    with pytest.raises(ValueError):
        balance_partition([1.0], 0)


def test_bucket_loads_recomputed():
    w = [1.0, 2.0, 4.0]
    assert bucket_loads(w, (0, 1, 0), 2) == [5.0, 2.0]


TABLE = linear_table({"proj": (0.5, 0.002, 256, 256), "lora": (0.2, 0.001, 512, 512)})


def htasks(tokens):
    return [HybridTask(i, i, (make_task(f"t{i}", tokens=n),)) for i, n in enumerate(tokens)]


def test_group_htasks_partition_is_complete():
    hs = htasks([64, 128, 300, 900, 2000])
    bb = toy_backbone(S=2)
    for P in range(1, 6):
        buckets = group_htasks(hs, P, bb, TABLE)
        assert sorted(i for b in buckets for i in b) == list(range(5))
        assert all(buckets)


def test_select_single_htask():
    plan = select_grouping(htasks([100]), toy_backbone(S=2), TABLE, big_config())
    assert plan.chosen_P == 1 and plan.buckets == ((0,),)
    assert plan.curve == [(1, plan.chosen.makespan)]


def test_select_reports_resimulated_latency():
    r = random.Random(3)
    for _ in range(10):
        hs = htasks([r.choice([64, 256, 1024, 4096]) for _ in range(r.randint(1, 5))])
        bb = toy_backbone(S=r.randint(1, 4))
        plan = select_grouping(hs, bb, TABLE, big_config(C=r.randint(1, 4)))
        c = plan.chosen
        sched, _ = simulate(c.template, c.bucket_latencies)
        assert sched.makespan == c.makespan == min(m for _, m in plan.curve)
        assert plan.chosen_P == min(P for P, m in plan.curve if m == c.makespan)
        again = evaluate_grouping(hs, plan.buckets, bb, TABLE, big_config(C=c.template.micro_batches))
        assert again.makespan == c.makespan


def test_select_respects_max_buckets():
    hs = htasks([64, 128, 256, 512])
    plan = select_grouping(hs, toy_backbone(), TABLE, big_config(max_buckets=2))
    assert [P for P, _ in plan.curve] == [1, 2]


def _pair(above):
    if above:
        table = linear_table({"proj": (0.0, 0.001, 1, 1), "lora": (0.0, 0.004, 1, 1)})
        tokens = 4000
    else:
        table = ProfileTable({"proj": [Sample(1, 1.0, 0.1), Sample(10 ** 6, 1.0, 0.1)],
                              "lora": [Sample(1, 4.0, 0.25), Sample(10 ** 6, 4.0, 0.25)]})
        tokens = 100
    return select_grouping(htasks([tokens, tokens]), toy_backbone(S=4), table, big_config(C=4))


def test_below_knee_batching_wins():
    # one bucket: stage = 1 + 1 + fused adapter 4 = 6, 2*(4+3)*6; two buckets: 5 per stage, 2*(8+3)*5
    plan = _pair(above=False)
    assert plan.curve == [(1, 84.0), (2, 110.0)]
    assert plan.chosen_P == 1


def test_above_knee_interleaving_wins():
    # per task t = 20 per stage with no fusion gain: 2*7*2t vs 2*11*t
    plan = _pair(above=True)
    assert plan.curve == [(1, 560.0), (2, 440.0)]
    assert plan.chosen_P == 2


def test_infeasible_everywhere_raises():
    hs = [HybridTask(0, 0, (make_task("a", act=10 ** 6, b=8, l=512),))]
    with pytest.raises(InfeasiblePlan):
        select_grouping(hs, toy_backbone(S=2, mb=GB), TABLE, PlannerConfig(4, GB))
