"""Command-line entry point: plan, simulate, align, replay, example, selftest.

Exit codes: 0 success, 1 I/O error, 2 invalid input or malformed plan,
3 infeasible plan.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .alignment import align_htask, effective_token_stats, layout_csv, zero_pad_stats
from .cluster import (DEDICATED, MODES, MULTIPLEXED, compare_modes, dump_trace, load_trace,
                      replay, report_json, synthetic_trace, template_factory)
from .fusion import InfeasiblePlan, fuse_tasks
from .pipeline import SimulationError, TemplateError, gantt_csv
from .planner import plan, plan_report, resimulate
from .profile import ProfileError, dump_profile, load_profile
from .workload import (PlannerConfig, WorkloadError, dump_workload, load_workload,
                       sort_by_tokens, validate_workload)

EXIT_OK, EXIT_IO, EXIT_INVALID, EXIT_INFEASIBLE = 0, 1, 2, 3
GiB = 1024 ** 3
DEFAULT_SEED = 0


class _Fail(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _dumps(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _write(path: Optional[str], text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


def _overrides(cfg: PlannerConfig, args) -> PlannerConfig:
    if getattr(args, "max_buckets", None) is not None:
        cfg = replace(cfg, max_buckets=args.max_buckets)
    if getattr(args, "chunk_min", None) is not None:
        cfg = replace(cfg, chunk_min=args.chunk_min)
    if getattr(args, "mem_limit_gb", None) is not None:
        cfg = replace(cfg, memory_limit_per_gpu=args.mem_limit_gb * GiB)
    return cfg


def _load_inputs(args):
    try:
        tasks, backbone, cfg = load_workload(args.workload)
        table = load_profile(args.profile)
    except OSError as e:
        raise _Fail(EXIT_IO, f"cannot read input: {e}")
    except (WorkloadError, ProfileError, ValueError) as e:
        raise _Fail(EXIT_INVALID, str(e))
    return tasks, backbone, _overrides(cfg, args), table


def _validated(args):
    tasks, backbone, cfg, table = _load_inputs(args)
    rep = validate_workload(tasks, backbone, cfg, table)
    if not rep.accepted:
        raise _Fail(EXIT_INVALID, "invalid workload:\n  " + "\n  ".join(rep.all_messages()))
    return tasks, backbone, cfg, table


def cmd_plan(args) -> int:
    tasks, backbone, cfg, table = _validated(args)
    try:
        res = plan(tasks, backbone, table, cfg, align=not args.no_align, validate=False)
    except InfeasiblePlan as e:
        raise _Fail(EXIT_INFEASIBLE, str(e))
    _write(args.out, _dumps(plan_report(res, backbone, cfg)))
    if args.gantt:
        _write(args.gantt, gantt_csv(res.schedule))
    print(f"makespan {res.makespan:.3f} ms, P={res.grouping.chosen_P}, "
          f"{len(res.htasks)} hybrid tasks, planned in {res.wall_clock_s:.3f} s",
          file=sys.stderr)
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        doc = json.loads(Path(args.plan).read_text())
    except OSError as e:
        raise _Fail(EXIT_IO, f"cannot read plan: {e}")
    except ValueError as e:
        raise _Fail(EXIT_INVALID, f"malformed plan: {e}")
    try:
        sched, bub = resimulate(doc)
    except (ValueError, TemplateError, SimulationError) as e:
        raise _Fail(EXIT_INVALID, str(e))
    bubbles = {
        "makespan_ms": sched.makespan,
        "warmup_ms": bub.warmup_ms,
        "steady_ms": bub.steady_ms,
        "drain_ms": bub.drain_ms,
        "last_stage_idle_steady_ms": bub.last_stage_idle_steady,
        "internal_bubble_fraction": bub.internal_bubble_fraction,
    }
    if args.out in (None, "-"):
        _write(None, gantt_csv(sched))
        print(_dumps(bubbles), end="", file=sys.stderr)
    else:
        out = Path(args.out)
        _write(str(out / "gantt.csv"), gantt_csv(sched))
        _write(str(out / "bubbles.json"), _dumps(bubbles))
    return EXIT_OK


def cmd_align(args) -> int:
    tasks, backbone, cfg, table = _validated(args)
    try:
        fusion = fuse_tasks(sort_by_tokens(tasks), backbone, table, cfg)
    except InfeasiblePlan as e:
        raise _Fail(EXIT_INFEASIBLE, str(e))
    layouts = [align_htask(h, cfg) for h in fusion.htasks]
    _write(args.out, layout_csv(layouts))
    summary = []
    for h, lay in zip(fusion.htasks, layouts):
        total, orig, frac = effective_token_stats(lay.stats)
        summary.append({"htask": lay.htask, "chunk_size": lay.chunk_size,
                        "padding_flag": lay.padding_flag, "original_tokens": orig,
                        "total_tokens": total, "effective_fraction": frac,
                        "zero_pad_effective_fraction":
                            effective_token_stats(zero_pad_stats(h.members))[2]})
    print(_dumps(summary), end="", file=sys.stderr)
    return EXIT_OK


def cmd_replay(args) -> int:
    tasks, backbone, cfg, table = _validated(args)
    try:
        trace = (load_trace(args.trace) if args.trace
                 else synthetic_trace(args.num_tasks, seed=args.seed,
                                      datasets=sorted({t.dataset_id or t.task_id
                                                       for t in tasks})))
    except OSError as e:
        raise _Fail(EXIT_IO, f"cannot read trace: {e}")
    except ValueError as e:
        raise _Fail(EXIT_INVALID, str(e))
    templates = {}
    for t in tasks:
        templates.setdefault(t.dataset_id or t.task_id, t)
    factory = template_factory(templates, cfg.micro_batch_count)
    backbones = {bid: backbone for bid in sorted({e.backbone_id for e in trace})}
    gpus = args.gpus if args.gpus is not None else 2 * sum(backbone.gpu_count)
    try:
        if args.mode == "both":
            doc = compare_modes(trace, gpus, backbones, table, cfg, factory)
        else:
            doc = replay(trace, gpus, args.mode, backbones, table, cfg, factory)
    except InfeasiblePlan as e:
        raise _Fail(EXIT_INFEASIBLE, str(e))
    except ValueError as e:
        raise _Fail(EXIT_INVALID, str(e))
    _write(args.out, report_json(doc))
    return EXIT_OK


def cmd_example(args) -> int:
    from .synthetic import demo_backbone, demo_config, demo_profile, demo_tasks
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = demo_config()
    doc = dump_workload(demo_tasks(args.num_tasks, seed=args.seed), demo_backbone(), cfg)
    (out / "workload.json").write_text(_dumps(doc))
    dump_profile(demo_profile(), out / "profile.csv")
    dump_trace(synthetic_trace(40, seed=args.seed, datasets=("qa", "rte", "sst2")),
               out / "trace.csv")
    print(f"wrote workload.json, profile.csv, trace.csv to {out}", file=sys.stderr)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    return EXIT_OK if run_selftest(seed=args.seed) else EXIT_INVALID


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="peftmux",
                                description="Multi-task PEFT co-scheduling planner and simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    def inputs(sp, out_help):
        sp.add_argument("--workload", required=True, help="workload JSON")
        sp.add_argument("--profile", required=True, help="profile CSV")
        sp.add_argument("--out", default=None, help=out_help)
        sp.add_argument("--seed", type=int, default=DEFAULT_SEED)
        sp.add_argument("--max-buckets", type=int, default=None)
        sp.add_argument("--chunk-min", type=int, default=None)
        sp.add_argument("--mem-limit-gb", type=float, default=None)

    sp = sub.add_parser("plan", help="plan a workload and write the report")
    inputs(sp, "report path (default stdout)")
    sp.add_argument("--gantt", default=None, help="also write the Gantt CSV here")
    sp.add_argument("--no-align", action="store_true", help="skip chunk alignment")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("simulate", help="re-simulate a plan report")
    sp.add_argument("--plan", required=True)
    sp.add_argument("--out", default=None, help="output directory (default stdout)")
    sp.add_argument("--seed", type=int, default=DEFAULT_SEED)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("align", help="write the chunk layout of every hybrid task")
    inputs(sp, "layout CSV path (default stdout)")
    sp.set_defaults(func=cmd_align)

    sp = sub.add_parser("replay", help="replay a cluster trace")
    inputs(sp, "report path (default stdout)")
    sp.add_argument("--trace", default=None, help="trace CSV (default: synthetic)")
    sp.add_argument("--num-tasks", type=int, default=40)
    sp.add_argument("--gpus", type=int, default=None)
    sp.add_argument("--mode", choices=[*MODES, "both"], default="both")
    sp.set_defaults(func=cmd_replay)

    sp = sub.add_parser("example", help="write a demo workload, profile and trace")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=DEFAULT_SEED)
    sp.add_argument("--num-tasks", type=int, default=8)
    sp.set_defaults(func=cmd_example)

    sp = sub.add_parser("selftest", help="run small oracle checks")
    sp.add_argument("--seed", type=int, default=DEFAULT_SEED)
    sp.set_defaults(func=cmd_selftest)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _Fail as f:
        print(f"error: {f}", file=sys.stderr)
        return f.code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
