"""Chunk-based alignment of variable-length data across the tasks of a hybrid task.

Each task packs its own global batch (first-fit decreasing at its padded
length), then every pack is cut into chunks of one shared power-of-two size.
Padding is split into the part a task would pay on its own (intra-task,
billed to the user) and the extra caused by sharing a chunk size with other
tasks (inter-task).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

from .cost import HybridTask
from .workload import PlannerConfig, Task


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class Pack:
    owner: str
    members: tuple[int, ...]
    capacity: int

    @property
    def total_len(self) -> int:
        return sum(self.members)

    @property
    def boundaries(self) -> tuple[int, ...]:
        """Start offset of every member sequence inside the pack."""
        out, acc = [], 0
        for n in self.members:
            out.append(acc)
            acc += n
        return tuple(out)


def pack_lengths(lengths: Sequence[int], capacity: int, owner: str = "") -> list[Pack]:
    """First-fit decreasing; ties keep input order."""
    if capacity <= 0:
        raise AlignmentError("pack capacity must be positive")
    order = sorted(range(len(lengths)), key=lambda i: -lengths[i])
    bins: list[list[int]] = []
    room: list[int] = []
    for i in order:
        n = lengths[i]
        if n > capacity:
            raise AlignmentError(f"sequence of {n} tokens exceeds pack capacity {capacity}")
        if n <= 0:
            raise AlignmentError("sequence lengths must be positive")
        for k, r in enumerate(room):
            if n <= r:
                bins[k].append(n)
                room[k] -= n
                break
        else:
            bins.append([n])
            room.append(capacity - n)
    return [Pack(owner, tuple(b), capacity) for b in bins]


def pack_sequences(task: Task, capacity: Optional[int] = None) -> list[Pack]:
    """Pack one task's (truncated) global batch at capacity ``l_i`` or larger."""
    cap = task.padded_seq_len if capacity is None else capacity
    if cap < task.padded_seq_len:
        raise AlignmentError("pack capacity may not be below the task's padded length")
    return pack_lengths(task.truncated_lengths, cap, task.task_id)


def pow2_divisor(n: int) -> int:
    """Largest power of two dividing ``n``."""
    if n <= 0:
        raise AlignmentError("length must be positive")
    return n & -n


def choose_chunk_size(lengths: Sequence[int], chunk_min: int = 64) -> tuple[int, bool]:
    """(chunk size, padding flag) for tasks with padded lengths ``lengths``.

    The size is the largest power of two dividing every length, raised to
    ``chunk_min``; the flag is set when that raise happened.
    """
    if not lengths:
        raise AlignmentError("no lengths")
    common = min(pow2_divisor(n) for n in lengths)
    if common < chunk_min:
        return chunk_min, True
    return common, False


def chunk_size_for(htask: HybridTask, cfg: PlannerConfig) -> tuple[int, bool]:
    return choose_chunk_size([t.padded_seq_len for t in htask.members], cfg.chunk_min)


@dataclass(frozen=True)
class Chunk:
    chunk_id: int
    task: str
    pack: int  # index within the task's packs
    offset: int  # token offset inside the pack
    valid_tokens: int
    pad_tokens: int
    inter_pad: int  # share of pad_tokens caused by cross-task alignment
    depends_on: Optional[int]


@dataclass(frozen=True)
class PadStats:
    original_tokens: int
    intra_task_pad: int
    inter_task_pad: int

    @property
    def total_tokens(self) -> int:
        return self.original_tokens + self.intra_task_pad + self.inter_task_pad


@dataclass(frozen=True)
class ChunkLayout:
    htask: str
    chunk_size: int
    padding_flag: bool
    chunks: tuple[Chunk, ...]
    stats: PadStats

    def chunks_of(self, task_id: str) -> list[Chunk]:
        return [c for c in self.chunks if c.task == task_id]


def _width(total: int, size: int) -> int:
    return -(-total // size) * size


def chunk_partition(packs: Sequence[Pack], chunk_size: int, *,
                    alone_chunk: Optional[Mapping[str, int]] = None,
                    htask: str = "") -> ChunkLayout:
    """Cut every pack into ``ceil(total_len / chunk_size)`` linked chunks.

    ``alone_chunk`` gives the chunk size each task would use by itself; padding
    beyond that width is attributed to cross-task alignment. Without it all
    padding counts as intra-task.
    """
    if chunk_size <= 0:
        raise AlignmentError("chunk_size must be positive")
    chunks: list[Chunk] = []
    per_task_idx: dict[str, int] = {}
    original = intra = inter = 0
    for pack in packs:
        k = per_task_idx.get(pack.owner, 0)
        per_task_idx[pack.owner] = k + 1
        T = pack.total_len
        width = _width(T, chunk_size)
        pad = width - T
        own = alone_chunk.get(pack.owner) if alone_chunk else None
        extra = max(0, width - _width(T, own)) if own else 0
        original += T
        inter += extra
        intra += pad - extra
        prev = None
        for off in range(0, width, chunk_size):
            valid = min(chunk_size, T - off)
            cid = len(chunks)
            last = off + chunk_size >= width
            chunks.append(Chunk(cid, pack.owner, k, off, valid, chunk_size - valid,
                                extra if last else 0, prev))
            prev = cid
    return ChunkLayout(htask, chunk_size, False, tuple(chunks), PadStats(original, intra, inter))


def align_htask(htask: HybridTask, cfg: PlannerConfig) -> ChunkLayout:
    """Pack each member's batch and chunk the packs at the hybrid task's chunk size."""
    size, flag = chunk_size_for(htask, cfg)
    packs = [p for t in htask.members for p in pack_sequences(t)]
    alone = {t.task_id: choose_chunk_size([t.padded_seq_len], cfg.chunk_min)[0]
             for t in htask.members}
    layout = chunk_partition(packs, size, alone_chunk=alone, htask=htask.name)
    return ChunkLayout(layout.htask, size, flag, layout.chunks, layout.stats)


def effective_token_stats(stats: PadStats) -> tuple[int, int, float]:
    """(total tokens, original tokens, original / (original + inter-task pad))."""
    denom = stats.original_tokens + stats.inter_task_pad
    frac = stats.original_tokens / denom if denom else 1.0
    return stats.total_tokens, stats.original_tokens, frac


def zero_pad_stats(tasks: Sequence[Task]) -> PadStats:
    """Padding of the pad-every-sequence-to-the-global-maximum strategy.

    Padding a sequence up to its own task's length is intra-task; the rest,
    up to the largest padded length in the group, is inter-task.
    """
    if not tasks:
        raise AlignmentError("no tasks")
    top = max(t.padded_seq_len for t in tasks)
    original = intra = inter = 0
    for t in tasks:
        for n in t.truncated_lengths:
            original += n
            intra += t.padded_seq_len - n
            inter += top - t.padded_seq_len
    return PadStats(original, intra, inter)


def aligned_tokens_per_microbatch(layout: ChunkLayout, task_id: str, micro_batches: int) -> int:
    """Token count per micro-batch once a task's chunks are spread over C micro-batches."""
    n = len(layout.chunks_of(task_id))
    return max(1, math.ceil(n * layout.chunk_size / micro_batches))


def apply_alignment(htask: HybridTask, layout: ChunkLayout, micro_batches: int) -> HybridTask:
    members = tuple(t.with_tokens(aligned_tokens_per_microbatch(layout, t.task_id, micro_batches))
                    for t in htask.members)
    return HybridTask(htask.start, htask.end, members)


LAYOUT_HEADER = ("chunk_id", "htask", "task", "pack", "offset", "valid_tokens", "pad_tokens",
                 "depends_on")


def layout_rows(layout: ChunkLayout) -> list[tuple]:
    return [(c.chunk_id, layout.htask, c.task, c.pack, c.offset, c.valid_tokens, c.pad_tokens,
             "" if c.depends_on is None else c.depends_on) for c in layout.chunks]


def layout_csv(layouts: Sequence[ChunkLayout]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LAYOUT_HEADER)
    for lay in layouts:
        w.writerows(layout_rows(lay))
    return buf.getvalue()
