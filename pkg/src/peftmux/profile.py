"""Measured operator profiles: latency t(x), utilization u(x), collective latency.

Lookups interpolate piecewise-linearly between samples. Above the sampled
range the last segment is extended linearly (never below the last sample);
below it the first sample is held.
"""

from __future__ import annotations

import csv
from bisect import bisect_left
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    tokens: int
    latency_ms: float
    utilization: float = 1.0


def _interp(xs: Sequence[float], ys: Sequence[float], x: float) -> float:
    if len(xs) == 1 or x <= xs[0]:
        return ys[0]
    if x >= xs[-1]:
        x0, x1, y0, y1 = xs[-2], xs[-1], ys[-2], ys[-1]
        return max(ys[-1], y1 + (y1 - y0) * (x - x1) / (x1 - x0))
    i = bisect_left(xs, x)
    if xs[i] == x:
        return ys[i]
    x0, x1, y0, y1 = xs[i - 1], xs[i], ys[i - 1], ys[i]
    return y0 + (y1 - y0) * (x - x0) / (x1 - x0)


@dataclass
class ProfileTable:
    entries: dict[str, list[Sample]] = field(default_factory=dict)
    comm_entries: dict[str, list[tuple[int, float]]] = field(default_factory=dict)

    def __post_init__(self):
        for op, samples in self.entries.items():
            self.entries[op] = sorted(samples, key=lambda s: s.tokens)
        for cid, rows in self.comm_entries.items():
            self.comm_entries[cid] = sorted(rows)
        self.check()
        self._build_index()

    def _build_index(self) -> None:
        self._xs = {op: [s.tokens for s in v] for op, v in self.entries.items()}
        self._lat = {op: [s.latency_ms for s in v] for op, v in self.entries.items()}
        self._util = {op: [s.utilization for s in v] for op, v in self.entries.items()}
        self._memo: dict[tuple[str, str, float], float] = {}

    def check(self) -> None:
        for op, samples in self.entries.items():
            if not samples:
                raise ProfileError(f"{op}: no samples")
            xs = [s.tokens for s in samples]
            if any(b <= a for a, b in zip(xs, xs[1:])):
                raise ProfileError(f"{op}: token counts must be strictly increasing")
            lat = [s.latency_ms for s in samples]
            if any(v <= 0 for v in lat):
                raise ProfileError(f"{op}: latencies must be strictly positive")
            if any(b < a for a, b in zip(lat, lat[1:])):
                raise ProfileError(f"{op}: latency must be non-decreasing in token count")
            if any(not 0.0 <= s.utilization <= 1.0 for s in samples):
                raise ProfileError(f"{op}: utilization must lie in [0, 1]")
        for cid, rows in self.comm_entries.items():
            if not rows:
                raise ProfileError(f"{cid}: no samples")
            xs = [r[0] for r in rows]
            if any(b <= a for a, b in zip(xs, xs[1:])):
                raise ProfileError(f"{cid}: payload sizes must be strictly increasing")
            if any(r[1] <= 0 for r in rows):
                raise ProfileError(f"{cid}: latencies must be strictly positive")

    def has_op(self, op_id: str) -> bool:
        return op_id in self.entries or op_id in self.comm_entries

    def is_comm(self, op_id: str) -> bool:
        return op_id in self.comm_entries

    def _lookup(self, kind: str, op_id: str, x: float) -> float:
        key = (kind, op_id, x)
        v = self._memo.get(key)
        if v is None:
            if x <= 0:
                raise ProfileError(f"token count must be positive, got {x}")
            if op_id not in self._xs:
                raise ProfileError(f"unknown operator id {op_id!r}")
            ys = self._lat[op_id] if kind == "t" else self._util[op_id]
            v = _interp(self._xs[op_id], ys, x)
            self._memo[key] = v
        return v

    def eval_latency(self, op_id: str, x: float) -> float:
        return self._lookup("t", op_id, x)

    def eval_utilization(self, op_id: str, x: float) -> float:
        return min(1.0, max(0.0, self._lookup("u", op_id, x)))

    def eval_comm(self, comm_id: str, payload_bytes: float) -> float:
        try:
            rows = self.comm_entries[comm_id]
        except KeyError:
            raise ProfileError(f"unknown collective id {comm_id!r}") from None
        if payload_bytes <= 0:
            return rows[0][1]
        return _interp([r[0] for r in rows], [r[1] for r in rows], payload_bytes)


def load_profile(path: str | Path) -> ProfileTable:
    """Read a delimited profile file.

    Header row required. Operator rows are ``op_id,token_count,latency_ms,
    utilization``; a row with only three fields is a collective row
    ``comm_id,payload_bytes,latency_ms``.
    """
    entries: dict[str, list[Sample]] = {}
    comm: dict[str, list[tuple[int, float]]] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise ProfileError("profile file is empty (header row required)")
        if header[0].strip() not in ("op_id", "comm_id"):
            raise ProfileError(f"missing header row, got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            row = [c.strip() for c in row]
            while row and row[-1] == "":
                row.pop()
            if not row:
                continue
            try:
                if len(row) == 4:
                    entries.setdefault(row[0], []).append(
                        Sample(int(row[1]), float(row[2]), float(row[3])))
                elif len(row) == 3:
                    comm.setdefault(row[0], []).append((int(row[1]), float(row[2])))
                else:
                    raise ValueError(f"expected 3 or 4 fields, got {len(row)}")
            except ValueError as e:
                raise ProfileError(f"line {lineno}: {e}") from e
    return ProfileTable(entries, comm)


def dump_profile(table: ProfileTable, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["op_id", "token_count", "latency_ms", "utilization"])
        for op in sorted(table.entries):
            for s in table.entries[op]:
                w.writerow([op, s.tokens, repr(s.latency_ms), repr(s.utilization)])
        for cid in sorted(table.comm_entries):
            for x, lat in table.comm_entries[cid]:
                w.writerow([cid, x, repr(lat)])


def saturating_samples(base_ms: float, per_token_ms: float, knee: int,
                       grid: Iterable[int]) -> list[Sample]:
    """Samples of t(x) = base + per_token * max(x, knee), u(x) = min(1, x / knee).

    Below the knee the GPU is underutilized and latency stays flat; above it
    latency grows linearly, so batching stops paying off.
    """
    return [Sample(x, base_ms + per_token_ms * max(x, knee), min(1.0, x / knee))
            for x in grid]


def synthetic_profile(ops: Mapping[str, tuple[float, float, int]],
                      comms: Mapping[str, tuple[float, float]] | None = None,
                      grid: Sequence[int] | None = None) -> ProfileTable:
    """Build a table from ``{op_id: (base_ms, per_token_ms, knee)}``.

    ``comms`` maps a collective id to ``(base_ms, ms_per_byte)``.
    """
    if grid is None:
        grid = [2 ** k for k in range(4, 18)]
    entries = {op: saturating_samples(a, b, knee, grid) for op, (a, b, knee) in ops.items()}
    comm_entries = {}
    for cid, (a, per_byte) in (comms or {}).items():
        pts = [2 ** k for k in range(10, 31, 2)]
        comm_entries[cid] = [(x, a + per_byte * x) for x in pts]
    return ProfileTable(entries, comm_entries)
