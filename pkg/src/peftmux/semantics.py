"""Reference check that batching several tasks through one shared GEMM keeps them isolated.

Row-concatenating task batches and multiplying once by the frozen weight gives
each task exactly its own product, forward and backward. With a fixed
accumulation order the two paths agree bit for bit, and a non-finite value in
one task cannot reach another task's rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence


class ShapeError(ValueError):
    pass


class IsolationError(AssertionError):
    pass


@dataclass(frozen=True)
class DenseMatrix:
    rows: int
    cols: int
    values: tuple[float, ...]  # row-major

    def __post_init__(self):
        if self.rows < 0 or self.cols < 0:
            raise ShapeError("negative dimension")
        if len(self.values) != self.rows * self.cols:
            raise ShapeError(f"{len(self.values)} values for a {self.rows}x{self.cols} matrix")

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "DenseMatrix":
        r = len(rows)
        c = len(rows[0]) if r else 0
        if any(len(x) != c for x in rows):
            raise ShapeError("ragged rows")
        return cls(r, c, tuple(float(v) for x in rows for v in x))

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "DenseMatrix":
        return cls(rows, cols, (0.0,) * (rows * cols))

    @classmethod
    def identity(cls, n: int) -> "DenseMatrix":
        return cls(n, n, tuple(1.0 if i == j else 0.0 for i in range(n) for j in range(n)))

    def at(self, i: int, j: int) -> float:
        return self.values[i * self.cols + j]

    def row(self, i: int) -> tuple[float, ...]:
        return self.values[i * self.cols:(i + 1) * self.cols]

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.values)

    def transpose(self) -> "DenseMatrix":
        return DenseMatrix(self.cols, self.rows,
                           tuple(self.at(i, j) for j in range(self.cols) for i in range(self.rows)))

    def row_slice(self, start: int, stop: int) -> "DenseMatrix":
        return DenseMatrix(stop - start, self.cols, self.values[start * self.cols:stop * self.cols])


def matmul(a: DenseMatrix, b: DenseMatrix) -> DenseMatrix:
    """Row-major, k-inner accumulation starting from 0.0."""
    if a.cols != b.rows:
        raise ShapeError(f"cannot multiply {a.rows}x{a.cols} by {b.rows}x{b.cols}")
    out = []
    for i in range(a.rows):
        arow = a.row(i)
        for j in range(b.cols):
            acc = 0.0
            for k in range(a.cols):
                acc += arow[k] * b.values[k * b.cols + j]
            out.append(acc)
    return DenseMatrix(a.rows, b.cols, tuple(out))


def vstack(mats: Sequence[DenseMatrix]) -> DenseMatrix:
    if not mats:
        raise ShapeError("nothing to stack")
    cols = mats[0].cols
    if any(m.cols != cols for m in mats):
        raise ShapeError("column counts differ")
    return DenseMatrix(sum(m.rows for m in mats), cols, tuple(v for m in mats for v in m.values))


def _same_bits(x: float, y: float) -> bool:
    return x == y or (math.isnan(x) and math.isnan(y))


def _split_and_check(stacked: DenseMatrix, parts: Sequence[DenseMatrix],
                     rhs: DenseMatrix) -> list[DenseMatrix]:
    slices, r = [], 0
    for k, p in enumerate(parts):
        sl = stacked.row_slice(r, r + p.rows)
        r += p.rows
        alone = matmul(p, rhs)
        if not all(_same_bits(x, y) for x, y in zip(sl.values, alone.values)):
            raise IsolationError(f"slice {k} differs from its per-task product")
        slices.append(sl)
    return slices


def batched_forward(batches: Sequence[DenseMatrix], weight: DenseMatrix
                    ) -> tuple[DenseMatrix, list[DenseMatrix]]:
    """[B1; B2; ...] @ W and its per-task row slices."""
    if any(b.cols != weight.rows for b in batches):
        raise ShapeError("every batch needs as many columns as the weight has rows")
    stacked = matmul(vstack(batches), weight)
    return stacked, _split_and_check(stacked, batches, weight)


def batched_backward(out_grads: Sequence[DenseMatrix], weight: DenseMatrix) -> list[DenseMatrix]:
    """Per-task input gradients from [G1; G2; ...] @ W^T."""
    if any(g.cols != weight.cols for g in out_grads):
        raise ShapeError("every output gradient needs as many columns as the weight")
    wt = weight.transpose()
    stacked = matmul(vstack(out_grads), wt)
    return _split_and_check(stacked, out_grads, wt)
