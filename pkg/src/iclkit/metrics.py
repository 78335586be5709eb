"""Accuracy matrix bookkeeping and the step-averaged metrics derived from it.

``A[i][t]`` is the accuracy of the model trained through step ``t`` on the
test samples of class group ``i`` (both 1-based in the public API). Only the
lower triangle ``i <= t`` is defined.
"""
from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputContractError

__all__ = [
    "AccuracyMatrix",
    "record",
    "overall_acc",
    "forgetting",
    "acc_new_old",
    "summarize",
    "step_accuracy",
    "step_forgetting",
    "mean_std",
]


class AccuracyMatrix:
    """Lower-triangular accuracy record for a run of ``T`` steps."""

    def __init__(self, total_steps: int):
        if total_steps < 1:
            raise InputContractError("total_steps must be >= 1")
        self.T = int(total_steps)
        self._a = np.full((self.T, self.T), np.nan)

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "AccuracyMatrix":
        """Build from ``rows[t-1] = [A^1_t, ..., A^t_t]`` (one list per step)."""
        m = cls(len(rows))
        for t, row in enumerate(rows, start=1):
            if len(row) != t:
                raise InputContractError(f"step {t} must list {t} group accuracies, got {len(row)}")
            for i, value in enumerate(row, start=1):
                m.set(i, t, value)
        return m

    def set(self, group: int, step: int, value: float) -> None:
        if not 1 <= group <= step <= self.T:
            raise InputContractError(f"A[{group}][{step}] is outside the lower triangle (T={self.T})")
        value = float(value)
        if not 0.0 <= value <= 1.0:
            raise InputContractError(f"accuracy {value} not in [0, 1]")
        self._a[group - 1, step - 1] = value

    def get(self, group: int, step: int) -> float:
        if not 1 <= group <= step <= self.T:
            raise InputContractError(f"A[{group}][{step}] is outside the lower triangle (T={self.T})")
        return float(self._a[group - 1, step - 1])

    def filled_through(self) -> int:
        """Largest ``t`` such that every column up to ``t`` is complete."""
        for t in range(1, self.T + 1):
            if np.isnan(self._a[:t, t - 1]).any():
                return t - 1
        return self.T

    def is_complete(self) -> bool:
        return self.filled_through() == self.T

    def require_complete(self) -> None:
        done = self.filled_through()
        if done != self.T:
            raise InputContractError(f"accuracy matrix complete only through step {done} of {self.T}")

    def as_array(self) -> np.ndarray:
        """Copy of the ``T x T`` array, rows = groups, columns = steps, NaN above."""
        return self._a.copy()

    def __eq__(self, other) -> bool:
        if not isinstance(other, AccuracyMatrix):
            return NotImplemented
        return self.T == other.T and np.array_equal(self._a, other._a, equal_nan=True)

    def __repr__(self) -> str:
        return f"AccuracyMatrix(T={self.T}, filled_through={self.filled_through()})"

    # delimited-text persistence: rows are groups i, columns are steps t,
    # the upper triangle (t < i) is left empty.
    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["group"] + [f"t{t}" for t in range(1, self.T + 1)])
        for i in range(1, self.T + 1):
            cells = []
            for t in range(1, self.T + 1):
                v = self._a[i - 1, t - 1]
                cells.append("" if t < i or math.isnan(v) else repr(float(v)))
            writer.writerow([i] + cells)
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path: str | Path) -> "AccuracyMatrix":
        return cls.parse_csv(Path(path).read_text())

    @classmethod
    def parse_csv(cls, text: str) -> "AccuracyMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        m = cls(len(header) - 1)
        for row in body:
            i = int(row[0])
            for t, cell in enumerate(row[1:], start=1):
                if cell != "":
                    m.set(i, t, float(cell))
        return m


def record(matrix: AccuracyMatrix, model, test_sets: Sequence, step: int | None = None) -> AccuracyMatrix:
    """Fill column ``step`` of ``matrix`` by evaluating ``model`` on each seen group.

    ``test_sets[i-1]`` is an ``(x, y)`` pair holding the test samples of class
    group ``i``. ``model.predict`` must return labels drawn from the classes it
    has seen, so predictions never reach unseen classes.
    """
    t = step if step is not None else model.step_index
    if len(test_sets) < t:
        raise InputContractError(f"need test sets for groups 1..{t}, got {len(test_sets)}")
    for i in range(1, t + 1):
        x, y = test_sets[i - 1]
        y = np.asarray(y)
        if len(y) == 0:
            raise InputContractError(f"test set for group {i} is empty")
        pred = np.asarray(model.predict(x))
        matrix.set(i, t, float(np.mean(pred == y)))
    return matrix


def step_accuracy(matrix: AccuracyMatrix) -> list[float]:
    """Average accuracy over the groups seen so far, one value per filled step."""
    a = matrix._a
    return [float(a[:t, t - 1].mean()) for t in range(1, matrix.filled_through() + 1)]


def step_forgetting(matrix: AccuracyMatrix) -> list[float]:
    """Per-step forgetting term; the first step has no older group and is 0.

    Each later term averages, over older groups, the peak-minus-current drop.
    Negative values mean older groups got better.
    """
    a = matrix._a
    terms = [0.0]
    for t in range(2, matrix.filled_through() + 1):
        drops = [np.max(a[i - 1, i - 1 : t - 1] - a[i - 1, t - 1]) for i in range(1, t)]
        terms.append(float(np.mean(drops)))
    return terms[: matrix.filled_through()]


def overall_acc(matrix: AccuracyMatrix) -> float:
    matrix.require_complete()
    return float(np.mean(step_accuracy(matrix)))


def forgetting(matrix: AccuracyMatrix) -> float:
    """Mean of :func:`step_forgetting` over all steps."""
    matrix.require_complete()
    return float(np.mean(step_forgetting(matrix)))


def acc_new_old(matrix: AccuracyMatrix) -> tuple[float, float]:
    """Return ``(Acc_new, Acc_old)``: mean diagonal and mean first-group row."""
    matrix.require_complete()
    a = matrix._a
    return float(np.mean(np.diag(a))), float(np.mean(a[0, :]))


def summarize(matrix: AccuracyMatrix) -> dict[str, float]:
    acc_new, acc_old = acc_new_old(matrix)
    return {
        "acc": overall_acc(matrix),
        "fgt": forgetting(matrix),
        "acc_new": acc_new,
        "acc_old": acc_old,
    }


def mean_std(values: Iterable[float]) -> tuple[float, float]:
    """Sample mean and population std, as reported in ``mean±std`` tables."""
    arr = np.asarray(list(values), dtype=float)
    return float(arr.mean()), float(arr.std())
