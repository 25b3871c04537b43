"""Localization error metrics and engine comparison tables."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .geometry import Point3, _vec
from .io import FrameResult, ValidationError


def frame_error(est, gt) -> float:
    """Euclidean distance between estimate and ground truth, in meters."""
    return float(np.linalg.norm(_vec(est) - _vec(gt)))


@dataclass
class SequenceResult:
    """Per-frame errors of one engine on one sequence.

    ``mean_error`` is what the published tables call "MSE" although it is a
    mean Euclidean distance; ``mse`` is kept as an alias for that reason.
    """

    errors: np.ndarray
    frame_indices: np.ndarray
    engine: str = "gcc-phat"

    def __post_init__(self):
        self.errors = np.asarray(self.errors, dtype=float).reshape(-1)
        self.frame_indices = np.asarray(self.frame_indices, dtype=int).reshape(-1)
        if len(self.errors) != len(self.frame_indices):
            raise ValidationError("one frame index per error is required")
        if np.any(self.errors < 0) or not np.all(np.isfinite(self.errors)):
            raise ValidationError("errors must be finite and nonnegative")

    @classmethod
    def from_rows(cls, rows: Sequence[FrameResult], engine: str) -> "SequenceResult":
        return cls([r.error_m for r in rows], [r.frame_index for r in rows], engine)

    @classmethod
    def from_positions(cls, est, gt, engine: str, frame_indices=None) -> "SequenceResult":
        est = np.asarray([_vec(p) for p in est]).reshape(-1, 3)
        gt = np.asarray([_vec(p) for p in gt]).reshape(-1, 3)
        if est.shape != gt.shape:
            raise ValidationError("estimate and ground-truth counts differ")
        idx = np.arange(len(est)) if frame_indices is None else frame_indices
        return cls(np.linalg.norm(est - gt, axis=1), idx, engine)

    @property
    def frame_count(self) -> int:
        return len(self.errors)

    @property
    def mean_error(self) -> float:
        if self.frame_count == 0:
            return math.nan
        return float(np.mean(self.errors))

    mse = mean_error

    def fraction_within(self, radius: float) -> float:
        return float(np.mean(self.errors <= radius)) if self.frame_count else math.nan


def relative_improvement(baseline: float, method: float) -> float:
    """``(baseline - method) / baseline`` as a fraction; positive means ``method`` is better."""
    if not baseline > 0:
        raise ValueError(f"baseline error must be positive, got {baseline}")
    return (baseline - method) / baseline


@dataclass
class ComparisonRow:
    sequence: str
    frames: int
    mean_a: float
    mean_b: float
    delta_r: float  # improvement of B over A


def compare(results_a: Mapping[str, SequenceResult],
            results_b: Mapping[str, SequenceResult]) -> list[ComparisonRow]:
    """Per-sequence mean errors of two engines and the relative improvement of B over A.

    Both sides must cover the same sequences with identical frame indices.
    A sequence whose baseline error is zero gets a NaN improvement.
    """
    if set(results_a) != set(results_b):
        raise ValidationError(
            f"sequence sets differ: {sorted(set(results_a) ^ set(results_b))}"
        )
    rows = []
    for name in results_a:
        a, b = results_a[name], results_b[name]
        if a.frame_count != b.frame_count or not np.array_equal(
            np.sort(a.frame_indices), np.sort(b.frame_indices)
        ):
            raise ValidationError(f"sequence {name!r}: frame sets of the two engines differ")
        # a perfect baseline leaves the relative improvement undefined
        delta = relative_improvement(a.mean_error, b.mean_error) if a.mean_error > 0 else math.nan
        rows.append(ComparisonRow(name, a.frame_count, a.mean_error, b.mean_error, delta))
    return rows


def format_table(rows: Sequence[ComparisonRow], label_a: str = "SRP-PHAT",
                 label_b: str = "DeepGCC") -> str:
    """Plain-text table, errors in cm and improvement in percent."""
    head = f"{'sequence':<12}{'frames':>8}{label_a + ' cm':>16}{label_b + ' cm':>16}{'dr %':>10}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r.sequence:<12}{r.frames:>8}{100 * r.mean_a:>16.1f}{100 * r.mean_b:>16.1f}"
            f"{100 * r.delta_r:>10.2f}"
        )
    return "\n".join(lines)


def table_json(rows: Sequence[ComparisonRow], label_a: str = "gcc-phat",
               label_b: str = "deepgcc") -> str:
    return json.dumps(
        {
            "engines": [label_a, label_b],
            "rows": [
                {"sequence": r.sequence, "frames": r.frames, "mean_error_a_m": r.mean_a,
                 "mean_error_b_m": r.mean_b,
                 "relative_improvement": None if math.isnan(r.delta_r) else r.delta_r}
                for r in rows
            ],
        },
        indent=2,
        sort_keys=True,
    )


def frame_results(est: Sequence[Point3], gt: Sequence[Point3], times: Sequence[float],
                  frame_indices: Sequence[int] | None = None) -> list[FrameResult]:
    idx = range(len(est)) if frame_indices is None else frame_indices
    return [
        FrameResult(int(i), float(t), Point3.of(e), Point3.of(g), frame_error(e, g))
        for i, t, e, g in zip(idx, times, est, gt)
    ]
