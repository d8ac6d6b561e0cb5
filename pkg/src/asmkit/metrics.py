"""Landmark and pose evaluation: normalized error, failure rate, CED, AUC, MAE.

The per-sample landmark error is the mean point-to-point Euclidean distance
divided by the ground truth's inter-ocular distance (outer eye corner to
outer eye corner), so it is invariant to joint scaling and translation.
Aggregates follow the standard conventions: failure rate counts samples
strictly above a threshold, the CED is the empirical CDF of the per-sample
errors, and the AUC integrates that step function exactly over [0, upper].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._textio import fmt
from .errors import (
    BatchMismatch,
    DegenerateNormalizer,
    EmptyInput,
    InvalidConfig,
    ShapeMismatch,
)
from .losses import PoseTriple, _pose_batch


def default_eye_indices(n_points: int) -> tuple[int, int]:
    """Outer-eye-corner indices for the common annotation layouts.

    68-point layouts use (36, 45) and 98-point layouts use (60, 72); the
    same rule covers the synthetic templates, which place their eye rings
    at those indices. Smaller layouts fall back to the diameter pair
    (0, n // 2).
    """
    if n_points >= 76:
        return 60, 72
    if n_points >= 48:
        return 36, 45
    return 0, max(1, n_points // 2)


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation settings: normalizer point indices and thresholds."""

    left_eye_index: int
    right_eye_index: int
    failure_threshold: float = 0.1
    auc_upper: float = 0.1

    def __post_init__(self):
        if self.left_eye_index < 0 or self.right_eye_index < 0:
            raise InvalidConfig("eye indices must be non-negative")
        if self.left_eye_index == self.right_eye_index:
            raise InvalidConfig("eye indices must be distinct")
        if self.failure_threshold <= 0 or self.auc_upper <= 0:
            raise InvalidConfig("thresholds must be positive")

    @classmethod
    def for_layout(cls, n_points: int, **kwargs) -> "EvalConfig":
        left, right = default_eye_indices(n_points)
        return cls(left_eye_index=left, right_eye_index=right, **kwargs)


@dataclass(frozen=True)
class EvalReport:
    """Aggregated evaluation results over one sample collection."""

    nmes: tuple[float, ...]
    mean_nme_percent: float
    failure_rate_percent: float
    auc: float
    ced: tuple[tuple[float, float], ...]
    pose_mae: PoseTriple
    n_excluded: int


def _points(shape_or_points) -> np.ndarray:
    pts = getattr(shape_or_points, "points", shape_or_points)
    arr = np.asarray(pts, dtype=float)
    if arr.ndim == 1 and arr.size % 2 == 0:
        arr = arr.reshape(-1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ShapeMismatch(f"expected (n, 2) points, got {arr.shape}")
    return arr


def nme(gt, pred, config: EvalConfig) -> float:
    """Inter-ocular-normalized mean point error (dimensionless).

    Accepts Shape objects or (n, 2) / flattened point arrays. Multiply by
    100 to report percent.
    """
    g = _points(gt)
    p = _points(pred)
    if g.shape != p.shape:
        raise ShapeMismatch(f"point sets disagree: {g.shape} vs {p.shape}")
    n = g.shape[0]
    if config.left_eye_index >= n or config.right_eye_index >= n:
        raise InvalidConfig(
            f"eye indices ({config.left_eye_index}, {config.right_eye_index}) "
            f"out of range for {n} points")
    normalizer = float(np.linalg.norm(g[config.left_eye_index]
                                      - g[config.right_eye_index]))
    if normalizer == 0.0:
        raise DegenerateNormalizer("outer eye corners coincide")
    return float(np.linalg.norm(g - p, axis=1).mean() / normalizer)


def failure_rate(nmes, threshold: float = 0.1) -> float:
    """Percentage of samples with error strictly above the threshold."""
    arr = np.asarray(list(nmes), dtype=float)
    if arr.size == 0:
        raise EmptyInput("failure_rate needs at least one sample")
    return float(100.0 * np.count_nonzero(arr > threshold) / arr.size)


def ced(nmes) -> list[tuple[float, float]]:
    """Empirical CDF of the per-sample errors.

    Returns (error, cumulative fraction) pairs for each distinct error in
    ascending order.
    """
    arr = np.asarray(list(nmes), dtype=float)
    if arr.size == 0:
        raise EmptyInput("ced needs at least one sample")
    values, counts = np.unique(arr, return_counts=True)
    fractions = np.cumsum(counts) / arr.size
    return list(zip(values.tolist(), fractions.tolist()))


def auc(nmes, upper: float = 0.1) -> float:
    """Exact area under the empirical CDF over [0, upper], divided by upper.

    The CDF is piecewise constant, so the integral is a finite sum of
    rectangle areas; no sampled approximation is involved.
    """
    if upper <= 0:
        raise ValueError(f"upper must be positive, got {upper}")
    pairs = ced(nmes)
    area = 0.0
    prev_edge = 0.0
    prev_fraction = 0.0
    for value, fraction in pairs:
        if value >= upper:
            break
        if value > prev_edge:
            area += prev_fraction * (value - prev_edge)
        prev_edge = max(value, 0.0)
        prev_fraction = fraction
    if upper > prev_edge:
        area += prev_fraction * (upper - prev_edge)
    return area / upper


def pose_mae(gt, pred) -> PoseTriple:
    """Per-angle mean absolute pose error in degrees."""
    g = _pose_batch(gt, "gt")
    p = _pose_batch(pred, "pred")
    if g.shape != p.shape:
        raise BatchMismatch(f"pose batches disagree: {g.shape} vs {p.shape}")
    mae = np.abs(p - g).mean(axis=0)
    return PoseTriple(float(mae[0]), float(mae[1]), float(mae[2]))


def evaluate(gt_shapes, pred_shapes, gt_poses, pred_poses,
             config: EvalConfig) -> EvalReport:
    """Evaluate a prediction set and aggregate every metric into a report.

    Samples whose ground-truth eye corners coincide cannot be normalized;
    they are excluded from the error aggregates and counted in
    `n_excluded` instead of being averaged away.
    """
    gt_shapes = list(gt_shapes)
    pred_shapes = list(pred_shapes)
    if len(gt_shapes) != len(pred_shapes):
        raise BatchMismatch(
            f"{len(gt_shapes)} ground-truth vs {len(pred_shapes)} predicted shapes")
    errors = []
    excluded = 0
    for g, p in zip(gt_shapes, pred_shapes):
        try:
            errors.append(nme(g, p, config))
        except DegenerateNormalizer:
            excluded += 1
    if not errors:
        raise EmptyInput("no sample had a usable normalizer")
    return EvalReport(
        nmes=tuple(errors),
        mean_nme_percent=float(100.0 * np.mean(errors)),
        failure_rate_percent=failure_rate(errors, config.failure_threshold),
        auc=auc(errors, config.auc_upper),
        ced=tuple(ced(errors)),
        pose_mae=pose_mae(gt_poses, pred_poses),
        n_excluded=excluded,
    )


def ced_to_csv(ced_pairs, comments=()) -> str:
    """Render CED pairs as `error,fraction` CSV rows in ascending order."""
    lines = [f"# {c}" for c in comments]
    lines.append("error,fraction")
    lines.extend(f"{fmt(e)},{fmt(f)}" for e, f in ced_pairs)
    return "\n".join(lines) + "\n"


def report_to_csv(report: EvalReport, comments=()) -> str:
    """Render an evaluation report as a one-row CSV with a header."""
    lines = [f"# {c}" for c in comments]
    lines.append("samples,excluded,mean_nme_percent,failure_rate_percent,auc,"
                 "mae_yaw,mae_pitch,mae_roll")
    mae = report.pose_mae
    lines.append(",".join([
        str(len(report.nmes)),
        str(report.n_excluded),
        fmt(report.mean_nme_percent),
        fmt(report.failure_rate_percent),
        fmt(report.auc),
        fmt(mae.yaw),
        fmt(mae.pitch),
        fmt(mae.roll),
    ]))
    return "\n".join(lines) + "\n"
