"""Multi-task training losses with a staged shape-prior weighting.

The landmark term is the mean per-point Euclidean distance between two point
batches. It is evaluated twice: against the annotated ground truth and
against the model-smoothed version of that ground truth. The smoothed term's
weight follows a three-phase schedule (2, then 1, then 0.5 over thirds of
training) so optimization starts on the lower-variation smoothed targets and
gradually shifts to the raw ones. A squared-error pose term joins through
fixed task weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import BatchMismatch, EpochOutOfRange


class PoseTriple(NamedTuple):
    """Head orientation in degrees."""

    yaw: float
    pitch: float
    roll: float


@dataclass(frozen=True)
class LossWeights:
    """Relative importance of the landmark and pose tasks."""

    w_facial: float = 1.0
    w_pose: float = 0.5

    def __post_init__(self):
        if self.w_facial < 0 or self.w_pose < 0:
            raise ValueError("task weights must be non-negative")
        if self.w_facial == 0 and self.w_pose == 0:
            raise ValueError("at least one task weight must be positive")


@dataclass(frozen=True)
class LossReport:
    """Per-batch loss values together with the smoothing weight in force."""

    l_mse: float
    l_asm: float
    l_facial: float
    l_pose: float
    l_total: float
    alpha_used: float

    def __post_init__(self):
        for name in ("l_mse", "l_asm", "l_facial", "l_pose", "l_total"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        expected = self.l_mse + self.alpha_used * self.l_asm
        if abs(self.l_facial - expected) > 1e-12 * max(1.0, abs(expected)):
            raise ValueError("l_facial does not decompose into l_mse + alpha * l_asm")


def _landmark_batch(points, name: str) -> np.ndarray:
    """Coerce (N, 2n) or (N, n, 2) input to an (N, n, 2) float array."""
    arr = np.asarray(points, dtype=float)
    if arr.size == 0:
        raise BatchMismatch(f"{name} batch is empty")
    if arr.ndim == 2 and arr.shape[1] % 2 == 0:
        arr = arr.reshape(arr.shape[0], -1, 2)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise BatchMismatch(f"{name} must be (N, 2n) or (N, n, 2), got {arr.shape}")
    return arr


def _pose_batch(poses, name: str) -> np.ndarray:
    arr = np.asarray(poses, dtype=float)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise BatchMismatch(f"{name} must be (N, 3) yaw/pitch/roll, got {arr.shape}")
    if arr.shape[0] == 0:
        raise BatchMismatch(f"{name} batch is empty")
    return arr


def _paired(a, b, name_a, name_b):
    a_arr = _landmark_batch(a, name_a)
    b_arr = _landmark_batch(b, name_b)
    if a_arr.shape != b_arr.shape:
        raise BatchMismatch(
            f"{name_a} and {name_b} disagree: {a_arr.shape} vs {b_arr.shape}")
    return a_arr, b_arr


def _mean_point_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b, axis=2).mean())


def loss_mse(gt, pred) -> float:
    """Mean per-point Euclidean distance between ground truth and predictions."""
    g, p = _paired(gt, pred, "gt", "pred")
    return _mean_point_distance(g, p)


def loss_asm(asm, pred) -> float:
    """Mean per-point Euclidean distance between smoothed targets and predictions."""
    a, p = _paired(asm, pred, "asm", "pred")
    return _mean_point_distance(a, p)


def alpha_schedule(epoch: int, total_epochs: int) -> float:
    """Three-phase weight for the smoothed-target term.

    Returns 2 for the first third of training, 1 for the middle third and
    0.5 for the final third. Thresholds are compared in exact integer
    arithmetic with lower-bound-inclusive intervals, so every epoch maps to
    exactly one phase.
    """
    if total_epochs < 1:
        raise EpochOutOfRange(f"total_epochs must be >= 1, got {total_epochs}")
    if not 0 <= epoch < total_epochs:
        raise EpochOutOfRange(f"epoch {epoch} outside [0, {total_epochs})")
    if 3 * epoch < total_epochs:
        return 2.0
    if 3 * epoch < 2 * total_epochs:
        return 1.0
    return 0.5


def loss_facial(gt, asm, pred, alpha: float):
    """Combined landmark loss: l_mse + alpha * l_asm.

    Returns (value, (l_mse, l_asm)).
    """
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    mse = loss_mse(gt, pred)
    smoothed = loss_asm(asm, pred)
    return mse + alpha * smoothed, (mse, smoothed)


def loss_pose(gt, pred) -> float:
    """Mean squared pose error, averaged over the three angles per sample."""
    g = _pose_batch(gt, "gt")
    p = _pose_batch(pred, "pred")
    if g.shape != p.shape:
        raise BatchMismatch(f"pose batches disagree: {g.shape} vs {p.shape}")
    return float((((p - g) ** 2).sum(axis=1) / 3.0).mean())


def loss_total(l_facial: float, l_pose: float, weights: LossWeights) -> float:
    """Weighted sum of the two task losses."""
    return weights.w_facial * l_facial + weights.w_pose * l_pose


def loss_report(gt, asm, pred, gt_pose, pred_pose, alpha: float,
                weights: LossWeights) -> LossReport:
    """Evaluate every loss term on one batch and bundle them."""
    facial, (mse, smoothed) = loss_facial(gt, asm, pred, alpha)
    pose = loss_pose(gt_pose, pred_pose)
    return LossReport(l_mse=mse, l_asm=smoothed, l_facial=facial, l_pose=pose,
                      l_total=loss_total(facial, pose, weights), alpha_used=alpha)


def _unit_offsets(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Unit vectors from target toward pred, zero where the two coincide."""
    diff = pred - target
    dist = np.linalg.norm(diff, axis=2, keepdims=True)
    out = np.zeros_like(diff)
    np.divide(diff, dist, out=out, where=dist > 0)
    return out


def loss_gradients(gt, asm, pred, gt_pose, pred_pose, alpha: float,
                   weights: LossWeights):
    """Gradients of the weighted total loss with respect to the predictions.

    Returns (d_landmarks, d_pose) with d_landmarks flattened to (N, 2n).
    Points that coincide exactly with their target contribute a zero
    subgradient (the per-point distance is not differentiable there).
    """
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    g, p = _paired(gt, pred, "gt", "pred")
    a, _ = _paired(asm, pred, "asm", "pred")
    if a.shape != g.shape:
        raise BatchMismatch(f"gt and asm disagree: {g.shape} vs {a.shape}")
    gp = _pose_batch(gt_pose, "gt_pose")
    pp = _pose_batch(pred_pose, "pred_pose")
    if gp.shape != pp.shape:
        raise BatchMismatch(f"pose batches disagree: {gp.shape} vs {pp.shape}")
    if gp.shape[0] != g.shape[0]:
        raise BatchMismatch("landmark and pose batches have different sample counts")

    n_samples, n_points = p.shape[:2]
    scale = weights.w_facial / (n_samples * n_points)
    d_landmarks = scale * (_unit_offsets(p, g) + alpha * _unit_offsets(p, a))
    d_pose = weights.w_pose * (2.0 / (3.0 * n_samples)) * (pp - gp)
    return d_landmarks.reshape(n_samples, -1), d_pose
