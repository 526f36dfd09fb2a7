"""Scalar measurements: IoU metrics, per-step rewards, entropy, returns.

Everything here is a pure function of numpy arrays and floats. The reward
terms follow the increment-of-IoU form: each step is scored by how much the
latest prediction improved over the previous one, so per-episode sums
telescope to final-minus-initial quality.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .camera import Projector, ViewPose

DEFAULT_TAU = 0.4
# weights from the view-planning experiments
DEFAULT_LAMBDA_V = 10.0
DEFAULT_LAMBDA_P = 10.0
DEFAULT_LAMBDA_M = 0.04


@dataclass(frozen=True)
class RewardWeights:
    lambda_v: float = DEFAULT_LAMBDA_V
    lambda_p: float = DEFAULT_LAMBDA_P
    lambda_m: float = DEFAULT_LAMBDA_M
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if min(self.lambda_v, self.lambda_p, self.lambda_m) < 0:
            raise ValueError("reward weights must be non-negative")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"binarization threshold must be in (0, 1), got {self.tau}")


@dataclass(frozen=True)
class RewardBreakdown:
    r_cons: float
    r_proj: float
    c_move: float
    combined: float


def combine_rewards(r_cons: float, r_proj: float, c_move: float,
                    weights: RewardWeights, flip_movement_sign: bool = False) -> RewardBreakdown:
    """Weighted combination of the three terms.

    The movement cost is subtracted as written in the source formulation;
    ``flip_movement_sign`` adds it instead (penalizing nearby revisits),
    since the prose and the formula disagree about the intent.
    """
    move = -weights.lambda_m * c_move
    if flip_movement_sign:
        move = -move
    combined = weights.lambda_v * r_cons + weights.lambda_p * r_proj + move
    return RewardBreakdown(r_cons, r_proj, c_move, combined)


def _binarize(a: np.ndarray, tau: float) -> np.ndarray:
    return np.asarray(a) >= tau


def _iou(a: np.ndarray, b: np.ndarray, tau: float) -> float:
    if a.shape != b.shape:
        raise ValueError(f"IoU operands differ in shape: {a.shape} vs {b.shape}")
    am, bm = _binarize(a, tau), _binarize(b, tau)
    union = np.logical_or(am, bm).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(am, bm).sum() / union)


def voxel_iou(a: np.ndarray, b: np.ndarray, tau: float = DEFAULT_TAU) -> float:
    """Intersection-over-union of two volumes binarized at tau (empty/empty -> 1)."""
    return _iou(np.asarray(a), np.asarray(b), tau)


def pixel_iou(a: np.ndarray, b: np.ndarray, tau: float = DEFAULT_TAU) -> float:
    """Intersection-over-union of two silhouettes binarized at tau."""
    return _iou(np.asarray(a), np.asarray(b), tau)


def reward_cons(v_t: np.ndarray, v_prev: np.ndarray, truth: np.ndarray,
                tau: float = DEFAULT_TAU) -> float:
    """Reconstruction reward: increment of voxel IoU against the ground truth."""
    return voxel_iou(v_t, truth, tau) - voxel_iou(v_prev, truth, tau)


def reward_proj(v_t: np.ndarray, v_prev: np.ndarray, truth: np.ndarray,
                azimuths: Sequence[float], projector: Projector,
                tau: float = DEFAULT_TAU,
                truth_silhouettes: Sequence[np.ndarray] | None = None) -> float:
    """Projection reward: mean increment of pixel IoU over the sampled views.

    All silhouettes come from the differentiable projector (evaluated without
    gradients); ``truth_silhouettes`` may carry precomputed projections of the
    ground truth to avoid recomputation inside episodes.
    """
    if len(azimuths) < 1:
        raise ValueError("at least one projection view is required")
    if truth_silhouettes is None:
        truth_silhouettes = [projector.silhouette(truth, az) for az in azimuths]
    total = 0.0
    for az, m in zip(azimuths, truth_silhouettes):
        s_t = projector.silhouette(v_t, az)
        s_p = projector.silhouette(v_prev, az)
        total += pixel_iou(s_t, m, tau) - pixel_iou(s_p, m, tau)
    return total / len(azimuths)


def circular_distance(a_deg: float, b_deg: float) -> float:
    d = abs(a_deg - b_deg) % 360.0
    return min(d, 360.0 - d)


def movement_cost(current: ViewPose, visited: Sequence[ViewPose]) -> float:
    """Minimum circle distance to any past view, normalized by 180 degrees.

    The first view of an episode has no past views and costs 0.
    """
    if not visited:
        return 0.0
    best = min(circular_distance(current.azimuth, v.azimuth) for v in visited)
    return best / 180.0


def shannon_entropy(volume: np.ndarray) -> float:
    """Total binary entropy of the occupancy probabilities, in bits."""
    p = np.asarray(volume, dtype=np.float64)
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValueError(
            f"occupancy probabilities must lie in [0, 1], got range "
            f"[{p.min()}, {p.max()}]"
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -p * np.log2(p) - (1.0 - p) * np.log2(1.0 - p)
    return float(np.nansum(h))


def shannon_entropy_per_voxel(volume: np.ndarray) -> float:
    return shannon_entropy(volume) / np.asarray(volume).size


def returns(rewards: Sequence[float]) -> list[float]:
    """Undiscounted return-to-go R_t = sum of rewards from step t onward."""
    if len(rewards) == 0:
        raise ValueError("cannot compute returns of an empty episode")
    out = np.cumsum(np.asarray(rewards, dtype=np.float64)[::-1])[::-1]
    return [float(r) for r in out]
