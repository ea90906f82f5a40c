"""Ground extraction and adaptive high-reflectance segmentation.

The intensity threshold is a scalar Kalman filter tracking a segmentation
coefficient: per scan the ground intensities give a measurement
``z = mean + 2 * std`` which the filter fuses under a random-walk state model.
Points at or above the filtered coefficient are kept as marking candidates.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import PointCloud


class DegenerateGround(Exception):
    """Too few ground candidates or a rank-deficient plane fit."""


class EmptyGround(Exception):
    """Signals that a Kalman update was skipped (no ground points)."""


@dataclass(frozen=True)
class GroundFilterConfig:
    sensor_height_m: float = 1.8
    candidate_gate_m: float = 0.30  # |z| gate for plane-fit candidates
    band_halfwidth_m: float = 0.15  # final band around the fitted plane
    max_fit_points: int = 5000

    def __post_init__(self):
        if self.sensor_height_m <= 0:
            raise ValueError("sensor_height_m must be positive")


@dataclass
class GroundScan:
    """Points on the estimated ground plane plus the plane itself."""

    points: PointCloud
    normal: np.ndarray  # unit 3-vector, z component > 0
    offset: float  # plane is {p : normal . p = offset}
    frame_index: int


def extract_ground(scan: PointCloud, config: GroundFilterConfig = GroundFilterConfig()) -> GroundScan:
    """Height-band ground filter around a least-squares plane.

    Candidates are gated by |z| <= candidate_gate_m (scan frame has its origin
    on the ground), a plane z = ax + by + c is fit to them, and the returned
    points are those within band_halfwidth_m of that plane.
    """
    if len(scan) == 0:
        raise DegenerateGround("empty scan")
    cand = np.abs(scan.z) <= config.candidate_gate_m
    idx = np.flatnonzero(cand)
    if len(idx) < 3:
        raise DegenerateGround(f"only {len(idx)} height-gated candidates")
    if len(idx) > config.max_fit_points:
        # deterministic strided subsample for the fit only
        idx_fit = idx[np.linspace(0, len(idx) - 1, config.max_fit_points).astype(int)]
    else:
        idx_fit = idx
    A = np.column_stack([scan.xy[idx_fit], np.ones(len(idx_fit))])
    b = scan.z[idx_fit]
    sol, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    if rank < 3:
        raise DegenerateGround("plane fit is rank-deficient")
    a_, b_, c_ = sol
    normal = np.array([-a_, -b_, 1.0])
    normal /= np.linalg.norm(normal)
    # plane through (0, 0, c_): offset = normal . (0, 0, c_)
    offset = float(normal[2] * c_)
    dist = np.abs(
        scan.xy[:, 0] * normal[0] + scan.xy[:, 1] * normal[1] + scan.z * normal[2] - offset
    )
    keep = dist <= config.band_halfwidth_m
    return GroundScan(scan.select(keep), normal, offset, int(scan.frame_index[0]))


@dataclass(frozen=True)
class ThresholdFilterState:
    """Scalar Kalman filter state for the segmentation coefficient."""

    rho: float
    variance: float
    q: float = 0.1  # process noise
    r: float = 2.0  # measurement noise

    def __post_init__(self):
        if self.variance <= 0 or self.q <= 0 or self.r <= 0:
            raise ValueError("variance, q, r must be positive")


def ground_measurement(ground: GroundScan) -> float:
    """Per-scan measurement z = mean + 2 * std of the ground intensities."""
    vals = ground.points.intensity
    if len(vals) == 0:
        raise EmptyGround("no ground points in scan")
    mu = float(np.mean(vals))
    sigma = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return mu + 2.0 * sigma


def kalman_step(state: ThresholdFilterState, z: float) -> ThresholdFilterState:
    """One scalar predict/update cycle; rho clamped to [0, 255]."""
    var = state.variance + state.q
    gain = var / (var + state.r)
    rho = state.rho + gain * (z - state.rho)
    var = (1.0 - gain) * var
    return replace(state, rho=float(np.clip(rho, 0.0, 255.0)), variance=var)


def kalman_update(
    state: ThresholdFilterState, ground: GroundScan
) -> tuple[ThresholdFilterState, float]:
    """Fuse one ground scan; returns the updated state and the new threshold.

    Raises EmptyGround when the scan holds no ground points (no update is
    performed; the caller keeps its previous state and threshold).
    """
    z = ground_measurement(ground)
    new = kalman_step(state, z)
    return new, new.rho


class AdaptiveThreshold:
    """Stateful wrapper: initializes rho from the first scan's measurement."""

    def __init__(self, q: float = 0.1, r: float = 2.0, initial_variance: float = 0.1):
        self.q = q
        self.r = r
        self.initial_variance = initial_variance
        self.state: ThresholdFilterState | None = None

    def update(self, ground: GroundScan) -> float:
        z = ground_measurement(ground)  # may raise EmptyGround
        if self.state is None:
            self.state = ThresholdFilterState(
                rho=float(np.clip(z, 0.0, 255.0)),
                variance=self.initial_variance,
                q=self.q,
                r=self.r,
            )
        else:
            self.state = kalman_step(self.state, z)
        return self.state.rho

    @property
    def threshold(self) -> float | None:
        return None if self.state is None else self.state.rho


def segment_high_reflectance(ground: GroundScan, threshold: float) -> PointCloud:
    """Points with intensity >= threshold, order preserved."""
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    return ground.points.select(ground.points.intensity >= threshold)


def apply_marking_fraction_guard(
    ground: GroundScan, segmented: PointCloud, min_fraction: float = 0.01
) -> PointCloud:
    """Drop the frame's detections when almost nothing clears the threshold.

    Guards against filter collapse on marking-free roads: if fewer than
    min_fraction of the ground points exceeded the threshold, the frame emits
    zero retained points instead of feeding asphalt tails downstream.
    """
    n = len(ground.points)
    if n == 0 or len(segmented) / n < min_fraction:
        return PointCloud.empty()
    return segmented
