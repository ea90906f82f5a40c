"""Spatio-temporal probabilistic local map.

High-reflectance points from successive scans are accumulated in the odometry
frame. Each frame, every stored point survives a Bernoulli trial with
probability 1 / (1 + (age / eta)^2), so old points fade out and the map size
stays bounded while staying dense near the vehicle's recent path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .core import Pose2, PointCloud


class InvalidEta(Exception):
    pass


class NonMonotonicFrame(Exception):
    pass


def retention_probability(k: int, k_i, eta: float):
    """Survival probability of a point from frame k_i at current frame k."""
    if eta <= 0:
        raise InvalidEta(f"eta must be positive, got {eta}")
    age = np.abs(np.asarray(k, dtype=float) - np.asarray(k_i, dtype=float))
    return 1.0 / (1.0 + (age / eta) ** 2)


@dataclass(frozen=True)
class LocalMapConfig:
    eta: float = 50.0
    rng_seed: int = 0
    # "per_frame": survival re-drawn every update (default).
    # "lifetime": one uniform per point; it survives while u < p(age).
    retention_mode: str = "per_frame"

    def __post_init__(self):
        if self.eta <= 0:
            raise InvalidEta(f"eta must be positive, got {self.eta}")
        if self.retention_mode not in ("per_frame", "lifetime"):
            raise ValueError(f"unknown retention_mode {self.retention_mode!r}")


@dataclass
class MapSnapshot:
    """Immutable view of the map contents for rasterization/labeling."""

    xy: np.ndarray
    z: np.ndarray
    intensity: np.ndarray
    frame_index: np.ndarray
    source_id: np.ndarray
    current_frame: int

    def __len__(self):
        return len(self.xy)


class LocalMap:
    """Single-writer aggregation of segmented points in the odometry frame."""

    def __init__(self, config: LocalMapConfig = LocalMapConfig()):
        self.config = config
        self.current_frame = -1
        self._next_id = 0
        empty = PointCloud.empty()
        self.xy = empty.xy
        self.z = empty.z
        self.intensity = empty.intensity
        self.frame_index = empty.frame_index
        self.source_id = empty.source_id
        self.insertion_id = np.empty(0, dtype=np.uint64)

    def __len__(self):
        return len(self.xy)

    def update(self, new_points: PointCloud, odom_pose: Pose2, k: int) -> "LocalMap":
        """Insert a frame's segmented points and run the survival trials.

        new_points are in the vehicle frame and are mapped into the odometry
        frame via odom_pose. Survival draws are keyed by (seed, k, insertion
        id), so replays are bit-identical regardless of iteration order.
        """
        if k <= self.current_frame:
            raise NonMonotonicFrame(f"frame {k} <= current {self.current_frame}")
        n_new = len(new_points)
        ids_new = np.arange(self._next_id, self._next_id + n_new, dtype=np.uint64)
        self._next_id += n_new

        self.xy = np.concatenate([self.xy, odom_pose.transform(new_points.xy)])
        self.z = np.concatenate([self.z, new_points.z])
        self.intensity = np.concatenate([self.intensity, new_points.intensity])
        self.frame_index = np.concatenate(
            [self.frame_index, np.full(n_new, k, dtype=np.int64)]
        )
        self.source_id = np.concatenate([self.source_id, new_points.source_id])
        self.insertion_id = np.concatenate([self.insertion_id, ids_new])
        self.current_frame = k

        p = retention_probability(k, self.frame_index, self.config.eta)
        if self.config.retention_mode == "per_frame":
            u = rng.uniforms(self.config.rng_seed, rng.STREAM_SURVIVAL, k, self.insertion_id)
        else:
            u = rng.uniforms(self.config.rng_seed, rng.STREAM_SURVIVAL, 0, self.insertion_id)
        keep = u < p
        for name in ("xy", "z", "intensity", "frame_index", "source_id", "insertion_id"):
            setattr(self, name, getattr(self, name)[keep])
        return self

    def snapshot(self) -> MapSnapshot:
        return MapSnapshot(
            self.xy.copy(),
            self.z.copy(),
            self.intensity.copy(),
            self.frame_index.copy(),
            self.source_id.copy(),
            self.current_frame,
        )
