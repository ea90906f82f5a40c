"""Shared geometric and semantic vocabulary: SE(2) poses, LiDAR points, and
the road-marking taxonomy with its three registration constraint categories.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    return np.pi - (np.pi - np.asarray(a)) % TWO_PI


@dataclass(frozen=True)
class Pose2:
    """SE(2) pose (x, y, yaw); yaw normalized to (-pi, pi]."""

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", float(wrap_angle(self.yaw)))

    @property
    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s], [s, c]])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def compose(self, other: "Pose2") -> "Pose2":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2(-(c * self.x + s * self.y), -(-s * self.x + c * self.y), -self.yaw)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply the rigid transform to an (N, 2) array (or a single point)."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def delta_to(self, other: "Pose2") -> "Pose2":
        """Relative pose taking self to other (self^-1 o other)."""
        return self.inverse().compose(other)


def compose(a: Pose2, b: Pose2) -> Pose2:
    return a.compose(b)


def transform_point(t: Pose2, p) -> np.ndarray:
    return t.transform(p)


class MarkingLabel(enum.Enum):
    """The nine supported road-marking types."""

    DASHED_LANE = "dashed_lane"
    SOLID_LANE = "solid_lane"
    STOP_LINE = "stop_line"
    TEXT = "text"
    ARROW = "arrow"
    DIAMOND_SIGN = "diamond_sign"
    TRIANGLE_SIGN = "triangle_sign"
    CURB = "curb"
    CROSSWALK = "crosswalk"


class ConstraintCategory(enum.Enum):
    """Registration constraint category; epsilon weights the along-direction."""

    LINES = "lines"
    LINE_SEGMENTS = "line_segments"
    OTHERS = "others"

    @property
    def epsilon(self) -> float:
        return _EPSILON[self]


_EPSILON = {
    ConstraintCategory.LINES: 1e-6,
    ConstraintCategory.LINE_SEGMENTS: 1e-1,
    ConstraintCategory.OTHERS: 1.0,
}

_CATEGORY = {
    MarkingLabel.SOLID_LANE: ConstraintCategory.LINES,
    MarkingLabel.CURB: ConstraintCategory.LINES,
    MarkingLabel.DASHED_LANE: ConstraintCategory.LINE_SEGMENTS,
    MarkingLabel.CROSSWALK: ConstraintCategory.LINE_SEGMENTS,
    MarkingLabel.STOP_LINE: ConstraintCategory.LINE_SEGMENTS,
    MarkingLabel.TEXT: ConstraintCategory.OTHERS,
    MarkingLabel.ARROW: ConstraintCategory.OTHERS,
    MarkingLabel.DIAMOND_SIGN: ConstraintCategory.OTHERS,
    MarkingLabel.TRIANGLE_SIGN: ConstraintCategory.OTHERS,
}


def category_of(label: MarkingLabel) -> ConstraintCategory:
    """Total mapping from marking label to constraint category."""
    return _CATEGORY[label]


@dataclass(frozen=True)
class LidarPoint:
    """A single LiDAR return: position, reflectance intensity, origin frame."""

    x: float
    y: float
    z: float
    intensity: float
    frame_index: int = 0

    def __post_init__(self):
        if not (0.0 <= self.intensity <= 255.0):
            raise ValueError(f"intensity {self.intensity} outside [0, 255]")
        if self.frame_index < 0:
            raise ValueError("frame_index must be >= 0")
        if not all(map(math.isfinite, (self.x, self.y, self.z))):
            raise ValueError("coordinates must be finite")


@dataclass
class PointCloud:
    """Column-oriented batch of LiDAR points.

    The per-point view is :class:`LidarPoint`; bulk pipeline stages operate on
    the parallel arrays. ``source_id`` tracks the generating map element where
    known (-1 otherwise) so the simulator's ground truth can follow points
    through the pipeline.
    """

    xy: np.ndarray  # (N, 2) float64
    z: np.ndarray  # (N,)
    intensity: np.ndarray  # (N,) in [0, 255]
    frame_index: np.ndarray  # (N,) int64
    source_id: np.ndarray = field(default=None)  # (N,) int64, -1 = none

    def __post_init__(self):
        self.xy = np.atleast_2d(np.asarray(self.xy, dtype=np.float64))
        n = len(self.xy)
        self.z = np.asarray(self.z, dtype=np.float64).reshape(n)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(n)
        if np.isscalar(self.frame_index):
            self.frame_index = np.full(n, self.frame_index, dtype=np.int64)
        self.frame_index = np.asarray(self.frame_index, dtype=np.int64).reshape(n)
        if self.source_id is None:
            self.source_id = np.full(n, -1, dtype=np.int64)
        self.source_id = np.asarray(self.source_id, dtype=np.int64).reshape(n)

    def __len__(self) -> int:
        return len(self.xy)

    def __getitem__(self, i: int) -> LidarPoint:
        return LidarPoint(
            float(self.xy[i, 0]),
            float(self.xy[i, 1]),
            float(self.z[i]),
            float(self.intensity[i]),
            int(self.frame_index[i]),
        )

    def select(self, mask_or_idx) -> "PointCloud":
        return PointCloud(
            self.xy[mask_or_idx],
            self.z[mask_or_idx],
            self.intensity[mask_or_idx],
            self.frame_index[mask_or_idx],
            self.source_id[mask_or_idx],
        )

    @classmethod
    def from_points(cls, points, frame_index: int | None = None) -> "PointCloud":
        pts = list(points)
        if not pts:
            return cls.empty()
        return cls(
            np.array([[p.x, p.y] for p in pts]),
            np.array([p.z for p in pts]),
            np.array([p.intensity for p in pts]),
            np.array(
                [p.frame_index if frame_index is None else frame_index for p in pts]
            ),
        )

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(
            np.empty((0, 2)), np.empty(0), np.empty(0), np.empty(0, dtype=np.int64)
        )
