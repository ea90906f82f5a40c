"""HD-map data model, on-disk format, and label-gated nearest-neighbor search.

A map is a list of elements {id, label, main direction, sampled points}. The
file format is a single JSON document (human-readable, versioned); queries go
through one KD-tree per label over the pooled element points.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .core import ConstraintCategory, MarkingLabel, Pose2, category_of
from .fileio import atomic_write_text

FORMAT_NAME = "markloc-hdmap"
FORMAT_VERSION = 1
_DIRECTION_TOL_DEG = 1.0


class ParseError(Exception):
    pass


class ValidationError(Exception):
    pass


@dataclass
class MapElement:
    element_id: int
    label: MarkingLabel
    direction: np.ndarray  # unit 2-vector (dominant axis for linear types)
    points: np.ndarray  # (n, 2), densely sampled along the element

    @property
    def category(self) -> ConstraintCategory:
        return category_of(self.label)


def principal_axis(points: np.ndarray) -> np.ndarray:
    """Unit eigenvector of the largest eigenvalue of the point covariance."""
    pts = np.asarray(points, dtype=float)
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered
    w, v = np.linalg.eigh(cov)
    axis = v[:, int(np.argmax(w))]
    # canonical sign so tests compare axes, not arrows
    if axis[0] < 0 or (axis[0] == 0 and axis[1] < 0):
        axis = -axis
    return axis


def _axis_angle_deg(u: np.ndarray, v: np.ndarray) -> float:
    """Angle between two axes (sign-insensitive), in degrees."""
    dot = abs(float(np.dot(u, v)))
    return math.degrees(math.acos(min(1.0, dot)))


@dataclass
class HDMap:
    elements: list[MapElement]
    _trees: dict[MarkingLabel, tuple[cKDTree, np.ndarray, np.ndarray]] = field(
        default=None, repr=False
    )

    def __post_init__(self):
        if self._trees is None:
            self._build_index()

    def _build_index(self):
        self._trees = {}
        by_label: dict[MarkingLabel, list[MapElement]] = {}
        for el in self.elements:
            by_label.setdefault(el.label, []).append(el)
        for label, els in by_label.items():
            pts = np.concatenate([el.points for el in els])
            eids = np.concatenate(
                [np.full(len(el.points), el.element_id, dtype=np.int64) for el in els]
            )
            self._trees[label] = (cKDTree(pts), pts, eids)

    def labels(self):
        return set(self._trees)

    def element_by_id(self, element_id: int) -> MapElement:
        for el in self.elements:
            if el.element_id == element_id:
                return el
        raise KeyError(element_id)

    def nearest(self, label: MarkingLabel, query_xy: np.ndarray):
        """Nearest same-label map point for each query; (dist, point, element id)."""
        if label not in self._trees:
            n = len(query_xy)
            return np.full(n, np.inf), np.zeros((n, 2)), np.full(n, -1, dtype=np.int64)
        tree, pts, eids = self._trees[label]
        dist, idx = tree.query(query_xy)
        return dist, pts[idx], eids[idx]


@dataclass
class Correspondence:
    q_li: np.ndarray  # point in the local/sensor frame
    q_mi: np.ndarray  # matched map point
    element_id: int
    point_index: int  # index into the query array
    distance: float
    label: MarkingLabel


@dataclass
class Association:
    """Array-backed batch of correspondences from one association pass."""

    point_index: np.ndarray  # (n,) indices into the query points
    q_li: np.ndarray  # (n, 2) local-frame points
    q_mi: np.ndarray  # (n, 2) matched map points
    element_id: np.ndarray  # (n,)
    distance: np.ndarray  # (n,)
    label_code: np.ndarray  # (n,) indices into list(MarkingLabel)

    def __len__(self):
        return len(self.point_index)

    def __iter__(self):
        labels = list(MarkingLabel)
        for i in range(len(self)):
            yield Correspondence(
                self.q_li[i],
                self.q_mi[i],
                int(self.element_id[i]),
                int(self.point_index[i]),
                float(self.distance[i]),
                labels[int(self.label_code[i])],
            )


def associate(
    points_xy: np.ndarray,
    labels: np.ndarray,
    pose: Pose2,
    hd_map: HDMap,
    max_dist: float = 2.0,
) -> Association:
    """Label-gated nearest-neighbor association of posed points to the map.

    Each point is transformed by pose and paired with the nearest map point of
    the same label; pairs farther than max_dist are dropped.
    """
    if max_dist <= 0:
        raise ValueError("max_dist must be positive")
    points_xy = np.asarray(points_xy, dtype=float)
    labels = np.asarray(labels)
    world = pose.transform(points_xy) if len(points_xy) else points_xy
    all_labels = list(MarkingLabel)
    parts = []
    for code, label in enumerate(all_labels):
        mask = labels == code
        if not mask.any():
            continue
        idx = np.flatnonzero(mask)
        dist, q_m, eid = hd_map.nearest(label, world[idx])
        ok = dist <= max_dist
        if not ok.any():
            continue
        parts.append(
            (idx[ok], points_xy[idx[ok]], q_m[ok], eid[ok], dist[ok],
             np.full(int(ok.sum()), code, dtype=np.int64))
        )
    if not parts:
        z = np.empty(0, dtype=np.int64)
        return Association(z, np.empty((0, 2)), np.empty((0, 2)), z, np.empty(0), z)
    cols = [np.concatenate(c) for c in zip(*parts)]
    order = np.argsort(cols[0], kind="stable")
    return Association(*(c[order] for c in cols))


def label_codes(labels) -> np.ndarray:
    """Map MarkingLabel values to integer codes used by Association."""
    all_labels = list(MarkingLabel)
    return np.array([all_labels.index(l) for l in labels], dtype=np.int64)


# ---------------------------------------------------------------------------
# file format


def element_to_dict(el: MapElement) -> dict:
    return {
        "id": int(el.element_id),
        "label": el.label.value,
        "direction": [float(el.direction[0]), float(el.direction[1])],
        "points": [[float(x), float(y)] for x, y in el.points],
    }


def save_map(hd_map: HDMap, path) -> None:
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "elements": [element_to_dict(el) for el in hd_map.elements],
    }
    atomic_write_text(Path(path), json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_map(path) -> HDMap:
    """Parse and validate a map document.

    Renormalizes slightly-off directions, rejects empty elements and zero
    directions, and for linear categories checks the stored direction against
    the dominant PCA axis of the sampled points (within 1 degree).
    """
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: {e}") from e
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise ParseError(f"{path}: not a {FORMAT_NAME} document")
    if "version" not in doc:
        raise ParseError(f"{path}: missing version field")
    if doc["version"] != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported version {doc['version']}")
    labels_by_value = {l.value: l for l in MarkingLabel}
    elements = []
    for i, raw in enumerate(doc.get("elements", [])):
        eid = raw.get("id", i)
        if raw.get("label") not in labels_by_value:
            raise ValidationError(f"element {eid}: unknown label {raw.get('label')!r}")
        label = labels_by_value[raw["label"]]
        points = np.asarray(raw.get("points", []), dtype=float)
        if points.size == 0:
            raise ValidationError(f"element {eid}: empty point set")
        points = points.reshape(-1, 2)
        if not np.isfinite(points).all():
            raise ValidationError(f"element {eid}: non-finite points")
        direction = np.asarray(raw.get("direction", [0.0, 0.0]), dtype=float)
        norm = float(np.linalg.norm(direction))
        if norm < 1e-12:
            raise ValidationError(f"element {eid}: zero-length direction vector")
        direction = direction / norm
        if category_of(label) is not ConstraintCategory.OTHERS and len(points) >= 2:
            axis = principal_axis(points)
            ang = _axis_angle_deg(direction, axis)
            if ang > _DIRECTION_TOL_DEG:
                raise ValidationError(
                    f"element {eid}: direction deviates {ang:.2f} deg from PCA axis"
                )
        elements.append(MapElement(int(eid), label, direction, points))
    return HDMap(elements)
