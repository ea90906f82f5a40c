"""Bird's-eye-view rasterization, pluggable instance labelers, and detection
metrics.

The local map is binned into grid cells (one pixel per cell, colored by the
cell's maximum intensity). A labeler turns the raster into labeled instances;
points inside an instance's cells are back-projected to form the semantic
point cloud consumed by registration. Two labelers ship: an oracle that reads
the simulator's point provenance, and a rule-based heuristic over connected
components (no learned network is trained or bundled).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy import ndimage

from .core import MarkingLabel
from .fileio import atomic_write_text
from .localmap import MapSnapshot


class LabelerFailure(Exception):
    pass


class GeometryMismatch(Exception):
    pass


# ---------------------------------------------------------------------------
# colormap: turbo-style polynomial table; the intensity -> index mapping is
# monotone, so higher intensity never maps to a lower color index.

_TURBO_R = [0.13572138, 4.61539260, -42.66032258, 132.13108234, -152.94239396, 59.28637943]
_TURBO_G = [0.09140261, 2.19418839, 4.84296658, -14.18503333, 4.27729857, 2.82956604]
_TURBO_B = [0.10667330, 12.64194608, -60.58204836, 110.36276771, -89.90310912, 27.34824973]


def _turbo_table() -> np.ndarray:
    t = np.linspace(0.0, 1.0, 256)
    chans = []
    for coeffs in (_TURBO_R, _TURBO_G, _TURBO_B):
        acc = np.zeros_like(t)
        for k, c in enumerate(coeffs):
            acc += c * t**k
        chans.append(np.clip(np.round(acc * 255.0), 0, 255).astype(np.uint8))
    return np.stack(chans, axis=1)


COLORMAP = _turbo_table()


def intensity_to_index(intensity) -> np.ndarray:
    """Monotone map from intensity in [0, 255] to a color index in [0, 255]."""
    return np.clip(np.floor(np.asarray(intensity, dtype=float)), 0, 255).astype(np.int64)


# ---------------------------------------------------------------------------
# raster


@dataclass(frozen=True)
class RasterConfig:
    resolution: float = 0.1  # meters per pixel
    extent: float = 60.0  # square window side, centered on the vehicle

    def __post_init__(self):
        if self.resolution <= 0 or self.extent <= 0:
            raise ValueError("resolution and extent must be positive")


@dataclass
class LiBEVRaster:
    """Grid view of a map snapshot; pixel (row, col) covers
    origin + [col, col+1) x [row, row+1) * resolution."""

    origin: np.ndarray  # (2,) map-frame position of pixel (0, 0)'s corner
    resolution: float
    width: int
    height: int
    cell_max: np.ndarray  # (height, width) max intensity, -1 where empty
    point_ids: np.ndarray  # (M,) indices into the source snapshot
    point_cell: np.ndarray  # (M,) flat cell index per in-extent point
    _cell_order: np.ndarray = field(default=None, repr=False)
    _cell_sorted: np.ndarray = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def occupancy(self) -> np.ndarray:
        return self.cell_max >= 0.0

    def _index(self):
        if self._cell_order is None:
            self._cell_order = np.argsort(self.point_cell, kind="stable")
            self._cell_sorted = self.point_cell[self._cell_order]
        return self._cell_order, self._cell_sorted

    def cell_point_ids(self, row: int, col: int) -> np.ndarray:
        return self.points_in_cells(np.array([row * self.width + col]))

    def points_in_cells(self, flat_cells: np.ndarray) -> np.ndarray:
        """Back-projection: snapshot indices of all points in the given cells."""
        order, cells_sorted = self._index()
        lo = np.searchsorted(cells_sorted, flat_cells, side="left")
        hi = np.searchsorted(cells_sorted, flat_cells, side="right")
        if len(lo) == 0:
            return np.empty(0, dtype=np.int64)
        take = np.concatenate([order[a:b] for a, b in zip(lo, hi)])
        return self.point_ids[np.sort(take)]

    def to_rgb(self) -> np.ndarray:
        rgb = np.zeros((self.height, self.width, 3), dtype=np.uint8)
        occ = self.occupancy()
        rgb[occ] = COLORMAP[intensity_to_index(self.cell_max[occ])]
        return rgb

    def save_png(self, path) -> None:
        from PIL import Image

        Image.fromarray(self.to_rgb(), mode="RGB").save(Path(path), format="PNG")

    def export_cell_counts(self, path) -> None:
        """Sidecar text index: one `row col count` line per non-empty cell."""
        counts = np.bincount(self.point_cell, minlength=self.height * self.width)
        lines = ["# row col count"]
        for flat in np.flatnonzero(counts):
            lines.append(f"{flat // self.width} {flat % self.width} {counts[flat]}")
        atomic_write_text(Path(path), "\n".join(lines) + "\n")


def rasterize(
    snapshot: MapSnapshot, center_xy, config: RasterConfig = RasterConfig()
) -> LiBEVRaster:
    """Bin snapshot points into a square raster centered on center_xy."""
    center = np.asarray(center_xy, dtype=float)
    n_cells = int(round(config.extent / config.resolution))
    origin = center - 0.5 * config.extent
    cell_max = np.full((n_cells, n_cells), -1.0)
    if len(snapshot) == 0:
        return LiBEVRaster(
            origin, config.resolution, n_cells, n_cells, cell_max,
            np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64),
        )
    grid = np.floor((snapshot.xy - origin) / config.resolution).astype(np.int64)
    ok = (grid >= 0).all(axis=1) & (grid < n_cells).all(axis=1)
    ids = np.flatnonzero(ok)
    flat = grid[ok, 1] * n_cells + grid[ok, 0]
    np.maximum.at(cell_max.reshape(-1), flat, snapshot.intensity[ids])
    return LiBEVRaster(origin, config.resolution, n_cells, n_cells, cell_max, ids, flat)


# ---------------------------------------------------------------------------
# instances


@dataclass
class MarkingInstance:
    label: MarkingLabel
    mask: np.ndarray  # sorted unique flat cell indices
    raster_shape: tuple[int, int]
    point_ids: np.ndarray  # snapshot indices of back-projected points
    centroid: np.ndarray  # (2,) map-frame mean of the member points
    instance_id: int

    @property
    def n_points(self) -> int:
        return len(self.point_ids)


class Labeler(Protocol):
    def label(self, raster: LiBEVRaster, snapshot: MapSnapshot) -> list[MarkingInstance]:
        ...


def label_instances(
    raster: LiBEVRaster, labeler: Labeler, snapshot: MapSnapshot
) -> list[MarkingInstance]:
    """Run a labeler over the raster; labeler errors propagate as-is."""
    return labeler.label(raster, snapshot)


def _make_instance(raster, snapshot, label, flat_cells, instance_id) -> MarkingInstance:
    mask = np.unique(np.asarray(flat_cells, dtype=np.int64))
    pids = raster.points_in_cells(mask)
    centroid = snapshot.xy[pids].mean(axis=0)
    return MarkingInstance(label, mask, raster.shape, pids, centroid, instance_id)


class OracleLabeler:
    """Reads the simulator's point->element provenance off the snapshot.

    Each generating map element present in the raster becomes one instance
    with its true label. Instances smaller than min_pixels are dropped (same
    support floor the heuristic applies).
    """

    def __init__(self, labels_by_source: dict[int, MarkingLabel], min_pixels: int = 3):
        self.labels_by_source = labels_by_source
        self.min_pixels = min_pixels

    def label(self, raster: LiBEVRaster, snapshot: MapSnapshot) -> list[MarkingInstance]:
        out: list[MarkingInstance] = []
        if len(raster.point_ids) == 0:
            return out
        src = snapshot.source_id[raster.point_ids]
        order = np.argsort(src, kind="stable")
        sorted_src = src[order]
        bounds = np.flatnonzero(np.diff(sorted_src)) + 1
        groups = np.split(order, bounds)
        next_id = 0
        for grp in groups:
            sid = int(src[grp[0]])
            if sid < 0:
                continue
            if sid not in self.labels_by_source:
                raise LabelerFailure(f"no label known for source element {sid}")
            cells = np.unique(raster.point_cell[grp])
            if len(cells) < self.min_pixels:
                continue
            out.append(
                _make_instance(raster, snapshot, self.labels_by_source[sid], cells, next_id)
            )
            next_id += 1
        return out


@dataclass(frozen=True)
class HeuristicConfig:
    intensity_gate: float = 0.0  # occupied = non-empty cell with max >= gate
    min_pixels: int = 3
    lane_width_max_m: float = 0.28
    long_line_min_m: float = 4.5
    long_line_min_elongation: float = 6.0
    curb_intensity_max: float = 150.0
    taper_min_length_m: float = 2.0
    taper_min_width_m: float = 0.5
    taper_ratio: float = 1.8
    bar_width_max_m: float = 0.9
    bar_length_max_m: float = 6.0
    bar_neighbor_dist_m: float = 2.5
    bar_neighbor_angle_deg: float = 15.0
    text_width_min_m: float = 0.9


@dataclass
class _Component:
    cells: np.ndarray  # flat indices
    centroid: np.ndarray  # meters, map frame
    axis: np.ndarray  # unit principal axis
    length: float
    width: float
    mean_intensity: float
    profile: np.ndarray  # width along the principal axis, meters


class HeuristicLabeler:
    """Occupancy threshold -> 8-connected components -> shape-rule labels.

    Rules use component length/width from PCA extents, a width profile along
    the principal axis (to spot arrow heads, diamonds, and triangles), the
    mean cell intensity (curbs reflect less than paint), and the count of
    similar parallel neighbors (a crosswalk is a group of side-by-side bars).
    """

    def __init__(self, config: HeuristicConfig = HeuristicConfig()):
        self.config = config

    def label(self, raster: LiBEVRaster, snapshot: MapSnapshot) -> list[MarkingInstance]:
        comps = self._components(raster)
        labels = [self._classify(c) for c in comps]
        self._crosswalk_pass(comps, labels)
        out = []
        for i, (comp, lab) in enumerate(zip(comps, labels)):
            out.append(_make_instance(raster, snapshot, lab, comp.cells, i))
        return out

    def _components(self, raster: LiBEVRaster) -> list[_Component]:
        cfg = self.config
        occupied = raster.cell_max >= max(0.0, cfg.intensity_gate)
        labeled, n = ndimage.label(occupied, structure=np.ones((3, 3), dtype=int))
        comps = []
        res = raster.resolution
        objects = ndimage.find_objects(labeled)
        for comp_id in range(1, n + 1):
            sl = objects[comp_id - 1]
            rows, cols = np.nonzero(labeled[sl] == comp_id)
            if len(rows) < cfg.min_pixels:
                continue
            rows = rows + sl[0].start
            cols = cols + sl[1].start
            pts = np.column_stack([(cols + 0.5) * res, (rows + 0.5) * res])
            centered = pts - pts.mean(axis=0)
            cov = centered.T @ centered / max(1, len(pts) - 1)
            w, v = np.linalg.eigh(cov)
            axis = v[:, int(np.argmax(w))]
            lproj = centered @ axis
            wproj = centered @ np.array([-axis[1], axis[0]])
            length = float(lproj.max() - lproj.min()) + res
            width = float(wproj.max() - wproj.min()) + res
            n_bins = int(np.clip(round(length / res / 3.0), 4, 12))
            bins = np.clip(
                ((lproj - lproj.min()) / max(length - res, res) * n_bins).astype(int),
                0, n_bins - 1,
            )
            profile = np.zeros(n_bins)
            for b in range(n_bins):
                m = bins == b
                if m.any():
                    profile[b] = wproj[m].max() - wproj[m].min() + res
            profile = profile[profile > 0]
            comps.append(
                _Component(
                    cells=rows * raster.width + cols,
                    centroid=pts.mean(axis=0) + raster.origin,
                    axis=axis,
                    length=length,
                    width=width,
                    mean_intensity=float(raster.cell_max[rows, cols].mean()),
                    profile=profile,
                )
            )
        return comps

    def _classify(self, c: _Component) -> MarkingLabel:
        cfg = self.config
        elongation = c.length / max(c.width, 1e-9)
        if c.length >= cfg.long_line_min_m and elongation >= cfg.long_line_min_elongation:
            if c.mean_intensity < cfg.curb_intensity_max:
                return MarkingLabel.CURB
            return MarkingLabel.SOLID_LANE
        tapered = self._taper_label(c)
        if tapered is not None:
            return tapered
        if c.width <= cfg.lane_width_max_m:
            return MarkingLabel.DASHED_LANE
        if c.width <= cfg.bar_width_max_m and c.length <= cfg.bar_length_max_m:
            return MarkingLabel.STOP_LINE  # promoted to CROSSWALK by the group pass
        return MarkingLabel.TEXT

    def _taper_label(self, c: _Component) -> MarkingLabel | None:
        cfg = self.config
        prof = c.profile
        if (
            len(prof) < 4
            or c.length < cfg.taper_min_length_m
            or prof.max() < cfg.taper_min_width_m
        ):
            return None
        third = max(1, len(prof) // 3)
        w_first = float(prof[:third].mean())
        w_last = float(prof[-third:].mean())
        w_mid = float(prof[third:-third].mean()) if len(prof) > 2 * third else max(w_first, w_last)
        ends_hi = max(w_first, w_last)
        ends_lo = max(min(w_first, w_last), 1e-9)
        if w_mid >= 1.4 * ends_hi:
            return MarkingLabel.DIAMOND_SIGN
        if ends_hi / ends_lo >= cfg.taper_ratio:
            # step profile (narrow shaft + wide head) vs steady wedge
            if w_mid < 0.75 * 0.5 * (w_first + w_last):
                return MarkingLabel.ARROW
            return MarkingLabel.TRIANGLE_SIGN
        return None

    def _crosswalk_pass(self, comps: list[_Component], labels: list[MarkingLabel]) -> None:
        """Promote bars with >= 2 similar parallel sideways neighbors."""
        cfg = self.config
        bar_idx = [i for i, lab in enumerate(labels) if lab is MarkingLabel.STOP_LINE]
        cos_tol = np.cos(np.radians(cfg.bar_neighbor_angle_deg))
        counts = {i: 0 for i in bar_idx}
        for a_pos, i in enumerate(bar_idx):
            for j in bar_idx[a_pos + 1:]:
                ci, cj = comps[i], comps[j]
                if abs(float(ci.axis @ cj.axis)) < cos_tol:
                    continue
                if abs(ci.length - cj.length) > 0.45 * max(ci.length, cj.length):
                    continue
                off = cj.centroid - ci.centroid
                dist = float(np.linalg.norm(off))
                if dist > cfg.bar_neighbor_dist_m or dist < 1e-9:
                    continue
                if abs(float(off @ ci.axis)) > 0.6 * dist:
                    continue
                counts[i] += 1
                counts[j] += 1
        for i, n in counts.items():
            if n >= 2:
                labels[i] = MarkingLabel.CROSSWALK


# ---------------------------------------------------------------------------
# detection metrics


@dataclass
class LabelMetrics:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if (self.tp + self.fp) else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if (self.tp + self.fn) else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if (p + r) else 0.0


@dataclass
class DetectionReport:
    per_label: dict[MarkingLabel, LabelMetrics] = field(default_factory=dict)

    def metrics(self, label: MarkingLabel) -> LabelMetrics:
        return self.per_label.setdefault(label, LabelMetrics())

    @property
    def macro_precision(self) -> float:
        return float(np.mean([m.precision for m in self.per_label.values()])) if self.per_label else 0.0

    @property
    def macro_recall(self) -> float:
        return float(np.mean([m.recall for m in self.per_label.values()])) if self.per_label else 0.0

    @property
    def macro_f1(self) -> float:
        return float(np.mean([m.f1 for m in self.per_label.values()])) if self.per_label else 0.0

    def merge(self, other: "DetectionReport") -> None:
        for label, m in other.per_label.items():
            mine = self.metrics(label)
            mine.tp += m.tp
            mine.fp += m.fp
            mine.fn += m.fn


def mask_iou(a: MarkingInstance, b: MarkingInstance) -> float:
    inter = len(np.intersect1d(a.mask, b.mask, assume_unique=True))
    if inter == 0:
        return 0.0
    return inter / (len(a.mask) + len(b.mask) - inter)


def detection_metrics(
    detected: list[MarkingInstance],
    truth: list[MarkingInstance],
    iou_threshold: float = 0.5,
) -> DetectionReport:
    """IoU-gated greedy one-to-one matching.

    A matched pair is a true positive iff IoU exceeds the threshold and both
    carry the same label; everything else counts as a false positive on the
    detected side and a false negative on the truth side.
    """
    shapes = {i.raster_shape for i in detected} | {i.raster_shape for i in truth}
    if len(shapes) > 1:
        raise GeometryMismatch(f"instances from different rasters: {shapes}")
    pairs = []
    for i, d in enumerate(detected):
        for j, t in enumerate(truth):
            iou = mask_iou(d, t)
            if iou > 0.0:
                # symmetric tie-break so precision/recall swap cleanly
                pairs.append((-iou, min(i, j), max(i, j), i, j))
    pairs.sort()
    report = DetectionReport()
    used_d, used_t = set(), set()
    for neg_iou, _, _, i, j in pairs:
        if i in used_d or j in used_t:
            continue
        used_d.add(i)
        used_t.add(j)
        if -neg_iou > iou_threshold and detected[i].label is truth[j].label:
            report.metrics(detected[i].label).tp += 1
        else:
            report.metrics(detected[i].label).fp += 1
            report.metrics(truth[j].label).fn += 1
    for i, d in enumerate(detected):
        if i not in used_d:
            report.metrics(d.label).fp += 1
    for j, t in enumerate(truth):
        if j not in used_t:
            report.metrics(t.label).fn += 1
    return report


# ---------------------------------------------------------------------------
# mask export


def export_instance_masks(instances: list[MarkingInstance], path) -> None:
    """Run-length-encoded masks, one text block per instance.

    Lines are `instance <id> <label>` followed by `row col_start run_length`
    rows, ordered by row then column.
    """
    lines = ["# instance masks, RLE rows: row col_start run_length"]
    for inst in instances:
        h, w = inst.raster_shape
        lines.append(f"instance {inst.instance_id} {inst.label.value}")
        rows, cols = np.divmod(np.sort(inst.mask), w)
        for r in np.unique(rows):
            c = cols[rows == r]
            breaks = np.flatnonzero(np.diff(c) > 1)
            starts = np.concatenate([[0], breaks + 1])
            ends = np.concatenate([breaks, [len(c) - 1]])
            for s, e in zip(starts, ends):
                lines.append(f"{r} {c[s]} {e - s + 1}")
    atomic_write_text(Path(path), "\n".join(lines) + "\n")
