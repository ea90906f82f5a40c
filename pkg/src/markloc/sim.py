"""Deterministic synthetic scenarios: HD maps with painted footprints,
ground-truth trajectories, drifting odometry, and ring-pattern LiDAR scans.

Scenes are built from templates (straight_road, intersection, loop,
marking_free_gap). Painted markings exist twice: as sampled HD-map elements
(what the localizer matches against) and as paint footprints (what the
renderer tests beam hits against, tracking point->element provenance).
Intensities follow a two-Gaussian asphalt/marking mixture on the 0-255 scale;
the wet_road preset pulls the modes together to mimic rain-soaked asphalt.
All randomness is counter-hashed from the scenario seed.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import rng
from .core import MarkingLabel, Pose2, PointCloud, wrap_angle
from .fileio import atomic_write_bytes, atomic_write_text
from .hdmap import HDMap, MapElement, principal_axis

SCAN_MAGIC = "MARKLOC-SCAN v1"
TRUTH_MAGIC = "MARKLOC-TRUTH v1"


class InvalidSpec(Exception):
    pass


@dataclass(frozen=True)
class IntensityModel:
    asphalt_mean: float = 40.0
    asphalt_sigma: float = 10.0
    marking_mean: float = 180.0
    marking_sigma: float = 15.0
    curb_mean: float = 120.0
    curb_sigma: float = 12.0


# rainy preset: both modes drift toward each other, contrast drops >= 50%
WET_INTENSITY = IntensityModel(
    asphalt_mean=50.0, asphalt_sigma=14.0,
    marking_mean=110.0, marking_sigma=20.0,
    curb_mean=80.0, curb_sigma=15.0,
)


@dataclass(frozen=True)
class SensorModel:
    rings: int = 32
    azimuth_steps: int = 720
    min_ground_range_m: float = 3.0
    max_ground_range_m: float = 38.0
    range_noise_m: float = 0.01  # vertical jitter of ground returns
    point_noise_m: float = 0.0  # planimetric jitter
    clutter_fraction: float = 0.02  # beams hitting elevated structures
    wet_road: bool = False

    def __post_init__(self):
        for name in ("range_noise_m", "point_noise_m", "clutter_fraction"):
            if getattr(self, name) < 0:
                raise InvalidSpec(f"sensor.{name} must be >= 0")
        if self.rings < 1 or self.azimuth_steps < 8:
            raise InvalidSpec("sensor.rings/azimuth_steps too small")
        if not 0 < self.min_ground_range_m < self.max_ground_range_m:
            raise InvalidSpec("sensor ground range bounds invalid")


@dataclass(frozen=True)
class OdometryNoise:
    trans_sigma_m: float = 0.01
    yaw_sigma_deg: float = 0.05

    def __post_init__(self):
        if self.trans_sigma_m < 0:
            raise InvalidSpec("odometry.trans_sigma_m must be >= 0")
        if self.yaw_sigma_deg < 0:
            raise InvalidSpec("odometry.yaw_sigma_deg must be >= 0")


TEMPLATES = ("straight_road", "intersection", "loop", "marking_free_gap")


@dataclass(frozen=True)
class ScenarioSpec:
    template: str = "straight_road"
    seed: int = 0
    n_frames: int = 300
    speed_mps: float = 5.0
    hz: float = 10.0
    odometry: OdometryNoise = OdometryNoise()
    sensor: SensorModel = SensorModel()
    intensity: IntensityModel = IntensityModel()
    gap_start_m: float = 20.0  # marking_free_gap only
    gap_end_m: float = 80.0

    def __post_init__(self):
        if self.template not in TEMPLATES:
            raise InvalidSpec(f"template must be one of {TEMPLATES}, got {self.template!r}")
        if self.n_frames < 1:
            raise InvalidSpec("n_frames must be >= 1")
        if self.speed_mps <= 0:
            raise InvalidSpec("speed_mps must be > 0")
        if self.hz <= 0:
            raise InvalidSpec("hz must be > 0")
        for name in ("asphalt_sigma", "marking_sigma", "curb_sigma"):
            if getattr(self.intensity, name) <= 0:
                raise InvalidSpec(f"intensity.{name} must be > 0")


def spec_from_dict(doc: dict) -> ScenarioSpec:
    """Build a spec from a JSON-style dict; unknown keys are rejected."""

    def build(cls, sub: dict, prefix: str):
        names = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(sub) - names
        if unknown:
            raise InvalidSpec(f"unknown key {prefix}{sorted(unknown)[0]}")
        return sub

    doc = dict(doc)
    build(ScenarioSpec, doc, "")
    kwargs = {}
    for key, val in doc.items():
        if key == "odometry":
            kwargs[key] = OdometryNoise(**build(OdometryNoise, val, "odometry."))
        elif key == "sensor":
            kwargs[key] = SensorModel(**build(SensorModel, val, "sensor."))
        elif key == "intensity":
            kwargs[key] = IntensityModel(**build(IntensityModel, val, "intensity."))
        else:
            kwargs[key] = val
    return ScenarioSpec(**kwargs)


def load_spec(path) -> ScenarioSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise InvalidSpec(f"{path}: {e}") from e
    if not isinstance(doc, dict):
        raise InvalidSpec(f"{path}: spec must be a JSON object")
    return spec_from_dict(doc)


# ---------------------------------------------------------------------------
# paint footprints


@dataclass
class PaintPatch:
    element_id: int
    label: MarkingLabel
    material: str  # "paint" or "curb"
    polys: list  # list of (k, 2) convex CCW vertex arrays
    bbox: np.ndarray  # minx, miny, maxx, maxy

    def contains(self, pts: np.ndarray) -> np.ndarray:
        out = np.zeros(len(pts), dtype=bool)
        near = (
            (pts[:, 0] >= self.bbox[0]) & (pts[:, 0] <= self.bbox[2])
            & (pts[:, 1] >= self.bbox[1]) & (pts[:, 1] <= self.bbox[3])
        )
        idx = np.flatnonzero(near)
        if len(idx) == 0:
            return out
        sub = pts[idx]
        hit = np.zeros(len(sub), dtype=bool)
        for poly in self.polys:
            inside = np.ones(len(sub), dtype=bool)
            for a, b in zip(poly, np.roll(poly, -1, axis=0)):
                edge = b - a
                inside &= (sub[:, 0] - a[0]) * edge[1] - (sub[:, 1] - a[1]) * edge[0] <= 1e-12
            hit |= inside
        out[idx] = hit
        return out


def _rect_poly(p0, p1, width: float) -> np.ndarray:
    """CCW rectangle around segment p0-p1 (the half-plane tests assume CCW)."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    d = p1 - p0
    d = d / np.linalg.norm(d)
    n = np.array([-d[1], d[0]]) * (0.5 * width)
    return np.array([p0 - n, p1 - n, p1 + n, p0 + n])


def _poly_ccw(verts) -> np.ndarray:
    """Orient a convex polygon counter-clockwise (matches the containment test)."""
    v = np.asarray(verts, dtype=float)
    area2 = float(np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1]))
    return v if area2 >= 0 else v[::-1]


def _sample_segment(p0, p1, spacing: float) -> np.ndarray:
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    n = max(2, int(round(np.linalg.norm(p1 - p0) / spacing)) + 1)
    t = np.linspace(0.0, 1.0, n)
    return p0 + t[:, None] * (p1 - p0)


def _fill_poly_samples(polys, spacing: float) -> np.ndarray:
    """Grid samples inside a union of convex polygons."""
    allv = np.concatenate(polys)
    xs = np.arange(allv[:, 0].min(), allv[:, 0].max() + spacing / 2, spacing)
    ys = np.arange(allv[:, 1].min(), allv[:, 1].max() + spacing / 2, spacing)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    keep = np.zeros(len(pts), dtype=bool)
    for poly in polys:
        inside = np.ones(len(pts), dtype=bool)
        for a, b in zip(poly, np.roll(poly, -1, axis=0)):
            edge = b - a
            inside &= (pts[:, 0] - a[0]) * edge[1] - (pts[:, 1] - a[1]) * edge[0] <= 1e-12
        keep |= inside
    return pts[keep]


MAP_SAMPLE_SPACING = 0.1
FILL_SAMPLE_SPACING = 0.15
_THIN_WIDTH = 0.25  # at or below: sample the centerline, else fill


class WorldBuilder:
    """Accumulates map elements plus their paint footprints."""

    def __init__(self):
        self.elements: list[MapElement] = []
        self.patches: list[PaintPatch] = []
        self._next = 0

    def _add(self, label, polys, samples, direction, material="paint") -> int:
        eid = self._next
        self._next += 1
        polys = [_poly_ccw(p) for p in polys]
        allv = np.concatenate(polys)
        bbox = np.array([
            allv[:, 0].min(), allv[:, 1].min(), allv[:, 0].max(), allv[:, 1].max()
        ])
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        self.elements.append(MapElement(eid, label, d, np.asarray(samples, dtype=float)))
        self.patches.append(PaintPatch(eid, label, material, polys, bbox))
        return eid

    def add_stripe(self, label, p0, p1, width, material="paint") -> int:
        """Straight painted stripe; thin ones are sampled on the centerline."""
        p0 = np.asarray(p0, dtype=float)
        p1 = np.asarray(p1, dtype=float)
        poly = _rect_poly(p0, p1, width)
        if width <= _THIN_WIDTH:
            samples = _sample_segment(p0, p1, MAP_SAMPLE_SPACING)
        else:
            samples = _fill_poly_samples([poly], FILL_SAMPLE_SPACING)
        return self._add(label, [poly], samples, p1 - p0, material)

    def add_dashes(self, p0, p1, width=0.15, dash=3.0, period=6.0, label=MarkingLabel.DASHED_LANE):
        """A dashed line: every dash is its own element/instance."""
        p0 = np.asarray(p0, dtype=float)
        p1 = np.asarray(p1, dtype=float)
        length = float(np.linalg.norm(p1 - p0))
        d = (p1 - p0) / length
        s = 0.0
        ids = []
        while s + dash <= length + 1e-9:
            ids.append(self.add_stripe(label, p0 + s * d, p0 + (s + dash) * d, width))
            s += period
        return ids

    def add_arrow(self, center, heading: float) -> int:
        """Straight-ahead arrow: 2.2 m shaft (0.35 wide) + 1.3 m head (1.0 wide)."""
        c, s = math.cos(heading), math.sin(heading)
        rot = np.array([[c, -s], [s, c]])
        ctr = np.asarray(center, dtype=float)
        shaft = np.array([[-1.75, -0.175], [0.45, -0.175], [0.45, 0.175], [-1.75, 0.175]])
        head = np.array([[0.45, -0.5], [1.75, 0.0], [0.45, 0.5]])
        polys = [shaft @ rot.T + ctr, head @ rot.T + ctr]
        samples = _fill_poly_samples(polys, FILL_SAMPLE_SPACING)
        return self._add(MarkingLabel.ARROW, polys, samples, (c, s))

    def add_text_block(self, center, heading: float, length=2.6, width=1.1) -> int:
        c, s = math.cos(heading), math.sin(heading)
        rot = np.array([[c, -s], [s, c]])
        ctr = np.asarray(center, dtype=float)
        hl, hw = length / 2, width / 2
        poly = np.array([[-hl, -hw], [hl, -hw], [hl, hw], [-hl, hw]]) @ rot.T + ctr
        samples = _fill_poly_samples([poly], FILL_SAMPLE_SPACING)
        return self._add(MarkingLabel.TEXT, [poly], samples, (c, s))

    def add_diamond(self, center, heading: float, length=2.6, width=1.3) -> int:
        c, s = math.cos(heading), math.sin(heading)
        rot = np.array([[c, -s], [s, c]])
        ctr = np.asarray(center, dtype=float)
        poly = np.array([[-length / 2, 0.0], [0.0, -width / 2], [length / 2, 0.0], [0.0, width / 2]])
        poly = poly @ rot.T + ctr
        samples = _fill_poly_samples([poly], FILL_SAMPLE_SPACING)
        return self._add(MarkingLabel.DIAMOND_SIGN, [poly], samples, (c, s))

    def add_triangle(self, center, heading: float, length=2.4, width=1.4) -> int:
        c, s = math.cos(heading), math.sin(heading)
        rot = np.array([[c, -s], [s, c]])
        ctr = np.asarray(center, dtype=float)
        poly = np.array([[-length / 2, -width / 2], [length / 2, 0.0], [-length / 2, width / 2]])
        poly = poly @ rot.T + ctr
        samples = _fill_poly_samples([poly], FILL_SAMPLE_SPACING)
        return self._add(MarkingLabel.TRIANGLE_SIGN, [poly], samples, (c, s))

    def add_arc_stripe(self, label, center, radius, a0, a1, width, material="paint",
                       max_chord_deg=15.0):
        """Curved stripe split into short chord elements (keeps each element's
        direction within the PCA tolerance); footprints use <= 1 m sub-chords."""
        ctr = np.asarray(center, dtype=float)
        total = abs(a1 - a0)
        n_el = max(1, int(math.ceil(total / math.radians(max_chord_deg))))
        ids = []
        for i in range(n_el):
            b0 = a0 + (a1 - a0) * i / n_el
            b1 = a0 + (a1 - a0) * (i + 1) / n_el
            arc_len = abs(b1 - b0) * radius
            n_sub = max(1, int(math.ceil(arc_len / 1.0)))
            polys = []
            for j in range(n_sub):
                t0 = b0 + (b1 - b0) * j / n_sub
                t1 = b0 + (b1 - b0) * (j + 1) / n_sub
                q0 = ctr + radius * np.array([math.cos(t0), math.sin(t0)])
                q1 = ctr + radius * np.array([math.cos(t1), math.sin(t1)])
                polys.append(_rect_poly(q0, q1, width))
            n_s = max(2, int(round(abs(b1 - b0) * radius / MAP_SAMPLE_SPACING)) + 1)
            ang = np.linspace(b0, b1, n_s)
            samples = ctr + radius * np.column_stack([np.cos(ang), np.sin(ang)])
            direction = principal_axis(samples)
            ids.append(self._add(label, polys, samples, direction, material))
        return ids


# ---------------------------------------------------------------------------
# templates


@dataclass
class Scenario:
    spec: ScenarioSpec
    hd_map: HDMap
    patches: list[PaintPatch]
    trajectory: np.ndarray  # (n, 3) x, y, yaw at spec.hz
    odometry: np.ndarray  # (n, 3), odometry[0] == trajectory[0]
    labels_by_element: dict[int, MarkingLabel] = field(default_factory=dict)

    def __post_init__(self):
        if not self.labels_by_element:
            self.labels_by_element = {
                el.element_id: el.label for el in self.hd_map.elements
            }

    @property
    def n_frames(self) -> int:
        return len(self.trajectory)

    def truth_pose(self, k: int) -> Pose2:
        x, y, yaw = self.trajectory[k]
        return Pose2(x, y, yaw)

    def odom_pose(self, k: int) -> Pose2:
        x, y, yaw = self.odometry[k]
        return Pose2(x, y, yaw)

    def scenario_hash(self) -> str:
        blob = json.dumps(asdict(self.spec), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _straight_world(spec: ScenarioSpec, gap: tuple[float, float] | None = None):
    path_len = spec.speed_mps * spec.n_frames / spec.hz
    half = max(120.0, path_len / 2 + 50.0)
    w = WorldBuilder()

    def stripes(y, width, label, material="paint"):
        """Full-length stripe, split around the marking-free gap if any."""
        spans = [(-half, half)]
        if gap is not None:
            g0, g1 = gap
            spans = [(-half, g0), (g1, half)]
        for x0, x1 in spans:
            if x1 - x0 > 1.0:
                w.add_stripe(label, (x0, y), (x1, y), width, material)

    stripes(3.5, 0.15, MarkingLabel.SOLID_LANE)
    stripes(-3.5, 0.15, MarkingLabel.SOLID_LANE)
    stripes(4.5, 0.25, MarkingLabel.CURB, material="curb")
    stripes(-4.5, 0.25, MarkingLabel.CURB, material="curb")
    spans = [(-half, half)] if gap is None else [(-half, gap[0]), (gap[1], half)]
    for x0, x1 in spans:
        if x1 - x0 > 6.0:
            w.add_dashes((x0, 0.0), (x1, 0.0))
    xs = -path_len / 2 + np.arange(spec.n_frames) * spec.speed_mps / spec.hz
    traj = np.column_stack([xs, np.full_like(xs, -1.75), np.zeros_like(xs)])
    return w, traj


def _intersection_world(spec: ScenarioSpec):
    """A two-lane road (along x) crossing a four-lane avenue (along y)."""
    arm = max(100.0, spec.speed_mps * spec.n_frames / spec.hz / 2 + 25.0)
    half_ew = 3.5  # EW road half-width
    half_ns = 7.0  # NS avenue half-width (two lanes per direction)
    box_x = half_ns + 1.0  # EW markings stop here
    box_y = half_ew + 1.0  # NS markings stop here
    dash_zone = 30.0  # dashed center near the junction, solid center beyond
    w = WorldBuilder()
    # lane edges
    for lo, hi in ((-arm, -box_x), (box_x, arm)):
        for y in (half_ew, -half_ew):
            w.add_stripe(MarkingLabel.SOLID_LANE, (lo, y), (hi, y), 0.15)
    for lo, hi in ((-arm, -box_y), (box_y, arm)):
        for x in (half_ns, -half_ns):
            w.add_stripe(MarkingLabel.SOLID_LANE, (x, lo), (x, hi), 0.15)
        # inner lane separators of the avenue
        for x in (3.5, -3.5):
            w.add_dashes((x, lo), (x, hi))
    # center line: dashed inside the junction zone, solid on the open road
    for lo, hi in ((-dash_zone, -box_x), (box_x, dash_zone)):
        w.add_dashes((lo, 0.0), (hi, 0.0))
    for lo, hi in ((-dash_zone, -box_y), (box_y, dash_zone)):
        w.add_dashes((0.0, lo), (0.0, hi))
    for lo, hi in ((-arm, -dash_zone), (dash_zone, arm)):
        w.add_stripe(MarkingLabel.SOLID_LANE, (lo, 0.0), (hi, 0.0), 0.15)
        w.add_stripe(MarkingLabel.SOLID_LANE, (0.0, lo), (0.0, hi), 0.15)
    # stop lines: one per approach, right-hand traffic, width 0.4
    sx = box_x + 1.2
    sy = box_y + 1.2
    w.add_stripe(MarkingLabel.STOP_LINE, (-sx, -half_ew + 0.2), (-sx, -0.2), 0.4)
    w.add_stripe(MarkingLabel.STOP_LINE, (sx, 0.2), (sx, half_ew - 0.2), 0.4)
    w.add_stripe(MarkingLabel.STOP_LINE, (0.2, -sy), (half_ns - 0.2, -sy), 0.4)
    w.add_stripe(MarkingLabel.STOP_LINE, (-half_ns + 0.2, sy), (-0.2, sy), 0.4)
    # crosswalks: bars along the crossing road, pitch 1.0 m, on all sides
    cw0 = sx + 1.5
    for x0, x1 in ((-cw0 - 2.5, -cw0), (cw0, cw0 + 2.5)):
        for j in range(7):
            y = -3.0 + j * 1.0
            w.add_stripe(MarkingLabel.CROSSWALK, (x0, y), (x1, y), 0.5)
    cw0 = sy + 1.5
    for y0, y1 in ((-cw0 - 2.5, -cw0), (cw0, cw0 + 2.5)):
        for j in range(13):
            x = -6.0 + j * 1.0
            w.add_stripe(MarkingLabel.CROSSWALK, (x, y0), (x, y1), 0.5)
    # straight-ahead arrows before each stop line
    ax = sx + 6.5
    w.add_arrow((-ax, -1.75), 0.0)
    w.add_arrow((ax, 1.75), math.pi)
    ay = sy + 6.5
    for x in (1.75, 5.25):
        w.add_arrow((x, -ay), math.pi / 2)
        w.add_arrow((-x, ay), -math.pi / 2)
    path_len = spec.speed_mps * spec.n_frames / spec.hz
    xs = -path_len / 2 + np.arange(spec.n_frames) * spec.speed_mps / spec.hz
    traj = np.column_stack([xs, np.full_like(xs, -1.75), np.zeros_like(xs)])
    return w, traj


def _loop_world(spec: ScenarioSpec):
    half = 40.0  # centerline square half-size
    r = 10.0  # corner radius
    straight = 2 * (half - r)
    perimeter = 4 * straight + 2 * math.pi * r
    w = WorldBuilder()

    # pieces: 4 straights + 4 arcs, CCW starting mid-bottom heading +x
    sides = [
        ((-(half - r), -half), (half - r, -half), (1, 0)),
        ((half, -(half - r)), (half, half - r), (0, 1)),
        ((half - r, half), (-(half - r), half), (-1, 0)),
        ((-half, half - r), (-half, -(half - r)), (0, -1)),
    ]
    corners = [  # (center, start angle) 90-degree CCW arcs
        ((half - r, -(half - r)), -math.pi / 2),
        ((half - r, half - r), 0.0),
        ((-(half - r), half - r), math.pi / 2),
        ((-(half - r), -(half - r)), math.pi),
    ]
    # CCW travel: left normal points inward, so outer edge sits at offset -3.5
    for (p0, p1, d) in sides:
        p0, p1, d = np.asarray(p0), np.asarray(p1), np.asarray(d)
        left = np.array([-d[1], d[0]])
        for off, label in ((-3.5, MarkingLabel.SOLID_LANE), (3.5, MarkingLabel.SOLID_LANE)):
            w.add_stripe(label, p0 + off * left, p1 + off * left, 0.15)
        w.add_dashes(p0, p1)
    for (ctr, a0) in corners:
        for rr, label in ((r + 3.5, MarkingLabel.SOLID_LANE), (r - 3.5, MarkingLabel.SOLID_LANE)):
            w.add_arc_stripe(label, ctr, rr, a0, a0 + math.pi / 2, 0.15)
        # 3 m dashes with 3 m gaps along the corner centerline
        a = a0
        while a + 3.0 / r <= a0 + math.pi / 2 + 1e-9:
            w.add_arc_stripe(MarkingLabel.DASHED_LANE, ctr, r, a, a + 3.0 / r, 0.15)
            a += 6.0 / r

    # one text block and signs on the bottom straight for label variety
    w.add_text_block((0.0, -half - 1.75), 0.0)
    w.add_diamond((-12.0, -half - 1.75), 0.0)
    w.add_triangle((12.0, -half - 1.75), 0.0)

    def point_at(s: float):
        s = s % perimeter
        for i in range(4):
            if s < straight:
                p0, p1, d = sides[i]
                p0 = np.asarray(p0, dtype=float)
                d = np.asarray(d, dtype=float)
                return p0 + s * d, math.atan2(d[1], d[0])
            s -= straight
            ctr, a0 = corners[i]
            arc = r * math.pi / 2
            if s < arc:
                a = a0 + s / r
                pos = np.asarray(ctr) + r * np.array([math.cos(a), math.sin(a)])
                return pos, a + math.pi / 2
            s -= arc
        return np.asarray(sides[0][0], dtype=float), 0.0

    traj = np.zeros((spec.n_frames, 3))
    for k in range(spec.n_frames):
        s = spec.speed_mps * k / spec.hz
        pos, yaw = point_at(s)
        heading = np.array([math.cos(yaw), math.sin(yaw)])
        left = np.array([-heading[1], heading[0]])
        lane = pos - 1.75 * left  # right lane of CCW travel
        traj[k] = (lane[0], lane[1], wrap_angle(yaw))
    return w, traj


def build_scenario(spec: ScenarioSpec) -> Scenario:
    """Deterministic world + trajectory + drifting odometry for a spec."""
    if spec.template == "straight_road":
        w, traj = _straight_world(spec)
    elif spec.template == "marking_free_gap":
        if spec.gap_end_m <= spec.gap_start_m:
            raise InvalidSpec("gap_end_m must exceed gap_start_m")
        w, traj = _straight_world(spec, gap=(spec.gap_start_m, spec.gap_end_m))
    elif spec.template == "intersection":
        w, traj = _intersection_world(spec)
    elif spec.template == "loop":
        w, traj = _loop_world(spec)
    else:  # pragma: no cover - guarded by ScenarioSpec
        raise InvalidSpec(f"unknown template {spec.template}")

    odo = np.zeros_like(traj)
    odo[0] = traj[0]
    sig_t = spec.odometry.trans_sigma_m
    sig_y = math.radians(spec.odometry.yaw_sigma_deg)
    for k in range(1, len(traj)):
        prev = Pose2(*traj[k - 1])
        cur = Pose2(*traj[k])
        delta = prev.delta_to(cur)
        n = rng.normals(spec.seed, rng.STREAM_ODOMETRY, k, np.arange(3))
        noisy = Pose2(delta.x + sig_t * n[0], delta.y + sig_t * n[1], delta.yaw + sig_y * n[2])
        nxt = Pose2(*odo[k - 1]).compose(noisy)
        odo[k] = (nxt.x, nxt.y, nxt.yaw)
    return Scenario(spec, HDMap(w.elements), w.patches, traj, odo)


# ---------------------------------------------------------------------------
# rendering


def render_scan(scenario: Scenario, k: int) -> PointCloud:
    """Ground returns (vehicle frame) for frame k.

    Ring ranges are geometrically spaced; each beam lands on the ground plane,
    draws its intensity from the material under it (tracked as source_id), and
    gets vertical (and optionally planimetric) noise. A clutter fraction of
    beams hits elevated structure instead.
    """
    spec = scenario.spec
    sensor = spec.sensor
    if not 0 <= k < scenario.n_frames:
        raise IndexError(f"frame {k} outside trajectory")
    pose = scenario.truth_pose(k)
    nr, na = sensor.rings, sensor.azimuth_steps
    radii = sensor.min_ground_range_m * (
        (sensor.max_ground_range_m / sensor.min_ground_range_m)
        ** (np.arange(nr) / max(1, nr - 1))
    )
    az = 2.0 * np.pi * (np.arange(na) + 0.5) / na
    rr, aa = np.meshgrid(radii, az, indexing="ij")
    rr = rr.ravel()
    aa = aa.ravel()
    n = len(rr)
    ids = np.arange(n)

    local = np.column_stack([rr * np.cos(aa), rr * np.sin(aa)])
    z = sensor.range_noise_m * rng.normals(spec.seed, rng.STREAM_RANGE, k, ids)
    # provenance is resolved at the true hit position, before measurement noise
    world = pose.transform(local)
    if sensor.point_noise_m > 0:
        local = local + sensor.point_noise_m * np.column_stack([
            rng.normals(spec.seed, rng.STREAM_POINT_XY, k, ids),
            rng.normals(spec.seed, rng.STREAM_POINT_XY, k, ids + n),
        ])

    source = np.full(n, -1, dtype=np.int64)
    material = np.zeros(n, dtype=np.int8)  # 0 asphalt, 1 paint, 2 curb
    lo = world.min(axis=0)
    hi = world.max(axis=0)
    for patch in scenario.patches:
        if (patch.bbox[2] < lo[0] or patch.bbox[0] > hi[0]
                or patch.bbox[3] < lo[1] or patch.bbox[1] > hi[1]):
            continue
        hit = patch.contains(world)
        if hit.any():
            source[hit] = patch.element_id
            material[hit] = 2 if patch.material == "curb" else 1

    model = WET_INTENSITY if sensor.wet_road else spec.intensity
    draw = rng.normals(spec.seed, rng.STREAM_INTENSITY, k, ids)
    means = np.choose(material, [model.asphalt_mean, model.marking_mean, model.curb_mean])
    sigmas = np.choose(material, [model.asphalt_sigma, model.marking_sigma, model.curb_sigma])
    intensity = np.clip(means + sigmas * draw, 0.0, 255.0)

    # clutter: elevated structure hits replace a slice of beams
    if sensor.clutter_fraction > 0:
        u = rng.uniforms(spec.seed, rng.STREAM_CLUTTER, k, ids)
        clutter = u < sensor.clutter_fraction
        if clutter.any():
            m = int(clutter.sum())
            cid = ids[clutter]
            crange = 1.0 + (sensor.max_ground_range_m / 2) * rng.uniforms(
                spec.seed, rng.STREAM_CLUTTER, k, cid + n
            )
            local[clutter] = np.column_stack([
                crange * np.cos(aa[clutter]), crange * np.sin(aa[clutter])
            ])
            z[clutter] = 0.3 + 2.2 * rng.uniforms(spec.seed, rng.STREAM_CLUTTER, k, cid + 2 * n)
            intensity[clutter] = np.clip(
                model.asphalt_mean
                + model.asphalt_sigma * rng.normals(spec.seed, rng.STREAM_CLUTTER, k, cid + 3 * n),
                0.0, 255.0,
            )
            source[clutter] = -1
            material[clutter] = 0

    return PointCloud(local, z, intensity, np.full(n, k, dtype=np.int64), source)


def ground_truth_instances(scenario: Scenario, raster, snapshot, min_pixels: int = 1):
    """True instances on a raster: one per generating map element in view."""
    from .libev import OracleLabeler

    return OracleLabeler(scenario.labels_by_element, min_pixels=min_pixels).label(
        raster, snapshot
    )


# ---------------------------------------------------------------------------
# on-disk scenario format


def _write_csv(path, rows_xyyaw: np.ndarray, hz: float):
    lines = ["t,x,y,yaw"]
    for k, (x, y, yaw) in enumerate(rows_xyyaw):
        lines.append(f"{k / hz!r},{x!r},{y!r},{yaw!r}")
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


def _read_csv(path) -> np.ndarray:
    lines = Path(path).read_text().strip().splitlines()
    out = []
    for line in lines[1:]:
        t, x, y, yaw = line.split(",")
        out.append((float(x), float(y), float(yaw)))
    return np.array(out)


def write_scan(path, cloud: PointCloud, k: int) -> None:
    header = f"{SCAN_MAGIC}\ncount={len(cloud)} frame={k}\n".encode()
    data = np.column_stack([cloud.xy, cloud.z, cloud.intensity]).astype("<f4")
    atomic_write_bytes(Path(path), header + data.tobytes())


def read_scan(path) -> PointCloud:
    blob = Path(path).read_bytes()
    nl1 = blob.index(b"\n")
    nl2 = blob.index(b"\n", nl1 + 1)
    if blob[:nl1].decode() != SCAN_MAGIC:
        raise InvalidSpec(f"{path}: bad scan magic")
    fields = dict(kv.split("=") for kv in blob[nl1 + 1: nl2].decode().split())
    count, frame = int(fields["count"]), int(fields["frame"])
    arr = np.frombuffer(blob[nl2 + 1:], dtype="<f4").reshape(count, 4).astype(np.float64)
    return PointCloud(arr[:, :2], arr[:, 2], arr[:, 3],
                      np.full(count, frame, dtype=np.int64))


def write_truth(path, source_id: np.ndarray, k: int) -> None:
    header = f"{TRUTH_MAGIC}\ncount={len(source_id)} frame={k}\n".encode()
    atomic_write_bytes(Path(path), header + source_id.astype("<i4").tobytes())


def read_truth(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    nl1 = blob.index(b"\n")
    nl2 = blob.index(b"\n", nl1 + 1)
    if blob[:nl1].decode() != TRUTH_MAGIC:
        raise InvalidSpec(f"{path}: bad truth magic")
    fields = dict(kv.split("=") for kv in blob[nl1 + 1: nl2].decode().split())
    return np.frombuffer(blob[nl2 + 1:], dtype="<i4").astype(np.int64)[: int(fields["count"])]


def write_scenario(scenario: Scenario, out_dir) -> None:
    """Export a scenario: map, truth + odometry CSVs, per-frame scan files
    (plus provenance sidecars for the oracle labeler), and the resolved spec."""
    from .hdmap import save_map

    out = Path(out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    save_map(scenario.hd_map, out / "map.json")
    _write_csv(out / "trajectory.csv", scenario.trajectory, scenario.spec.hz)
    _write_csv(out / "odometry.csv", scenario.odometry, scenario.spec.hz)
    atomic_write_text(out / "scenario.json",
                      json.dumps(asdict(scenario.spec), indent=1, sort_keys=True) + "\n")
    for k in range(scenario.n_frames):
        cloud = render_scan(scenario, k)
        write_scan(out / "scans" / f"scan_{k:06d}.bin", cloud, k)
        write_truth(out / "scans" / f"scan_{k:06d}.truth.bin", cloud.source_id, k)


def load_scenario_spec(dir_path) -> ScenarioSpec:
    return load_spec(Path(dir_path) / "scenario.json")
