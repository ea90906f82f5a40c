"""SE(2) registration of labeled marking points against the HD map.

Two solvers share one damped Gauss-Newton loop over the generalized-ICP
objective sum_i r_i^T (C_mi + R C_Li R^T)^{-1} r_i with r_i = q_mi - T q_Li:

* sgicp_solve shapes every covariance from the marking semantics: the
  empirical spectrum of an instance is replaced by diag(1, epsilon) with
  epsilon in {1e-6, 1e-1, 1} for lines / line segments / others, so
  constraints along a linear marking barely influence the estimate.
* icp_solve runs the identical loop with identity weighting (point-to-point
  least squares).

Pose directions whose information comes almost exclusively from the
epsilon-suppressed along-line channel of category-Lines pairs are
under-constrained by construction; a degeneracy gate zeroes the step along
those eigendirections (solution remapping) so the estimate holds its prior
value there instead of chasing map-sampling artifacts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .core import ConstraintCategory, MarkingLabel, Pose2, category_of
from .hdmap import HDMap, associate
from .libev import MarkingInstance
from .localmap import MapSnapshot


class DegenerateInstance(Exception):
    pass


class NonUnitDirection(Exception):
    pass


class NoCorrespondences(Exception):
    pass


_DEGENERATE_EIG = 1e-12


def instance_covariance(
    points: np.ndarray,
    category: ConstraintCategory,
    epsilon: float | None = None,
    fallback_direction: np.ndarray | None = None,
) -> np.ndarray:
    """Anisotropic covariance of one detected instance.

    Empirical covariance (1/(n-1) about the centroid) -> eigendecomposition
    with sigma1 >= sigma2 -> spectrum replaced by diag(1, epsilon) and
    reconstructed symmetrically around the empirical principal axis.

    Coincident points under a linear category fall back to the instance's
    map-element direction when given, otherwise to the isotropic others
    treatment.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if len(pts) == 0:
        raise DegenerateInstance("no points")
    eps = category.epsilon if epsilon is None else epsilon
    if len(pts) >= 2:
        centered = pts - pts.mean(axis=0)
        emp = centered.T @ centered / (len(pts) - 1)
        w, v = np.linalg.eigh(emp)
        if w[1] > _DEGENERATE_EIG:
            u1, u2 = v[:, 1], v[:, 0]
            return np.outer(u1, u1) + eps * np.outer(u2, u2)
    # coincident (or single) points: no principal axis to orient the spectrum
    if category is not ConstraintCategory.OTHERS and fallback_direction is not None:
        return map_covariance(fallback_direction, category, epsilon=eps)
    return np.eye(2)


def map_covariance(
    v_mi: np.ndarray, category: ConstraintCategory, epsilon: float | None = None
) -> np.ndarray:
    """Covariance of a map element: rotate diag(1, epsilon) onto v_mi."""
    v = np.asarray(v_mi, dtype=float)
    if abs(np.linalg.norm(v) - 1.0) > 1e-6:
        raise NonUnitDirection(f"|v| = {np.linalg.norm(v):.8f}")
    eps = category.epsilon if epsilon is None else epsilon
    theta = math.atan2(v[1], v[0])
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    return rot @ np.diag([1.0, eps]) @ rot.T


def pair_residual(pose: Pose2, q_l: np.ndarray, q_m: np.ndarray) -> np.ndarray:
    return np.asarray(q_m, dtype=float) - pose.transform(q_l)


def residual_jacobian(pose: Pose2, q_l: np.ndarray) -> np.ndarray:
    """Analytic d(q_m - T q_l)/d(x, y, yaw), a 2x3 matrix."""
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    x, y = np.asarray(q_l, dtype=float)
    dtheta = np.array([-s * x - c * y, c * x - s * y])
    return np.array([[-1.0, 0.0, -dtheta[0]], [0.0, -1.0, -dtheta[1]]])


@dataclass(frozen=True)
class SolverParams:
    max_dist: float = 2.0
    max_outer: int = 50
    max_inner: int = 10
    tol: float = 1e-5  # pose-delta norm, meters and radians mixed
    lambda0: float = 1e-4
    eps_lines: float = 1e-6
    eps_segments: float = 1e-1
    eps_others: float = 1.0
    huber_enabled: bool = False
    huber_delta: float = 1.0
    rebuild_m: bool = True
    degeneracy_guard: bool = True
    legit_fraction_min: float = 0.1
    cond_limit: float = 1e12
    # residual points per instance fed to the solver (deterministic stride);
    # covariances always use the full instance. 0 disables subsampling.
    max_points_per_instance: int = 100

    def epsilon_for(self, category: ConstraintCategory) -> float:
        return {
            ConstraintCategory.LINES: self.eps_lines,
            ConstraintCategory.LINE_SEGMENTS: self.eps_segments,
            ConstraintCategory.OTHERS: self.eps_others,
        }[category]


@dataclass
class SemanticCloud:
    """Labeled points plus one shared covariance per instance."""

    xy: np.ndarray  # (M, 2) local/odometry frame
    label_code: np.ndarray  # (M,) index into list(MarkingLabel)
    instance_index: np.ndarray  # (M,) row into the instance arrays
    inst_cov: np.ndarray  # (K, 2, 2) C_Li
    inst_is_lines: np.ndarray  # (K,) bool, category == Lines

    def __len__(self):
        return len(self.xy)


def build_semantic_cloud(
    snapshot: MapSnapshot,
    instances: list[MarkingInstance],
    params: SolverParams = SolverParams(),
) -> SemanticCloud:
    all_labels = list(MarkingLabel)
    xs, codes, inst_idx, covs, is_lines = [], [], [], [], []
    cap = params.max_points_per_instance
    for inst in instances:
        if inst.n_points == 0:
            continue
        pts = snapshot.xy[inst.point_ids]
        cat = category_of(inst.label)
        covs.append(instance_covariance(pts, cat, epsilon=params.epsilon_for(cat)))
        is_lines.append(cat is ConstraintCategory.LINES)
        k = len(covs) - 1
        if cap and len(pts) > cap:
            pts = pts[np.linspace(0, len(pts) - 1, cap).astype(int)]
        xs.append(pts)
        codes.append(np.full(len(pts), all_labels.index(inst.label), dtype=np.int64))
        inst_idx.append(np.full(len(pts), k, dtype=np.int64))
    if not xs:
        return SemanticCloud(
            np.empty((0, 2)), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64),
            np.empty((0, 2, 2)), np.empty(0, dtype=bool),
        )
    return SemanticCloud(
        np.concatenate(xs),
        np.concatenate(codes),
        np.concatenate(inst_idx),
        np.stack(covs),
        np.array(is_lines, dtype=bool),
    )


@dataclass
class SolveReport:
    pose: Pose2
    iterations: int
    converged: bool
    final_cost: float
    correspondence_counts: list[int] = field(default_factory=list)
    singular: bool = False
    truncated_directions: int = 0
    max_cost_increase: float = 0.0  # over accepted inner steps (should be <= 0)
    message: str = ""


def _rot_sandwich(c00, c01, c11, cos_t, sin_t):
    """Components of R C R^T for symmetric C = [[c00, c01], [c01, c11]]."""
    cc, ss, cs = cos_t * cos_t, sin_t * sin_t, cos_t * sin_t
    s00 = cc * c00 - 2.0 * cs * c01 + ss * c11
    s01 = cs * c00 + (cc - ss) * c01 - cs * c11
    s11 = ss * c00 + 2.0 * cs * c01 + cc * c11
    return s00, s01, s11


def _inv2_comp(s00, s01, s11):
    det = s00 * s11 - s01 * s01
    return s11 / det, -s01 / det, s00 / det


def _strong_channel_comp(m00, m01, m11):
    """Components of lambda_max u u^T for symmetric [[m00, m01], [m01, m11]]."""
    half_gap = 0.5 * (m00 - m11)
    disc = np.sqrt(half_gap * half_gap + m01 * m01)
    lam = 0.5 * (m00 + m11) + disc
    vx1, vy1 = m01, lam - m00
    vx2, vy2 = lam - m11, m01
    use2 = vx1 * vx1 + vy1 * vy1 < vx2 * vx2 + vy2 * vy2
    vx = np.where(use2, vx2, vx1)
    vy = np.where(use2, vy2, vy1)
    norm = np.sqrt(vx * vx + vy * vy)
    safe = norm > 0
    vx = np.where(safe, vx / np.where(safe, norm, 1.0), 1.0)
    vy = np.where(safe, vy / np.where(safe, norm, 1.0), 0.0)
    return lam * vx * vx, lam * vx * vy, lam * vy * vy


def _accumulate_comp(m00, m01, m11, rx, ry, dx, dy):
    """3x3 normal matrix and gradient for weights M, residuals r, yaw cols d."""
    wr_x = m00 * rx + m01 * ry
    wr_y = m01 * rx + m11 * ry
    wd_x = m00 * dx + m01 * dy
    wd_y = m01 * dx + m11 * dy
    h = np.empty((3, 3))
    h[0, 0] = m00.sum()
    h[0, 1] = h[1, 0] = m01.sum()
    h[1, 1] = m11.sum()
    h[0, 2] = h[2, 0] = wd_x.sum()
    h[1, 2] = h[2, 1] = wd_y.sum()
    h[2, 2] = float(dx @ wd_x + dy @ wd_y)
    g = -np.array([wr_x.sum(), wr_y.sum(), float(dx @ wr_x + dy @ wr_y)])
    return h, g


def _quad_comp(m00, m01, m11, rx, ry):
    return rx * (m00 * rx + m01 * ry) + ry * (m01 * rx + m11 * ry)


def _cost_comp(q, params: SolverParams) -> float:
    if params.huber_enabled:
        d = params.huber_delta
        m = np.sqrt(np.maximum(q, 0.0))
        return float(np.where(m <= d, q, 2.0 * d * m - d * d).sum())
    return float(q.sum())


def _solve(
    cloud: SemanticCloud,
    hd_map: HDMap,
    initial: Pose2,
    params: SolverParams,
    semantic: bool,
) -> SolveReport:
    if len(cloud) == 0:
        raise NoCorrespondences("semantic cloud is empty")
    pose = initial
    report = SolveReport(pose, 0, False, math.inf)
    map_cov: dict[int, np.ndarray] = {}
    cov_keys = cov_vals = None

    for outer in range(params.max_outer):
        assoc = associate(cloud.xy, cloud.label_code, pose, hd_map, params.max_dist)
        report.correspondence_counts.append(len(assoc))
        if len(assoc) == 0:
            if outer == 0:
                raise NoCorrespondences("association empty at initial pose")
            report.message = "association became empty"
            break
        q_l, q_m = assoc.q_li, assoc.q_mi
        if semantic:
            inst = cloud.instance_index[assoc.point_index]
            c_l = cloud.inst_cov[inst]
            lines_pair = cloud.inst_is_lines[inst]
            new_eids = [e for e in np.unique(assoc.element_id) if e not in map_cov]
            for eid in new_eids:
                el = hd_map.element_by_id(int(eid))
                map_cov[eid] = map_covariance(
                    el.direction, el.category, epsilon=params.epsilon_for(el.category)
                )
            if new_eids or cov_keys is None:
                cov_keys = np.array(sorted(map_cov), dtype=np.int64)
                cov_vals = np.stack([map_cov[e] for e in cov_keys])
            c_m = cov_vals[np.searchsorted(cov_keys, assoc.element_id)]
        else:
            # identity weighting: (0.5 I + R 0.5 I R^T)^{-1} = I
            eye_half = np.full(len(assoc), 0.5)
            c_l = c_m = None
            lines_pair = np.zeros(len(assoc), dtype=bool)

        # M_i is held fixed within the inner solve; rebuild_m=False keeps the
        # initial-pose rotation in M for the whole solve.
        ref = pose if params.rebuild_m else initial
        if semantic:
            s00, s01, s11 = _rot_sandwich(
                c_l[:, 0, 0], c_l[:, 0, 1], c_l[:, 1, 1],
                math.cos(ref.yaw), math.sin(ref.yaw),
            )
            s00 = s00 + c_m[:, 0, 0]
            s01 = s01 + c_m[:, 0, 1]
            s11 = s11 + c_m[:, 1, 1]
            m00, m01, m11 = _inv2_comp(s00, s01, s11)
        else:
            m00 = m11 = np.ones(len(assoc))
            m01 = np.zeros(len(assoc))
        if semantic and lines_pair.any():
            l00, l01, l11 = m00.copy(), m01.copy(), m11.copy()
            s_strong = _strong_channel_comp(m00[lines_pair], m01[lines_pair], m11[lines_pair])
            l00[lines_pair], l01[lines_pair], l11[lines_pair] = s_strong
            legit = (l00, l01, l11)
        else:
            legit = None

        qlx, qly = q_l[:, 0], q_l[:, 1]
        pose_outer_start = pose
        lam = params.lambda0
        r0 = q_m - pose.transform(q_l)
        cost = _cost_comp(_quad_comp(m00, m01, m11, r0[:, 0], r0[:, 1]), params)
        gated_out = False
        basis = None  # under-constraint gate evaluated once per outer iteration
        for _ in range(params.max_inner):
            cos_t, sin_t = math.cos(pose.yaw), math.sin(pose.yaw)
            rx = q_m[:, 0] - (cos_t * qlx - sin_t * qly) - pose.x
            ry = q_m[:, 1] - (sin_t * qlx + cos_t * qly) - pose.y
            dx = -sin_t * qlx - cos_t * qly
            dy = cos_t * qlx - sin_t * qly
            if params.huber_enabled:
                q = _quad_comp(m00, m01, m11, rx, ry)
                scale = np.minimum(1.0, params.huber_delta / np.sqrt(np.maximum(q, 1e-300)))
                w00, w01, w11 = m00 * scale, m01 * scale, m11 * scale
            else:
                w00, w01, w11 = m00, m01, m11
            h, g = _accumulate_comp(w00, w01, w11, rx, ry, dx, dy)
            if basis is None:
                if params.degeneracy_guard and legit is not None:
                    if params.huber_enabled:
                        lw = (legit[0] * scale, legit[1] * scale, legit[2] * scale)
                    else:
                        lw = legit
                    h_legit, _ = _accumulate_comp(*lw, rx, ry, dx, dy)
                    # generalized problem H_legit v = mu H v: mu is the exact
                    # legit-information fraction along v, minimized over
                    # directions, immune to contamination from strong axes
                    mu, vecs = scipy.linalg.eigh(
                        h_legit, h + 1e-12 * np.trace(h) * np.eye(3)
                    )
                    degenerate = mu < params.legit_fraction_min
                    report.truncated_directions = max(
                        report.truncated_directions, int(degenerate.sum())
                    )
                    if degenerate.all():
                        report.message = "all directions under-constrained"
                        gated_out = True
                        break
                    if degenerate.any():
                        # steps live in the Euclidean-orthogonal complement of
                        # the degenerate span, so no motion leaks along it
                        u, _ = np.linalg.qr(vecs[:, degenerate])
                        proj = np.eye(3) - u @ u.T
                        w_p, v_p = np.linalg.eigh(proj)
                        basis = v_p[:, w_p > 0.5]
                    else:
                        basis = np.eye(3)
                else:
                    basis = np.eye(3)
            h_red = basis.T @ h @ basis
            if np.linalg.cond(h_red) > params.cond_limit:
                report.singular = True
                report.message = "normal matrix condition number over limit"
                report.pose = pose
                report.iterations = outer + 1
                report.final_cost = cost
                return report
            step = None
            while lam <= 1e8:
                damped = h_red + lam * np.eye(h_red.shape[0])
                delta = basis @ np.linalg.solve(damped, basis.T @ (-g))
                cand = Pose2(pose.x + delta[0], pose.y + delta[1], pose.yaw + delta[2])
                r_c = q_m - cand.transform(q_l)
                cand_cost = _cost_comp(
                    _quad_comp(m00, m01, m11, r_c[:, 0], r_c[:, 1]), params
                )
                if cand_cost <= cost:
                    report.max_cost_increase = max(report.max_cost_increase, cand_cost - cost)
                    pose = cand
                    cost = cand_cost
                    lam = max(lam * 0.1, 1e-12)
                    step = delta
                    break
                lam *= 10.0
            if step is None or np.linalg.norm(step) < params.tol:
                break
        report.iterations = outer + 1
        report.final_cost = cost
        if gated_out:
            break
        d = pose_outer_start.delta_to(pose)
        if math.sqrt(d.x**2 + d.y**2 + d.yaw**2) < params.tol:
            report.converged = True
            break

    report.pose = pose
    return report


def sgicp_solve(
    cloud: SemanticCloud, hd_map: HDMap, initial: Pose2, params: SolverParams = SolverParams()
) -> SolveReport:
    """Semantic GICP: anisotropic per-instance and per-element covariances."""
    return _solve(cloud, hd_map, initial, params, semantic=True)


def icp_solve(
    cloud: SemanticCloud, hd_map: HDMap, initial: Pose2, params: SolverParams = SolverParams()
) -> SolveReport:
    """Point-to-point baseline: same loop and gates with identity weighting."""
    return _solve(cloud, hd_map, initial, params, semantic=False)
