"""Joint refinement of camera poses and skeleton points.

Minimizes the squared pixel reprojection error over all observations,
optionally augmented with a penalty that keeps the 3D angles between
root segments near reference values (those angles are view-invariant,
so they regularize the depth ambiguity of small-baseline rigs). The
solver runs a fixed number of Levenberg-Marquardt iterations; the
damping factor comes from a pluggable policy so alternative schedules
can be swapped in without touching the solver.

Parameterization: the first camera is held fixed (gauge); every other
pose contributes a 6-vector (axis-angle rotation increment, translation
increment) and every point its 3 coordinates. Rotation increments are
composed onto the stored rotation matrix on accepted steps, so no
quaternion renormalization is needed. The update follows
``x_next = x - (J^T J + lambda * diag(J^T J))^{-1} J^T e``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import SingularSystem, ValidationError
from .geometry import (
    BEHIND_CAMERA_PENALTY,
    MIN_PROJECTION_DEPTH,
    CameraView,
    Pose,
    rotation_from_axis_angle,
)

logger = logging.getLogger(__name__)

_DIAG_FLOOR = 1e-12


@dataclass(frozen=True)
class AngleConstraint:
    """Keep the angle between two point-index segments near a reference.

    ``seg_a`` and ``seg_b`` are (start, end) indices into the problem's
    point array; ``theta_ref`` is in radians, strictly inside (0, pi).
    """

    seg_a: tuple[int, int]
    seg_b: tuple[int, int]
    theta_ref: float

    def __post_init__(self):
        if not (0.0 < self.theta_ref < math.pi):
            raise ValidationError(f"reference angle {self.theta_ref} outside (0, pi)")


@dataclass
class SbaProblem:
    """Poses, points, observations, and angle constraints to refine.

    Observations are kept in (view, point) lexicographic order. Every
    point must be observed in at least two views.
    """

    views: list[CameraView]
    points: np.ndarray
    obs_view: np.ndarray
    obs_point: np.ndarray
    obs_pixel: np.ndarray
    constraints: list[AngleConstraint] = field(default_factory=list)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.obs_view = np.asarray(self.obs_view, dtype=int).reshape(-1)
        self.obs_point = np.asarray(self.obs_point, dtype=int).reshape(-1)
        self.obs_pixel = np.asarray(self.obs_pixel, dtype=float).reshape(-1, 2)
        m = len(self.obs_view)
        if not (len(self.obs_point) == m and len(self.obs_pixel) == m):
            raise ValidationError("observation arrays must share their length")
        if m:
            order = np.lexsort((self.obs_point, self.obs_view))
            self.obs_view = self.obs_view[order]
            self.obs_point = self.obs_point[order]
            self.obs_pixel = self.obs_pixel[order]
        counts = np.bincount(self.obs_point, minlength=len(self.points))
        if np.any(counts < 2):
            short = np.nonzero(counts < 2)[0]
            raise ValidationError(f"points observed in < 2 views: {short.tolist()}")
        if self.obs_view.min(initial=0) < 0 or self.obs_view.max(initial=0) >= len(self.views):
            raise ValidationError("observation view index out of range")

    @property
    def num_params(self) -> int:
        return 6 * (len(self.views) - 1) + 3 * len(self.points)


@dataclass
class SbaState:
    """Mutable pose/point estimate during optimization."""

    rotations: np.ndarray  # (V, 3, 3)
    translations: np.ndarray  # (V, 3)
    points: np.ndarray  # (N, 3)

    @classmethod
    def from_problem(cls, problem: SbaProblem) -> "SbaState":
        return cls(
            rotations=np.array([v.pose.rotation for v in problem.views]),
            translations=np.array([v.pose.translation for v in problem.views]),
            points=problem.points.copy(),
        )

    def copy(self) -> "SbaState":
        return SbaState(self.rotations.copy(), self.translations.copy(), self.points.copy())

    def to_views(self, template: list[CameraView]) -> list[CameraView]:
        return [
            replace(view, pose=Pose(self.rotations[i], self.translations[i]))
            for i, view in enumerate(template)
        ]


def apply_delta(state: SbaState, delta: np.ndarray, num_views: int) -> SbaState:
    """Compose a parameter increment onto a state (pose 0 untouched)."""
    out = state.copy()
    for v in range(1, num_views):
        w = delta[6 * (v - 1) : 6 * (v - 1) + 3]
        dt = delta[6 * (v - 1) + 3 : 6 * (v - 1) + 6]
        out.rotations[v] = rotation_from_axis_angle(w) @ out.rotations[v]
        out.translations[v] = out.translations[v] + dt
    off = 6 * (num_views - 1)
    out.points = out.points + delta[off:].reshape(-1, 3)
    return out


def _camera_terms(problem: SbaProblem, state: SbaState):
    """Per-observation camera-frame geometry shared by residuals and J."""
    r = state.rotations[problem.obs_view]
    rp = np.einsum("mij,mj->mi", r, state.points[problem.obs_point])
    xc = rp + state.translations[problem.obs_view]
    in_front = xc[:, 2] > MIN_PROJECTION_DEPTH
    return r, rp, xc, in_front


def _intrinsic_arrays(problem: SbaProblem):
    fx = np.array([v.intrinsics.fx for v in problem.views])
    fy = np.array([v.intrinsics.fy for v in problem.views])
    cx = np.array([v.intrinsics.cx for v in problem.views])
    cy = np.array([v.intrinsics.cy for v in problem.views])
    i = problem.obs_view
    return fx[i], fy[i], cx[i], cy[i]


def residuals(problem: SbaProblem, state: SbaState | None = None) -> np.ndarray:
    """Stacked (projection - observation) pixel residuals, (2M,).

    Observations with the point behind the camera contribute the
    behind-camera penalty in both components (and a zero Jacobian
    block), keeping the objective finite.
    """
    state = state or SbaState.from_problem(problem)
    _, _, xc, in_front = _camera_terms(problem, state)
    fx, fy, cx, cy = _intrinsic_arrays(problem)
    e = np.empty((len(problem.obs_view), 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        e[:, 0] = fx * xc[:, 0] / xc[:, 2] + cx - problem.obs_pixel[:, 0]
        e[:, 1] = fy * xc[:, 1] / xc[:, 2] + cy - problem.obs_pixel[:, 1]
    e[~in_front] = BEHIND_CAMERA_PENALTY
    return e.ravel()


def jacobian(problem: SbaProblem, state: SbaState | None = None) -> np.ndarray:
    """Dense analytic Jacobian of the reprojection residuals.

    Block-sparse by construction: the rows of observation (i, j) only
    touch pose i (columns 6(i-1)..6i-1, absent for the fixed first
    pose) and point j. Dense storage is fine at this package's scale
    (tens of views, hundreds of points).
    """
    state = state or SbaState.from_problem(problem)
    r, rp, xc, in_front = _camera_terms(problem, state)
    fx, fy, _, _ = _intrinsic_arrays(problem)
    m = len(problem.obs_view)
    num_views = len(problem.views)
    jac = np.zeros((2 * m, problem.num_params))
    if m == 0:
        return jac

    with np.errstate(divide="ignore", invalid="ignore"):
        iz = np.where(in_front, 1.0 / xc[:, 2], 0.0)
    # d(pixel)/d(camera point): rows scaled by focal lengths
    a = np.zeros((m, 2, 3))
    a[:, 0, 0] = fx * iz
    a[:, 0, 2] = -fx * xc[:, 0] * iz * iz
    a[:, 1, 1] = fy * iz
    a[:, 1, 2] = -fy * xc[:, 1] * iz * iz
    a[~in_front] = 0.0

    # point block: A @ R
    j_pt = np.einsum("mab,mbc->mac", a, r)
    # rotation block: A @ (-skew(R p)); translation block: A
    sk = np.zeros((m, 3, 3))
    sk[:, 0, 1] = -rp[:, 2]
    sk[:, 0, 2] = rp[:, 1]
    sk[:, 1, 0] = rp[:, 2]
    sk[:, 1, 2] = -rp[:, 0]
    sk[:, 2, 0] = -rp[:, 1]
    sk[:, 2, 1] = rp[:, 0]
    j_rot = np.einsum("mab,mbc->mac", a, -sk)

    rows = 2 * np.arange(m)
    pt_off = 6 * (num_views - 1) + 3 * problem.obs_point
    movable = problem.obs_view > 0
    pose_off = 6 * (problem.obs_view - 1)
    for comp in range(2):
        for k in range(3):
            jac[rows + comp, pt_off + k] = j_pt[:, comp, k]
            jac[rows[movable] + comp, pose_off[movable] + k] = j_rot[movable, comp, k]
            jac[rows[movable] + comp, pose_off[movable] + 3 + k] = a[movable, comp, k]
    return jac


# ---------------------------------------------------------------------------
# angle consistency penalty
# ---------------------------------------------------------------------------

def _segment_angle(points: np.ndarray, c: AngleConstraint):
    u = points[c.seg_a[1]] - points[c.seg_a[0]]
    v = points[c.seg_b[1]] - points[c.seg_b[0]]
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < 1e-9 or nv < 1e-9:
        return None
    cos = float(np.clip(u @ v / (nu * nv), -1.0, 1.0))
    theta = math.acos(cos)
    # dtheta/du and dtheta/dv; undefined for parallel segments
    sin2 = 1.0 - cos * cos
    if sin2 < 1e-12:
        du = np.zeros(3)
        dv = np.zeros(3)
    else:
        inv = -1.0 / math.sqrt(sin2)
        du = inv * (v / (nu * nv) - cos * u / (nu * nu))
        dv = inv * (u / (nu * nv) - cos * v / (nv * nv))
    return theta, du, dv


def angle_penalty(
    points: np.ndarray, constraints: list[AngleConstraint]
) -> tuple[float, np.ndarray]:
    """Sum of squared (angle - reference) terms and its gradient.

    Constraints whose segments collapse below 1e-9 are skipped with a
    warning; parallel segments contribute their penalty value but a
    zero gradient (the angle derivative is undefined there).
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    value = 0.0
    grad = np.zeros_like(points)
    for c in constraints:
        terms = _segment_angle(points, c)
        if terms is None:
            logger.warning("angle constraint %s skipped: degenerate segment", c)
            continue
        theta, du, dv = terms
        diff = theta - c.theta_ref
        value += diff * diff
        grad[c.seg_a[1]] += 2.0 * diff * du
        grad[c.seg_a[0]] -= 2.0 * diff * du
        grad[c.seg_b[1]] += 2.0 * diff * dv
        grad[c.seg_b[0]] -= 2.0 * diff * dv
    return value, grad


def _angle_rows(problem: SbaProblem, state: SbaState, angle_weight: float):
    """Residual rows sqrt(w) * (theta - theta_ref) and their Jacobian."""
    n_c = len(problem.constraints)
    res = np.zeros(n_c)
    jac = np.zeros((n_c, problem.num_params))
    if n_c == 0 or angle_weight == 0.0:
        return res, jac
    sw = math.sqrt(angle_weight)
    off = 6 * (len(problem.views) - 1)
    for row, c in enumerate(problem.constraints):
        terms = _segment_angle(state.points, c)
        if terms is None:
            continue
        theta, du, dv = terms
        res[row] = sw * (theta - c.theta_ref)
        jac[row, off + 3 * c.seg_a[1] : off + 3 * c.seg_a[1] + 3] += sw * du
        jac[row, off + 3 * c.seg_a[0] : off + 3 * c.seg_a[0] + 3] -= sw * du
        jac[row, off + 3 * c.seg_b[1] : off + 3 * c.seg_b[1] + 3] += sw * dv
        jac[row, off + 3 * c.seg_b[0] : off + 3 * c.seg_b[0] + 3] -= sw * dv
    return res, jac


def stacked_system(problem: SbaProblem, state: SbaState, angle_weight: float):
    """Residual vector and Jacobian of the combined objective."""
    e = residuals(problem, state)
    j = jacobian(problem, state)
    if problem.constraints and angle_weight > 0.0:
        ae, aj = _angle_rows(problem, state, angle_weight)
        e = np.concatenate([e, ae])
        j = np.vstack([j, aj])
    return e, j


def total_error(problem: SbaProblem, state: SbaState, angle_weight: float) -> float:
    """Combined objective: squared reprojection norm plus angle penalty."""
    e = residuals(problem, state)
    value = float(e @ e)
    if problem.constraints and angle_weight > 0.0:
        penalty, _ = angle_penalty(state.points, problem.constraints)
        value += angle_weight * penalty
    return value


def rms_reprojection(problem: SbaProblem, state: SbaState) -> float:
    e = residuals(problem, state).reshape(-1, 2)
    return float(np.sqrt(np.mean(np.sum(e * e, axis=1))))


def _solve_damped(e: np.ndarray, j: np.ndarray, lam: float) -> np.ndarray:
    h = j.T @ j
    d = np.diag(h).copy()
    d[d < _DIAG_FLOOR] = _DIAG_FLOOR
    g = j.T @ e
    try:
        delta = np.linalg.solve(h + lam * np.diag(d), g)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    if not np.all(np.isfinite(delta)):
        raise SingularSystem("non-finite step")
    return delta


def lm_step(problem: SbaProblem, lam: float, angle_weight: float = 0.0) -> np.ndarray:
    """One damped step evaluated at the problem's initial estimate.

    Returns the increment ``delta`` of the damped normal equations;
    applying ``x - delta`` reduces the objective for small residual
    curvature. The first pose is excluded from the parameters.
    """
    if lam <= 0.0:
        raise ValidationError("damping factor must be positive")
    state = SbaState.from_problem(problem)
    e, j = stacked_system(problem, state, angle_weight)
    return _solve_damped(e, j, lam)


# ---------------------------------------------------------------------------
# damping policies + solver loop
# ---------------------------------------------------------------------------

class DampingPolicy:
    """Choose the damping factor and accept/reject each proposed step."""

    lambda0: float

    def decide(
        self, iteration: int, current_error: float, proposed_error: float, lam: float
    ) -> tuple[bool, float]:
        raise NotImplementedError


@dataclass
class ConstantLambda(DampingPolicy):
    """Fixed damping; every step is accepted."""

    value: float = 1e-3

    def __post_init__(self):
        if self.value <= 0:
            raise ValidationError("damping factor must be positive")
        self.lambda0 = self.value

    def decide(self, iteration, current_error, proposed_error, lam):
        return True, self.value


@dataclass
class ClassicAdaptive(DampingPolicy):
    """Reject-and-raise on error increase, lower the damping on success."""

    lambda0: float = 1e-3
    increase: float = 10.0
    decrease: float = 10.0

    def __post_init__(self):
        if self.lambda0 <= 0 or self.increase <= 1 or self.decrease <= 1:
            raise ValidationError("bad adaptive damping parameters")

    def decide(self, iteration, current_error, proposed_error, lam):
        if proposed_error < current_error:
            return True, lam / self.decrease
        return False, lam * self.increase


@dataclass
class SbaReport:
    """Traces and final estimates from a fixed-iteration run."""

    errors: np.ndarray
    lambdas: np.ndarray
    accepted: np.ndarray
    initial_error: float
    final_error: float
    initial_rms_px: float
    final_rms_px: float
    views: list[CameraView]
    points: np.ndarray

    def trace_rows(self) -> list[tuple[int, float, float, bool]]:
        return [
            (i, float(self.errors[i]), float(self.lambdas[i]), bool(self.accepted[i]))
            for i in range(len(self.errors))
        ]


def run_sba(
    problem: SbaProblem,
    iterations: int,
    policy: DampingPolicy,
    angle_weight: float = 0.1,
) -> SbaReport:
    """Run exactly ``iterations`` damped steps on the combined objective.

    Rejected steps leave the estimate untouched, so with the adaptive
    policy the recorded error trace is non-increasing. The first
    camera pose is never modified.
    """
    if iterations < 1:
        raise ValidationError("iterations must be >= 1")
    state = SbaState.from_problem(problem)
    err = total_error(problem, state, angle_weight)
    initial_error = err
    initial_rms = rms_reprojection(problem, state)

    errors = np.empty(iterations)
    lambdas = np.empty(iterations)
    accepted = np.zeros(iterations, dtype=bool)
    lam = policy.lambda0
    num_views = len(problem.views)

    for it in range(iterations):
        e, j = stacked_system(problem, state, angle_weight)
        delta = _solve_damped(e, j, lam)
        proposal = apply_delta(state, -delta, num_views)
        proposed_err = total_error(problem, proposal, angle_weight)
        accept, next_lam = policy.decide(it, err, proposed_err, lam)
        if accept:
            state = proposal
            err = proposed_err
        errors[it] = err
        lambdas[it] = lam
        accepted[it] = accept
        lam = next_lam

    return SbaReport(
        errors=errors,
        lambdas=lambdas,
        accepted=accepted,
        initial_error=initial_error,
        final_error=err,
        initial_rms_px=initial_rms,
        final_rms_px=rms_reprojection(problem, state),
        views=state.to_views(problem.views),
        points=state.points,
    )
