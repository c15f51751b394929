import numpy as np
import pytest

from rootskel.geometry import CameraView, Intrinsics, Pose, look_at_pose, rotation_from_axis_angle


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    w = rng.normal(size=3)
    w = w / max(np.linalg.norm(w), 1e-9) * rng.uniform(0.0, np.pi)
    return rotation_from_axis_angle(w)


def make_view(
    center,
    target=(0.0, 0.0, 0.0),
    fx=500.0,
    fy=500.0,
    cx=256.0,
    cy=256.0,
    width=512,
    height=512,
) -> CameraView:
    pose = look_at_pose(np.asarray(center, dtype=float), np.asarray(target, dtype=float))
    return CameraView(Intrinsics(fx, fy, cx, cy), pose, width, height)


def random_view(rng: np.random.Generator, target=(0.0, 0.0, 0.0), radius=(4.0, 8.0)) -> CameraView:
    """Camera at a random position on a shell, looking at ``target``."""
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    center = np.asarray(target, dtype=float) + direction * rng.uniform(*radius)
    return make_view(center, target=target)


def random_front_point(rng: np.random.Generator, view: CameraView, depth=(1.0, 6.0)) -> np.ndarray:
    """World point strictly in front of ``view`` near its optical axis."""
    z = rng.uniform(*depth)
    x = rng.uniform(-0.3, 0.3) * z
    y = rng.uniform(-0.3, 0.3) * z
    cam_point = np.array([x, y, z])
    r, t = view.pose.rotation, view.pose.translation
    return r.T @ (cam_point - t)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)


def make_sba_problem(
    rng: np.random.Generator,
    n_views: int = 4,
    n_points: int = 12,
    noise_px: float = 0.0,
    pose_rot_deg: float = 0.0,
    pose_trans_frac: float = 0.0,
    point_jitter_frac: float = 0.0,
    n_constraints: int = 0,
):
    """Random refinement problem with exact observations of a ground truth.

    Returns (problem, gt_points). The problem's initial poses/points are
    the ground truth perturbed by the requested amounts; observations are
    exact projections of the ground truth plus optional pixel noise.
    """
    from rootskel.bundle_adjustment import AngleConstraint, SbaProblem
    from rootskel.geometry import Pose, project, rotation_from_axis_angle

    scene_scale = 3.0
    gt_points = rng.uniform(-scene_scale / 2, scene_scale / 2, size=(n_points, 3))
    views = [random_view(rng, radius=(8.0, 12.0)) for _ in range(n_views)]

    obs_view, obs_point, obs_pixel = [], [], []
    for i, view in enumerate(views):
        for j in range(n_points):
            px = project(view, gt_points[j])
            obs_view.append(i)
            obs_point.append(j)
            obs_pixel.append(px + rng.normal(scale=noise_px, size=2))

    init_views = []
    for i, view in enumerate(views):
        pose = view.pose
        if i > 0 and (pose_rot_deg > 0 or pose_trans_frac > 0):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            dr = rotation_from_axis_angle(axis * np.radians(pose_rot_deg))
            dt = rng.normal(size=3)
            dt *= pose_trans_frac * scene_scale / max(np.linalg.norm(dt), 1e-12)
            pose = Pose(dr @ pose.rotation, pose.translation + dt)
        init_views.append(CameraView(view.intrinsics, pose, view.width, view.height))

    init_points = gt_points + rng.normal(
        scale=point_jitter_frac * scene_scale, size=gt_points.shape
    )

    constraints = []
    for _ in range(n_constraints):
        idx = rng.choice(n_points, size=4, replace=False)
        constraints.append(
            AngleConstraint(
                seg_a=(int(idx[0]), int(idx[1])),
                seg_b=(int(idx[2]), int(idx[3])),
                theta_ref=float(rng.uniform(0.3, np.pi - 0.3)),
            )
        )

    problem = SbaProblem(
        views=init_views,
        points=init_points,
        obs_view=np.array(obs_view),
        obs_point=np.array(obs_point),
        obs_pixel=np.array(obs_pixel),
        constraints=constraints,
    )
    return problem, gt_points


def fd_jacobian(problem, angle_weight=0.0, step=1e-6):
    """Central-difference Jacobian of the (stacked) residual vector."""
    from rootskel.bundle_adjustment import SbaState, apply_delta, stacked_system

    base = SbaState.from_problem(problem)
    n = problem.num_params
    num_views = len(problem.views)

    def evaluate(delta):
        state = apply_delta(base, delta, num_views)
        e, _ = stacked_system(problem, state, angle_weight)
        return e

    m = len(evaluate(np.zeros(n)))
    jac = np.empty((m, n))
    for k in range(n):
        d = np.zeros(n)
        d[k] = step
        jac[:, k] = (evaluate(d) - evaluate(-d)) / (2 * step)
    return jac
