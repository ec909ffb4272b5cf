import numpy as np
import pytest

from chesscal.camgeom import BoardSpec, Extrinsics, Intrinsics, project_points
from chesscal.gridorder import CornerGrid, PROVENANCE_DETECTED, collineation_refine, sort_corners
from chesscal.heatmap import (
    GaussianFitError,
    detect_peaks,
    fit_gaussian_surface,
    reject_outliers,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_intrinsics(rng):
    """Intrinsics drawn from the synthetic dataset ranges."""
    return Intrinsics(
        fx=float(rng.uniform(100, 300)),
        fy=float(rng.uniform(100, 300)),
        skew=float(rng.uniform(1, 5)),
        px=float(rng.uniform(120, 360)),
        py=float(rng.uniform(120, 360)),
    )


def random_pose(rng, tilt_max_deg=40.0, z_range=(9.0, 16.0), board_center=(5.0, 3.5)):
    """Generic board pose facing the camera; rotation pivots about the
    board center so no corner swings behind the camera."""
    tilt = rng.uniform(0, np.deg2rad(tilt_max_deg))
    azim = rng.uniform(0, 2 * np.pi)
    roll = rng.uniform(-0.4, 0.4)
    cx, sx = np.cos(tilt * np.cos(azim)), np.sin(tilt * np.cos(azim))
    cy, sy = np.cos(tilt * np.sin(azim)), np.sin(tilt * np.sin(azim))
    cz, sz = np.cos(roll), np.sin(roll)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    R = Rz @ Ry @ Rx
    center = np.array([*board_center, 0.0])
    shift = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(*z_range)])
    t = shift - R @ center
    return Extrinsics(R, t)


def exact_grid(K, E, board, noise=0.0, rng=None):
    """CornerGrid of exact (optionally noise-perturbed) projections."""
    world = board.world_points()
    pts = project_points(K, E, np.column_stack([world, np.zeros(len(world))]))
    if noise > 0:
        pts = pts + rng.normal(scale=noise, size=pts.shape)
    pts = pts.reshape(board.rows, board.cols, 2)
    valid = np.ones((board.rows, board.cols), dtype=bool)
    prov = np.full((board.rows, board.cols), PROVENANCE_DETECTED, dtype="<U9")
    return CornerGrid(board.rows, board.cols, pts, valid, prov)


def synthetic_views(seed, n_views, board=None, noise=0.0, intrinsics=None):
    """Shared camera, n generic poses, exact or noisy corner grids."""
    rng = np.random.default_rng(seed)
    board = board or BoardSpec(8, 11, 1.0)
    K = intrinsics or random_intrinsics(rng)
    center = tuple(board.world_points().mean(axis=0))
    grids, poses = [], []
    for _ in range(n_views):
        E = random_pose(rng, board_center=center)
        poses.append(E)
        grids.append(exact_grid(K, E, board, noise=noise, rng=rng))
    return K, poses, grids, board


def heatmap_to_grid(
    heat,
    board,
    threshold=0.3,
    min_separation=6.0,
    window=7,
    sigma_ref=1.5,
    tau=2.0,
    residual_max=0.05,
):
    """Detection stages: peaks -> Gaussian fits -> shape rejection ->
    lattice sort -> collineation refinement."""
    peaks = detect_peaks(heat, threshold, min_separation)[: board.rows * board.cols]
    obs = []
    for p in peaks:
        try:
            obs.append(fit_gaussian_surface(heat, p, window))
        except GaussianFitError:
            continue
    kept = reject_outliers(obs, sigma_ref=sigma_ref, tau=tau, residual_max=residual_max)
    mus = np.array([o.mu for o in kept if o.status == "inlier"])
    return collineation_refine(sort_corners(mus, board.rows, board.cols))
