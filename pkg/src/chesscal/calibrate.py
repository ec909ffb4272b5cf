"""Full-parameter estimation from ordered corner grids.

The closed-form stage estimates per-view homographies, shared
intrinsics and per-view poses; the refinement stage jointly minimizes
the mean squared reprojection error with a damped least-squares
iteration driven by an analytic Jacobian (rotations are parameterized
as axis-angle so orthonormality is never lost). On top sits an
image-level random-consensus loop: calibrate on random view subsets,
score every view by its own reprojection error, and keep the model
that explains enough whole images.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .camgeom import (
    BoardSpec,
    Extrinsics,
    Intrinsics,
    axis_angle_from_rotation,
    estimate_homography_dlt,
    extrinsics_from_homography,
    intrinsics_from_homographies,
    reprojection_error,
    rotation_from_axis_angle,
)
from .gridorder import CornerGrid

__all__ = [
    "CalibrationResult",
    "RansacConfig",
    "RansacFailure",
    "IntrinsicsMetrics",
    "calibrate_zhang",
    "refine_parameters",
    "ransac_calibrate",
    "intrinsics_metrics",
    "grid_homography",
    "pack_parameters",
    "unpack_parameters",
    "reprojection_residuals",
    "reprojection_jacobian",
    "result_to_json",
    "result_from_json",
]

_N_INTRINSIC = 5  # fx, fy, skew, px, py


class RansacFailure(RuntimeError):
    """No trial produced an acceptable consensus; carries diagnostics."""

    def __init__(self, message: str, trials: int, best_inliers: int):
        super().__init__(f"{message} (trials={trials}, best inlier count={best_inliers})")
        self.trials = trials
        self.best_inliers = best_inliers


@dataclass(frozen=True)
class CalibrationResult:
    intrinsics: Intrinsics
    extrinsics: tuple[Extrinsics, ...]
    rpe: float
    per_image_rpe: tuple[float, ...]
    inlier_images: tuple[int, ...]
    converged: bool
    iterations: int

    def __post_init__(self) -> None:
        if len(self.per_image_rpe) != len(self.extrinsics):
            raise ValueError("per-image statistics must match the image count")


@dataclass(frozen=True)
class RansacConfig:
    subset_size: int = 5
    rpe_threshold: float = 1.0
    min_inlier_fraction: float = 0.8
    max_trials: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if self.subset_size < 3:
            raise ValueError("subset_size must be >= 3")
        if not 0 < self.min_inlier_fraction <= 1:
            raise ValueError("min_inlier_fraction must lie in (0, 1]")
        if self.rpe_threshold <= 0:
            raise ValueError("rpe_threshold must be positive")
        if self.max_trials < 1:
            raise ValueError("max_trials must be >= 1")

    def to_json(self) -> dict:
        return {
            "subset_size": self.subset_size,
            "rpe_threshold": self.rpe_threshold,
            "min_inlier_fraction": self.min_inlier_fraction,
            "max_trials": self.max_trials,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RansacConfig":
        return cls(
            subset_size=int(obj.get("subset_size", 5)),
            rpe_threshold=float(obj.get("rpe_threshold", 1.0)),
            min_inlier_fraction=float(obj.get("min_inlier_fraction", 0.8)),
            max_trials=int(obj.get("max_trials", 50)),
            seed=int(obj.get("seed", 0)),
        )


class IntrinsicsMetrics(NamedTuple):
    e_fl: float
    e_pp: float
    e_ip: float


def intrinsics_metrics(gt: Intrinsics, est: Intrinsics) -> IntrinsicsMetrics:
    """L1 focal-length and principal-point errors and their average."""
    e_fl = abs(gt.fx - est.fx) + abs(gt.fy - est.fy)
    e_pp = abs(gt.px - est.px) + abs(gt.py - est.py)
    return IntrinsicsMetrics(e_fl, e_pp, (e_fl + e_pp) / 2.0)


def _grid_correspondences(grid: CornerGrid, board: BoardSpec) -> tuple[np.ndarray, np.ndarray]:
    world = board.world_points().reshape(board.rows, board.cols, 2)
    sel = grid.valid
    return world[sel], grid.points[sel]


def grid_homography(grid: CornerGrid, board: BoardSpec):
    """Board-to-image homography from a grid's valid corners."""
    world, image = _grid_correspondences(grid, board)
    if len(world) < 4:
        raise ValueError("grid has fewer than 4 valid corners")
    rows_used = np.unique(np.nonzero(grid.valid)[0])
    cols_used = np.unique(np.nonzero(grid.valid)[1])
    if len(rows_used) < 2 or len(cols_used) < 2:
        raise ValueError("valid corners must span at least 2 rows and 2 columns")
    return estimate_homography_dlt(world, image)


def _check_grids(grids: Sequence[CornerGrid], board: BoardSpec) -> None:
    for idx, g in enumerate(grids):
        if g.rows != board.rows or g.cols != board.cols:
            raise ValueError(f"grid {idx} does not match the board dimensions")


def calibrate_zhang(
    grids: Sequence[CornerGrid],
    board: BoardSpec,
    refine: bool = True,
    fix_skew: bool = False,
) -> CalibrationResult:
    """Closed-form intrinsics and poses from >= 3 views, optionally
    polished by the joint reprojection refinement."""
    if len(grids) < 3:
        raise ValueError("calibration needs >= 3 corner grids")
    _check_grids(grids, board)
    homographies = [grid_homography(g, board) for g in grids]
    K = intrinsics_from_homographies(homographies, fix_skew=fix_skew)
    extrinsics = tuple(extrinsics_from_homography(K, H) for H in homographies)
    result = _result_with_stats(K, extrinsics, grids, board, converged=True, iterations=0)
    if refine:
        result = refine_parameters(result, grids, board)
    return result


def _result_with_stats(
    K: Intrinsics,
    extrinsics: Sequence[Extrinsics],
    grids: Sequence[CornerGrid],
    board: BoardSpec,
    converged: bool,
    iterations: int,
    inliers: Sequence[int] | None = None,
) -> CalibrationResult:
    per_image = tuple(
        reprojection_error(K, [E], [g], board, mode="mean_euclidean")
        for E, g in zip(extrinsics, grids)
    )
    idx = tuple(range(len(grids))) if inliers is None else tuple(inliers)
    rpe = reprojection_error(K, [extrinsics[i] for i in idx], [grids[i] for i in idx], board)
    return CalibrationResult(
        intrinsics=K,
        extrinsics=tuple(extrinsics),
        rpe=rpe,
        per_image_rpe=per_image,
        inlier_images=idx,
        converged=converged,
        iterations=iterations,
    )


# ---------------------------------------------------------------------------
# joint refinement


def pack_parameters(K: Intrinsics, extrinsics: Sequence[Extrinsics]) -> np.ndarray:
    """Flatten to [fx, fy, skew, px, py, (axis-angle, translation) per view]."""
    parts = [np.array([K.fx, K.fy, K.skew, K.px, K.py])]
    for E in extrinsics:
        parts.append(axis_angle_from_rotation(E.rotation))
        parts.append(E.translation)
    return np.concatenate(parts)


def unpack_parameters(p: np.ndarray, n_views: int) -> tuple[Intrinsics, list[Extrinsics]]:
    K = Intrinsics(fx=float(p[0]), fy=float(p[1]), skew=float(p[2]), px=float(p[3]), py=float(p[4]))
    extrinsics = []
    for v in range(n_views):
        base = _N_INTRINSIC + 6 * v
        R = rotation_from_axis_angle(p[base : base + 3])
        extrinsics.append(Extrinsics(R, p[base + 3 : base + 6]))
    return K, extrinsics


def _right_jacobian(w: np.ndarray) -> np.ndarray:
    """Right Jacobian of the axis-angle exponential map:
    Jr(w) = I - (1-cos t)/t^2 [w]x + (t - sin t)/t^3 [w]x^2, giving the
    per-point rotation derivative d(R p) = -R [p]x Jr(w) dw.
    """
    theta = np.linalg.norm(w)
    wx = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    if theta < 1e-8:
        return np.eye(3) - 0.5 * wx + (wx @ wx) / 6.0
    t2 = theta * theta
    return (
        np.eye(3)
        - ((1.0 - np.cos(theta)) / t2) * wx
        + ((theta - np.sin(theta)) / (t2 * theta)) * (wx @ wx)
    )


def _view_data(grids: Sequence[CornerGrid], board: BoardSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per view: (n, 3) world points of the valid cells and their (n, 2)
    pixel observations, extracted once so the optimizer loop stays lean."""
    world = board.world_points()
    views = []
    for grid in grids:
        sel = grid.valid.ravel()
        w2 = world[sel]
        views.append(
            (np.column_stack([w2, np.zeros(len(w2))]), grid.points.reshape(-1, 2)[sel])
        )
    return views


def _residual_blocks(
    p: np.ndarray,
    views: Sequence[tuple[np.ndarray, np.ndarray]],
    want_jacobian: bool,
) -> tuple[np.ndarray, np.ndarray | None]:
    fx, fy, skew, ppx, ppy = p[:_N_INTRINSIC]
    res_parts = []
    jac_parts = []
    n_params = len(p)
    for v, (pts3, obs) in enumerate(views):
        base = _N_INTRINSIC + 6 * v
        w_axis = p[base : base + 3]
        R = rotation_from_axis_angle(w_axis)
        t = p[base + 3 : base + 6]
        cam = pts3 @ R.T + t
        X, Y, Z = cam[:, 0], cam[:, 1], cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            x = X / Z
            y = Y / Z
        u = fx * x + skew * y + ppx
        vv = fy * y + ppy
        res = np.empty(2 * len(pts3))
        res[0::2] = obs[:, 0] - u
        res[1::2] = obs[:, 1] - vv
        res_parts.append(res)
        if not want_jacobian:
            continue
        n = len(pts3)
        J = np.zeros((2 * n, n_params))
        # intrinsic block
        J[0::2, 0] = -x
        J[0::2, 2] = -y
        J[0::2, 3] = -1.0
        J[1::2, 1] = -y
        J[1::2, 4] = -1.0
        # projection derivative wrt camera-frame point
        dx = np.zeros((n, 3))
        dy = np.zeros((n, 3))
        with np.errstate(divide="ignore", invalid="ignore"):
            dx[:, 0] = 1.0 / Z
            dx[:, 2] = -X / (Z * Z)
            dy[:, 1] = 1.0 / Z
            dy[:, 2] = -Y / (Z * Z)
        du = fx * dx + skew * dy
        dv = fy * dy
        # v^T (-R [p]x Jr) = (p x (R^T v))^T Jr, so the pose block needs
        # only cross products and one small matmul per view
        Jr = _right_jacobian(w_axis)
        J[0::2, base : base + 3] = -np.cross(pts3, du @ R) @ Jr
        J[1::2, base : base + 3] = -np.cross(pts3, dv @ R) @ Jr
        J[0::2, base + 3 : base + 6] = -du
        J[1::2, base + 3 : base + 6] = -dv
        jac_parts.append(J)
    residuals = np.concatenate(res_parts)
    jacobian = np.vstack(jac_parts) if want_jacobian else None
    return residuals, jacobian


def reprojection_residuals(p: np.ndarray, grids: Sequence[CornerGrid], board: BoardSpec) -> np.ndarray:
    """Stacked (observed - projected) residuals, 2 per valid corner."""
    res, _ = _residual_blocks(p, _view_data(grids, board), want_jacobian=False)
    return res


def reprojection_jacobian(p: np.ndarray, grids: Sequence[CornerGrid], board: BoardSpec) -> np.ndarray:
    """Analytic derivative of reprojection_residuals wrt the parameters."""
    _, jac = _residual_blocks(p, _view_data(grids, board), want_jacobian=True)
    return jac


def refine_parameters(
    initial: CalibrationResult,
    grids: Sequence[CornerGrid],
    board: BoardSpec,
    max_iterations: int = 100,
    gradient_tol: float = 1e-8,
    step_tol: float = 1e-12,
) -> CalibrationResult:
    """Damped least-squares polish of intrinsics and all poses.

    Damping is multiplicative (x10 on a rejected step, /10 on an
    accepted one, starting at 1e-3) on the scaled normal equations; the
    mean squared reprojection objective never increases across accepted
    steps. Convergence is declared when the objective gradient's
    infinity norm falls below `gradient_tol` or the step norm below
    `step_tol`; running out of iterations returns the best iterate
    flagged unconverged.
    """
    _check_grids(grids, board)
    views = _view_data(grids, board)
    p = pack_parameters(initial.intrinsics, initial.extrinsics)
    r, _ = _residual_blocks(p, views, want_jacobian=False)
    if not np.isfinite(r).all():
        raise ValueError("objective is not finite at the starting point")
    _, J = _residual_blocks(p, views, want_jacobian=True)
    n_res = len(r)
    cost = float(r @ r)
    lam = 1e-3
    converged = False
    accepted = 0
    for _ in range(max_iterations):
        g = (2.0 / n_res) * (J.T @ r)
        if np.abs(g).max() < gradient_tol:
            converged = True
            break
        JtJ = J.T @ J
        diag = np.maximum(np.diag(JtJ), 1e-12)
        rhs = -(J.T @ r)
        step = None
        for _ in range(25):
            try:
                step = np.linalg.solve(JtJ + lam * np.diag(diag), rhs)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            r_new, J_new = _residual_blocks(p + step, views, want_jacobian=True)
            cost_new = float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new < cost:
                p = p + step
                r, J = r_new, J_new
                cost = cost_new
                lam = max(lam / 10.0, 1e-15)
                accepted += 1
                break
            lam *= 10.0
            step = None
        if step is None:
            converged = True  # no descent direction left at any damping
            break
        if np.linalg.norm(step) < step_tol:
            converged = True
            break
    K, extrinsics = unpack_parameters(p, len(grids))
    return _result_with_stats(
        K, extrinsics, grids, board, converged=converged, iterations=accepted,
        inliers=initial.inlier_images if initial.inlier_images else None,
    )


# ---------------------------------------------------------------------------
# image-level consensus


def ransac_calibrate(
    grids: Sequence[CornerGrid],
    board: BoardSpec,
    cfg: RansacConfig,
    refine: bool = True,
    refine_trials: bool = False,
) -> CalibrationResult:
    """Random-subset calibration with whole-image consensus.

    Each trial calibrates on a random view subset, re-solves every
    view's pose under the candidate intrinsics from its own homography,
    and scores the view by its mean reprojection error. Views under the
    threshold are inliers; a trial with enough of them ends the search.
    Otherwise the trial with the most inliers (ties: lowest mean inlier
    error) wins. The returned model is refit on all inlier views.
    Deterministic for a given seed: trial t draws from a (seed, t)
    stream.

    `refine` controls the final consensus fit; `refine_trials` the
    per-trial candidates (closed form alone classifies whole images
    reliably at far lower cost, so trials default to it).
    """
    n = len(grids)
    if n < cfg.subset_size:
        raise ValueError(f"need >= {cfg.subset_size} images, got {n}")
    _check_grids(grids, board)
    homographies = [grid_homography(g, board) for g in grids]
    need = max(int(np.ceil(cfg.min_inlier_fraction * n)), cfg.subset_size)

    best_inliers: list[int] = []
    best_score = np.inf
    trials_run = 0
    seen: dict[tuple[int, ...], tuple[list[int], float]] = {}
    for trial in range(cfg.max_trials):
        trials_run = trial + 1
        rng = np.random.default_rng([cfg.seed, trial])
        subset = tuple(sorted(rng.choice(n, size=cfg.subset_size, replace=False).tolist()))
        if subset in seen:
            inliers, score = seen[subset]
        else:
            try:
                if refine_trials:
                    K = calibrate_zhang([grids[i] for i in subset], board, refine=True).intrinsics
                else:
                    # closed form on the cached subset homographies; same
                    # values calibrate_zhang(refine=False) would produce
                    K = intrinsics_from_homographies([homographies[i] for i in subset])
            except (ValueError, np.linalg.LinAlgError):
                seen[subset] = ([], np.inf)
                continue
            per_image = []
            for i in range(n):
                try:
                    E = extrinsics_from_homography(K, homographies[i])
                    per_image.append(reprojection_error(K, [E], [grids[i]], board))
                except ValueError:
                    per_image.append(np.inf)
            inliers = [i for i, e in enumerate(per_image) if e < cfg.rpe_threshold]
            score = float(np.mean([per_image[i] for i in inliers])) if inliers else np.inf
            seen[subset] = (inliers, score)
        if len(inliers) > len(best_inliers) or (
            len(inliers) == len(best_inliers) and score < best_score
        ):
            best_inliers, best_score = inliers, score
        if len(inliers) >= need:
            break
    if len(best_inliers) < max(cfg.subset_size, 3):
        raise RansacFailure("no consensus reached", trials_run, len(best_inliers))
    final = calibrate_zhang([grids[i] for i in best_inliers], board, refine=refine)
    extrinsics = [
        extrinsics_from_homography(final.intrinsics, homographies[i]) for i in range(n)
    ]
    # poses for inlier views come from the joint refinement, the rest
    # from their own homographies under the final intrinsics
    pose_map = dict(zip(best_inliers, final.extrinsics))
    extrinsics = [pose_map.get(i, extrinsics[i]) for i in range(n)]
    result = _result_with_stats(
        final.intrinsics,
        extrinsics,
        grids,
        board,
        converged=final.converged,
        iterations=final.iterations,
        inliers=best_inliers,
    )
    return result


# ---------------------------------------------------------------------------
# serialization


def result_to_json(result: CalibrationResult, seed: int | None = None) -> dict:
    obj = {
        "intrinsics": result.intrinsics.to_json(),
        "extrinsics": [E.to_json() for E in result.extrinsics],
        "rpe": result.rpe,
        "per_image_rpe": list(result.per_image_rpe),
        "inlier_images": list(result.inlier_images),
        "converged": result.converged,
        "iterations": result.iterations,
    }
    if seed is not None:
        obj["seed"] = seed
    return obj


def result_from_json(obj: dict) -> CalibrationResult:
    return CalibrationResult(
        intrinsics=Intrinsics.from_json(obj["intrinsics"]),
        extrinsics=tuple(Extrinsics.from_json(e) for e in obj["extrinsics"]),
        rpe=float(obj["rpe"]),
        per_image_rpe=tuple(float(x) for x in obj["per_image_rpe"]),
        inlier_images=tuple(int(i) for i in obj["inlier_images"]),
        converged=bool(obj["converged"]),
        iterations=int(obj["iterations"]),
    )
