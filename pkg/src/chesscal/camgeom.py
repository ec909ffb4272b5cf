"""Pinhole camera geometry: projection, planar homographies and the
closed-form intrinsics solution from multiple board views.

Conventions used throughout the package:

- pixel coordinates are (u, v) = (column, row), origin at the center of
  the top-left pixel;
- world points on the calibration board live in the z = 0 plane with
  coordinates (x, y) = (col * square, row * square);
- rotation matrices map world (board) coordinates into the camera frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "Intrinsics",
    "Extrinsics",
    "Homography",
    "BoardSpec",
    "DegenerateProjectionError",
    "DegeneratePoseError",
    "project_point",
    "project_points",
    "estimate_homography_dlt",
    "intrinsics_from_homographies",
    "extrinsics_from_homography",
    "reprojection_error",
    "rotation_from_axis_angle",
    "axis_angle_from_rotation",
    "nearest_rotation",
]


class DegenerateProjectionError(ValueError):
    """Point at (or behind) the camera plane; perspective division undefined."""


class DegeneratePoseError(ValueError):
    """Pose set does not constrain the intrinsics (B not positive definite)."""


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera matrix parameters, all in pixel units."""

    fx: float
    fy: float
    skew: float
    px: float
    py: float

    def __post_init__(self) -> None:
        vals = (self.fx, self.fy, self.skew, self.px, self.py)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.fx, self.skew, self.px],
                [0.0, self.fy, self.py],
                [0.0, 0.0, 1.0],
            ]
        )

    def to_json(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "skew": self.skew,
            "px": self.px,
            "py": self.py,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Intrinsics":
        return cls(
            fx=float(obj["fx"]),
            fy=float(obj["fy"]),
            skew=float(obj["skew"]),
            px=float(obj["px"]),
            py=float(obj["py"]),
        )


_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Extrinsics:
    """Rigid transform from board frame to camera frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        r = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise ValueError("extrinsics must be finite")
        if np.abs(r.T @ r - np.eye(3)).max() > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation must have determinant +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def to_json(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Extrinsics":
        return cls(np.array(obj["rotation"], dtype=float), np.array(obj["translation"], dtype=float))


@dataclass(frozen=True)
class Homography:
    """3x3 projective map, canonically scaled.

    The stored matrix has unit Frobenius norm and a non-negative (2, 2)
    entry (if that entry is zero the first nonzero entry is made
    positive), so equal maps compare equal entrywise.
    """

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.array(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError("homography must be 3x3")
        if not np.isfinite(m).all():
            raise ValueError("homography must be finite")
        norm = np.linalg.norm(m)
        if norm < 1e-12:
            raise ValueError("homography must be nonzero")
        m = m / norm
        if m[2, 2] < 0:
            m = -m
        elif m[2, 2] == 0:
            flat = m.ravel()
            lead = flat[np.nonzero(flat)[0][0]]
            if lead < 0:
                m = -m
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (n, 2) points through the homography with perspective division."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ph = np.column_stack([pts, np.ones(len(pts))])
        q = ph @ self.matrix.T
        return q[:, :2] / q[:, 2:3]


@dataclass(frozen=True)
class BoardSpec:
    """Chessboard geometry given as interior-corner counts and square size."""

    rows: int
    cols: int
    square_size: float

    def __post_init__(self) -> None:
        if self.rows < 3 or self.cols < 3:
            raise ValueError("board needs at least 3x3 interior corners")
        if self.square_size <= 0:
            raise ValueError("square_size must be positive")

    def world_points(self) -> np.ndarray:
        """Planar lattice coordinates, row-major (rows*cols, 2)."""
        jj, ii = np.meshgrid(np.arange(self.cols), np.arange(self.rows))
        return np.column_stack([jj.ravel(), ii.ravel()]).astype(float) * self.square_size

    def to_json(self) -> dict:
        return {"rows": self.rows, "cols": self.cols, "square_size": self.square_size}

    @classmethod
    def from_json(cls, obj: dict) -> "BoardSpec":
        return cls(int(obj["rows"]), int(obj["cols"]), float(obj["square_size"]))


def project_points(K: Intrinsics, E: Extrinsics, pts: np.ndarray) -> np.ndarray:
    """Project (n, 3) world points to (n, 2) pixels.

    Raises DegenerateProjectionError when any point has depth <= 1e-12.
    """
    p = np.atleast_2d(np.asarray(pts, dtype=float))
    cam = p @ E.rotation.T + E.translation
    depth = cam[:, 2]
    if np.any(depth <= 1e-12):
        raise DegenerateProjectionError("point depth <= 1e-12 in camera frame")
    x = cam[:, 0] / depth
    y = cam[:, 1] / depth
    u = K.fx * x + K.skew * y + K.px
    v = K.fy * y + K.py
    return np.column_stack([u, v])


def project_point(K: Intrinsics, E: Extrinsics, pt: np.ndarray) -> np.ndarray:
    """Project a single world 3-vector to a pixel 2-vector."""
    return project_points(K, E, np.asarray(pt, dtype=float).reshape(1, 3))[0]


def _hartley_normalization(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Similarity transform taking the centroid to the origin and the mean
    distance from it to sqrt(2)."""
    centroid = pts.mean(axis=0)
    d = np.linalg.norm(pts - centroid, axis=1).mean()
    s = np.sqrt(2.0) / d if d > 1e-12 else 1.0
    T = np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])
    ph = np.column_stack([pts, np.ones(len(pts))])
    q = ph @ T.T
    return q[:, :2], T


def estimate_homography_dlt(world: np.ndarray, image: np.ndarray) -> Homography:
    """Direct linear transform with isotropic normalization on both sides.

    `world` holds planar board coordinates, `image` the matching pixels.
    Requires at least 4 correspondences in general position.
    """
    wp = np.atleast_2d(np.asarray(world, dtype=float))
    ip = np.atleast_2d(np.asarray(image, dtype=float))
    if wp.shape != ip.shape or wp.shape[1] != 2:
        raise ValueError("world and image must both be (n, 2)")
    n = len(wp)
    if n < 4:
        raise ValueError("homography estimation needs >= 4 correspondences")
    wn, Tw = _hartley_normalization(wp)
    im, Ti = _hartley_normalization(ip)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:2] = -wn
    A[0::2, 2] = -1.0
    A[0::2, 6:8] = im[:, 0:1] * wn
    A[0::2, 8] = im[:, 0]
    A[1::2, 3:5] = -wn
    A[1::2, 5] = -1.0
    A[1::2, 6:8] = im[:, 1:2] * wn
    A[1::2, 8] = im[:, 1]
    _, s, vt = np.linalg.svd(A)
    if s[-2] < 1e-10 * s[0]:
        raise ValueError("degenerate correspondence set (collinear points)")
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Ti) @ Hn @ Tw
    return Homography(H)


def _vij(h: np.ndarray, i: int, j: int) -> np.ndarray:
    return np.array(
        [
            h[0, i] * h[0, j],
            h[0, i] * h[1, j] + h[1, i] * h[0, j],
            h[1, i] * h[1, j],
            h[2, i] * h[0, j] + h[0, i] * h[2, j],
            h[2, i] * h[1, j] + h[1, i] * h[2, j],
            h[2, i] * h[2, j],
        ]
    )


def intrinsics_from_homographies(
    hs: Sequence[Homography], fix_skew: bool = False
) -> Intrinsics:
    """Closed-form intrinsics from plane-to-image homographies.

    Each homography contributes two linear constraints on the absolute
    conic image B = K^-T K^-1; the parameters are read off the null
    vector of the stacked system. With `fix_skew` the off-diagonal B
    entry is eliminated, which permits as few as 2 views.

    Raises DegeneratePoseError when the views fail to determine a
    positive definite B (e.g. repeated or parallel-plane poses).
    """
    m = len(hs)
    minimum = 2 if fix_skew else 3
    if m < minimum:
        raise ValueError(f"need >= {minimum} homographies, got {m}")
    V = np.zeros((2 * m, 6))
    for k, hom in enumerate(hs):
        h = hom.matrix
        V[2 * k] = _vij(h, 0, 1)
        V[2 * k + 1] = _vij(h, 0, 0) - _vij(h, 1, 1)
    if fix_skew:
        V = np.delete(V, 1, axis=1)
    _, s, vt = np.linalg.svd(V)
    rank = int((s > 1e-9 * s[0]).sum())
    if rank < V.shape[1] - 1:
        raise DegeneratePoseError("views do not constrain the intrinsics (repeated or degenerate poses)")
    b = vt[-1]
    if fix_skew:
        b = np.insert(b, 1, 0.0)
    B = np.array([[b[0], b[1], b[3]], [b[1], b[2], b[4]], [b[3], b[4], b[5]]])
    if B[0, 0] < 0 or B[2, 2] < 0:
        B = -B
    try:
        np.linalg.cholesky(B)
    except np.linalg.LinAlgError:
        raise DegeneratePoseError("view set leaves the conic image indefinite") from None
    b11, b12, b22, b13, b23, b33 = B[0, 0], B[0, 1], B[1, 1], B[0, 2], B[1, 2], B[2, 2]
    denom = b11 * b22 - b12 * b12
    v0 = (b12 * b13 - b11 * b23) / denom
    lam = b33 - (b13 * b13 + v0 * (b12 * b13 - b11 * b23)) / b11
    if lam <= 0 or lam / b11 <= 0 or lam * b11 / denom <= 0:
        raise DegeneratePoseError("closed-form solution is not a real camera")
    alpha = np.sqrt(lam / b11)
    beta = np.sqrt(lam * b11 / denom)
    gamma = 0.0 if fix_skew else -b12 * alpha * alpha * beta / lam
    u0 = gamma * v0 / beta - b13 * alpha * alpha / lam
    return Intrinsics(fx=float(alpha), fy=float(beta), skew=float(gamma), px=float(u0), py=float(v0))


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Closest orthonormal matrix (Frobenius norm) with determinant +1."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def extrinsics_from_homography(K: Intrinsics, H: Homography) -> Extrinsics:
    """Recover the board pose from its image homography under known K.

    The first two rotation columns come from K^-1 [h1 h2] scaled by
    1/||K^-1 h1||; the result is projected onto the nearest rotation.
    The sign is chosen so the board sits in front of the camera.
    """
    kinv = np.linalg.inv(K.matrix)
    h = H.matrix
    r1 = kinv @ h[:, 0]
    n1 = np.linalg.norm(r1)
    if n1 < 1e-12:
        raise ValueError("degenerate homography: K^-1 h1 vanishes")
    lam = 1.0 / n1
    r1 = lam * r1
    r2 = lam * (kinv @ h[:, 1])
    t = lam * (kinv @ h[:, 2])
    if t[2] < 0:
        r1, r2, t = -r1, -r2, -t
    r3 = np.cross(r1, r2)
    R = nearest_rotation(np.column_stack([r1, r2, r3]))
    return Extrinsics(R, t)


def reprojection_error(
    K: Intrinsics,
    extrinsics: Sequence[Extrinsics],
    grids: Sequence,
    board: BoardSpec,
    mode: str = "mean_euclidean",
) -> float:
    """Aggregate reprojection discrepancy over all valid observed corners.

    ``mean_euclidean`` is the mean Euclidean distance in pixels;
    ``eq10_literal`` is the mean of squared distances (px^2). Invalid
    grid cells are excluded and the averaging count adjusted.
    """
    if mode not in ("mean_euclidean", "eq10_literal"):
        raise ValueError(f"unknown mode {mode!r}")
    if len(extrinsics) != len(grids):
        raise ValueError("one extrinsics entry per grid required")
    world = board.world_points()
    total = 0.0
    count = 0
    for E, grid in zip(extrinsics, grids):
        valid = np.asarray(grid.valid).ravel()
        if not valid.any():
            continue
        pts3 = np.column_stack([world[valid], np.zeros(valid.sum())])
        proj = project_points(K, E, pts3)
        obs = np.asarray(grid.points, dtype=float).reshape(-1, 2)[valid]
        d2 = ((obs - proj) ** 2).sum(axis=1)
        total += d2.sum() if mode == "eq10_literal" else np.sqrt(d2).sum()
        count += int(valid.sum())
    if count == 0:
        raise ValueError("no valid corners to evaluate")
    return total / count


def rotation_from_axis_angle(w: np.ndarray) -> np.ndarray:
    """Rodrigues' rotation formula; w encodes axis * angle."""
    w = np.asarray(w, dtype=float).reshape(3)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3) + _skew(w)
    k = w / theta
    kx = _skew(k)
    return np.eye(3) + np.sin(theta) * kx + (1.0 - np.cos(theta)) * (kx @ kx)


def axis_angle_from_rotation(R: np.ndarray) -> np.ndarray:
    """Inverse of rotation_from_axis_angle; the angle is in [0, pi]."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-12:
        return np.zeros(3)
    if np.pi - theta < 1e-6:
        # near half-turn: ratio form degenerates, read the axis off R + I
        a = np.sqrt(np.maximum(np.diag(R) + 1.0, 0.0) / 2.0)
        i = int(np.argmax(a))
        axis = np.empty(3)
        axis[i] = a[i]
        for j in range(3):
            if j != i:
                axis[j] = (R[i, j] + R[j, i]) / (4.0 * a[i])
        axis = axis / np.linalg.norm(axis)
        return axis * theta
    axis = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return axis * (theta / (2.0 * np.sin(theta)))


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )
