"""Ordering detected corners into a board lattice and straightening it.

`sort_corners` assigns unordered (already distortion-free) corner
detections to row/column lattice indices via the board's four outer
corners; `collineation_refine` replaces every lattice point by the
intersection of its total-least-squares row and column lines, which
both denoises detections and fills in missing cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camgeom import estimate_homography_dlt

__all__ = [
    "Line2D",
    "CornerGrid",
    "AmbiguousAssignmentError",
    "ExtremePointError",
    "ParallelLinesError",
    "fit_line_tls",
    "line_residuals",
    "intersect_lines",
    "sort_corners",
    "collineation_refine",
]

PROVENANCE_DETECTED = "detected"
PROVENANCE_RECOVERED = "recovered"

# A point further than this (in lattice cell units, per axis) from an
# integer cell after rectification is dropped as unassignable.
_CELL_TOLERANCE = 0.3
# Neighbors used for edge fitting must lie within this angle of the
# hull edge direction at the extreme point.
_EDGE_ANGLE_TOL = np.deg2rad(15.0)
# More unassignable points than this fraction signals wrong extremes
# (typically a missing outer corner).
_UNASSIGNED_FRACTION_LIMIT = 0.25


class AmbiguousAssignmentError(ValueError):
    """Two detections fell into the same lattice cell."""


class ExtremePointError(ValueError):
    """The four board corners could not be located consistently."""


class ParallelLinesError(ValueError):
    """Lines do not meet in a unique point."""


@dataclass(frozen=True)
class Line2D:
    """Line in Hessian normal form n . p = d with unit normal.

    The sign is canonicalized (ny > 0, or ny == 0 and nx > 0) so equal
    lines compare equal.
    """

    nx: float
    ny: float
    d: float

    def __post_init__(self) -> None:
        norm = np.hypot(self.nx, self.ny)
        if not np.isfinite(norm) or abs(norm - 1.0) > 1e-12:
            raise ValueError("normal must be a unit vector")

    @classmethod
    def from_normal(cls, n: np.ndarray, d: float) -> "Line2D":
        n = np.asarray(n, dtype=float)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            raise ValueError("zero normal")
        n = n / norm
        d = d / norm
        if n[1] < 0 or (n[1] == 0 and n[0] < 0):
            n, d = -n, -d
        return cls(float(n[0]), float(n[1]), float(d))

    @property
    def normal(self) -> np.ndarray:
        return np.array([self.nx, self.ny])


def fit_line_tls(points: np.ndarray) -> Line2D:
    """Orthogonal-regression line: centroid plus the scatter matrix's
    smallest-eigenvalue direction as normal."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if len(pts) < 2:
        raise ValueError("need >= 2 points")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    scatter = centered.T @ centered
    if scatter.max() < 1e-24:
        raise ValueError("all points identical")
    eigvals, eigvecs = np.linalg.eigh(scatter)
    normal = eigvecs[:, 0]
    return Line2D.from_normal(normal, float(normal @ centroid))


def line_residuals(line: Line2D, points: np.ndarray) -> np.ndarray:
    """Signed perpendicular distances of points from the line."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    return pts @ line.normal - line.d


def intersect_lines(a: Line2D, b: Line2D) -> np.ndarray:
    """Unique solution of the two normal equations."""
    cross = a.nx * b.ny - a.ny * b.nx
    if abs(cross) <= 1e-10:
        raise ParallelLinesError("lines are parallel")
    x = (a.d * b.ny - b.d * a.ny) / cross
    y = (a.nx * b.d - b.nx * a.d) / cross
    return np.array([x, y])


@dataclass(frozen=True)
class CornerGrid:
    """Row/column-indexed corner lattice with a validity mask."""

    rows: int
    cols: int
    points: np.ndarray
    valid: np.ndarray
    provenance: np.ndarray

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=float)
        valid = np.array(self.valid, dtype=bool)
        prov = np.array(self.provenance, dtype="<U9")
        shape = (self.rows, self.cols)
        if pts.shape != shape + (2,) or valid.shape != shape or prov.shape != shape:
            raise ValueError("grid arrays must match rows x cols")
        if not np.isfinite(pts[valid]).all():
            raise ValueError("valid points must be finite")
        for arr in (pts, valid, prov):
            arr.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "provenance", prov)

    def valid_count(self) -> int:
        return int(self.valid.sum())

    def to_json(self) -> dict:
        pts = [
            [self.points[i, j].tolist() if self.valid[i, j] else None for j in range(self.cols)]
            for i in range(self.rows)
        ]
        prov = [
            [str(self.provenance[i, j]) if self.valid[i, j] else None for j in range(self.cols)]
            for i in range(self.rows)
        ]
        return {"rows": self.rows, "cols": self.cols, "points": pts, "provenance": prov}

    @classmethod
    def from_json(cls, obj: dict) -> "CornerGrid":
        rows, cols = int(obj["rows"]), int(obj["cols"])
        pts = np.zeros((rows, cols, 2))
        valid = np.zeros((rows, cols), dtype=bool)
        prov = np.full((rows, cols), PROVENANCE_DETECTED, dtype="<U9")
        for i in range(rows):
            for j in range(cols):
                cell = obj["points"][i][j]
                if cell is not None:
                    pts[i, j] = cell
                    valid[i, j] = True
                    prov[i, j] = obj["provenance"][i][j]
        return cls(rows, cols, pts, valid, prov)


def _convex_hull(pts: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns hull vertex indices in ccw order."""
    order = np.lexsort((pts[:, 1], pts[:, 0]))

    def half(indices):
        chain: list[int] = []
        for i in indices:
            while len(chain) >= 2:
                o, a = pts[chain[-2]], pts[chain[-1]]
                if (a[0] - o[0]) * (pts[i][1] - o[1]) - (a[1] - o[1]) * (pts[i][0] - o[0]) <= 0:
                    chain.pop()
                else:
                    break
            chain.append(i)
        return chain

    lower = half(order)
    upper = half(order[::-1])
    return np.array(lower[:-1] + upper[:-1], dtype=int)


def _poly_area(q: np.ndarray) -> float:
    x, y = q[:, 0], q[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _max_area_quad(hull_pts: np.ndarray) -> np.ndarray:
    """Indices (into hull_pts) of the maximum-area hull quadrilateral."""
    from itertools import combinations

    n = len(hull_pts)
    if n == 4:
        return np.arange(4)
    quads = np.array(list(combinations(range(n), 4)), dtype=int)
    q = hull_pts[quads]
    x, y = q[..., 0], q[..., 1]
    areas = 0.5 * np.abs(
        (x * np.roll(y, -1, axis=1) - y * np.roll(x, -1, axis=1)).sum(axis=1)
    )
    return quads[int(np.argmax(areas))]


def _find_extremes(pts: np.ndarray) -> np.ndarray:
    """Outer board corners, ccw-ordered starting anywhere.

    First tries the coordinate heuristic (extremes of x+y and x-y); if
    those four points do not span nearly the hull area (e.g. the board
    is rotated ~45 degrees, where the heuristic picks edge midpoints)
    the maximum-area hull quadrilateral is used instead.
    """
    hull_idx = _convex_hull(pts)
    if len(hull_idx) < 4:
        raise ExtremePointError("point set has no quadrilateral hull")
    hull_pts = pts[hull_idx]
    hull_area = _poly_area(hull_pts)
    if hull_area < 1e-12:
        raise ExtremePointError("hull is degenerate")
    s = pts[:, 0] + pts[:, 1]
    d = pts[:, 0] - pts[:, 1]
    cand = np.array([np.argmin(s), np.argmax(d), np.argmax(s), np.argmin(d)])
    if len(set(cand.tolist())) == 4 and _poly_area(pts[cand]) >= 0.95 * hull_area:
        return _order_ccw(pts[cand])
    return _order_ccw(pts[hull_idx[_max_area_quad(hull_pts)]])


def _order_ccw(quad: np.ndarray) -> np.ndarray:
    center = quad.mean(axis=0)
    ang = np.arctan2(quad[:, 1] - center[1], quad[:, 0] - center[0])
    return quad[np.argsort(ang)]


def _refine_extremes(pts: np.ndarray, quad: np.ndarray) -> np.ndarray:
    """Fit the four board edges through the extremes and their along-edge
    neighbors, then replace each extreme by the intersection of its two
    incident edges.

    Neighbor candidates must point within 15 degrees of the edge
    direction; among those, the two best-aligned win (distance ranking
    would admit next-row points on strongly foreshortened boards).
    """
    edges = []
    for e in range(4):
        a, b = quad[e], quad[(e + 1) % 4]
        support = [a, b]
        direction = (b - a) / np.linalg.norm(b - a)
        for endpoint, sign in ((a, 1.0), (b, -1.0)):
            rel = pts - endpoint
            dist = np.linalg.norm(rel, axis=1)
            with np.errstate(invalid="ignore"):
                cosang = (rel @ (sign * direction)) / np.where(dist > 0, dist, 1.0)
            mask = (dist > 1e-9) & (cosang > np.cos(_EDGE_ANGLE_TOL))
            deviation = np.where(mask, np.arccos(np.clip(cosang, -1.0, 1.0)), np.inf)
            order = np.lexsort((dist, deviation))
            for idx in order[:2]:
                if mask[idx]:
                    support.append(pts[idx])
        edges.append(fit_line_tls(np.array(support)))
    refined = np.empty((4, 2))
    for e in range(4):
        try:
            refined[e] = intersect_lines(edges[(e - 1) % 4], edges[e])
        except ParallelLinesError:
            raise ExtremePointError("board edges do not intersect") from None
    return refined


def _assign_cells(
    pts: np.ndarray,
    quad: np.ndarray,
    corners_target: np.ndarray,
    rows: int,
    cols: int,
    cell_tolerance: float,
) -> tuple[np.ndarray, np.ndarray] | None:
    """Rectify through the 4-corner homography and bucket each point.

    Returns (points, valid) arrays or None when the mapping does not
    explain enough points (wrong corner order / transposed lattice).
    """
    try:
        H = estimate_homography_dlt(quad, corners_target)
    except ValueError:
        return None
    lattice = H.apply(pts)
    cells = np.rint(lattice)
    offsets = np.abs(lattice - cells)
    in_tol = (offsets <= cell_tolerance).all(axis=1)
    in_range = (
        (cells[:, 0] >= 0) & (cells[:, 0] <= cols - 1) & (cells[:, 1] >= 0) & (cells[:, 1] <= rows - 1)
    )
    assignable = in_tol & in_range
    if (~assignable).sum() > _UNASSIGNED_FRACTION_LIMIT * len(pts):
        return None
    grid_pts = np.zeros((rows, cols, 2))
    valid = np.zeros((rows, cols), dtype=bool)
    for idx in np.nonzero(assignable)[0]:
        j, i = int(cells[idx, 0]), int(cells[idx, 1])
        if valid[i, j]:
            raise AmbiguousAssignmentError(f"two points map to lattice cell ({i}, {j})")
        grid_pts[i, j] = pts[idx]
        valid[i, j] = True
    return grid_pts, valid


def sort_corners(
    points: np.ndarray, rows: int, cols: int, cell_tolerance: float = _CELL_TOLERANCE
) -> CornerGrid:
    """Index unordered corner detections into a rows x cols lattice.

    The four outer lattice corners are located (coordinate extremes
    with a convex-hull fallback), sharpened by intersecting the fitted
    board edges, and mapped to the corners of an axis-aligned unit
    rectangle; every detection is then bucketed by rounding its
    rectified coordinates. The extreme with minimal x+y becomes cell
    (0, 0). Cells without a detection are invalid; detections farther
    than `cell_tolerance` (per axis, in cell units) from any cell are
    dropped.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if len(pts) < 4:
        raise ExtremePointError("need at least the 4 outer corners")
    if len(pts) > rows * cols:
        raise ValueError("more points than lattice cells")
    quad = _find_extremes(pts)
    quad = _refine_extremes(pts, quad)
    start = int(np.argmin(quad[:, 0] + quad[:, 1]))
    quad = np.roll(quad, -start, axis=0)
    targets = [
        np.array([[0, 0], [cols - 1, 0], [cols - 1, rows - 1], [0, rows - 1]], dtype=float),
        np.array([[0, 0], [0, rows - 1], [cols - 1, rows - 1], [cols - 1, 0]], dtype=float),
    ]
    ambiguity: AmbiguousAssignmentError | None = None
    for target in targets:
        try:
            assigned = _assign_cells(pts, quad, target, rows, cols, cell_tolerance)
        except AmbiguousAssignmentError as exc:
            ambiguity = exc
            continue
        if assigned is not None:
            grid_pts, valid = assigned
            prov = np.full((rows, cols), PROVENANCE_DETECTED, dtype="<U9")
            return CornerGrid(rows, cols, grid_pts, valid, prov)
    if ambiguity is not None:
        raise ambiguity
    raise ExtremePointError("lattice assignment failed; an outer corner is likely missing")


def collineation_refine(grid: CornerGrid) -> CornerGrid:
    """Replace each cell by the intersection of its row and column lines.

    Lines are total-least-squares fits through the valid cells of each
    row and column. Cells whose row and column lines both exist are
    refined (or recovered if previously invalid); cells on an
    unfittable line keep their prior state.
    """
    row_lines: list[Line2D | None] = []
    for i in range(grid.rows):
        sel = grid.valid[i]
        row_lines.append(fit_line_tls(grid.points[i][sel]) if sel.sum() >= 2 else None)
    col_lines: list[Line2D | None] = []
    for j in range(grid.cols):
        sel = grid.valid[:, j]
        col_lines.append(fit_line_tls(grid.points[sel, j]) if sel.sum() >= 2 else None)

    pts = np.array(grid.points)
    valid = np.array(grid.valid)
    prov = np.array(grid.provenance)
    for i in range(grid.rows):
        for j in range(grid.cols):
            rl, cl = row_lines[i], col_lines[j]
            if rl is None or cl is None:
                continue
            try:
                p = intersect_lines(rl, cl)
            except ParallelLinesError:
                continue
            pts[i, j] = p
            if not valid[i, j]:
                prov[i, j] = PROVENANCE_RECOVERED
            valid[i, j] = True
    return CornerGrid(grid.rows, grid.cols, pts, valid, prov)
