"""Corner-likelihood heatmaps and sub-pixel Gaussian surface fitting.

A heatmap encodes each chessboard corner as a 2-D Gaussian blob whose
center is the sub-pixel corner position. Fitting inverts that encoding:
taking logs turns the blob into a quadratic surface, so the center and
per-axis variances come out of one linear system

    I_i ln I_i = [I_i, I_i x_i, I_i y_i, I_i x_i^2, I_i y_i^2] . c

solved by SVD least squares over the pixels around a peak. The
intensity weighting keeps low, noise-dominated samples from controlling
the fit. Blobs whose recovered variances stray from the reference width
(or whose reconstruction residual is large) signal unreliable
detections and are rejected rather than refined.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "Heatmap",
    "CornerObservation",
    "GaussianFitError",
    "STATUS_INLIER",
    "STATUS_REJECTED_SIGMA",
    "STATUS_REJECTED_RESIDUAL",
    "STATUS_RECOVERED",
    "render_heatmap",
    "heatmap_mse",
    "detect_peaks",
    "fit_gaussian_surface",
    "reject_outliers",
    "response_detect",
    "write_hmap",
    "read_hmap",
    "observations_to_json",
    "observations_from_json",
]

STATUS_INLIER = "inlier"
STATUS_REJECTED_SIGMA = "rejected_sigma"
STATUS_REJECTED_RESIDUAL = "rejected_residual"
STATUS_RECOVERED = "recovered"

_HMAP_MAGIC = b"HMAP"

# Pixels below this fraction of the peak value are excluded from the
# log-linear fit (ln I is numerically wild near zero).
_VALUE_FLOOR_FRACTION = 0.05
_VALUE_FLOOR_ABS = 1e-6
# Gaussian support is cut off beyond this many sigmas when rendering;
# the tail there is < 2e-8, far below float32 heatmap resolution.
_RENDER_SUPPORT_SIGMAS = 6.0


class GaussianFitError(ValueError):
    """Window does not contain a fittable Gaussian surface."""


@dataclass(frozen=True)
class Heatmap:
    """Single-channel corner-likelihood raster with values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.size == 0:
            raise ValueError("heatmap must be a nonempty 2-D raster")
        if not np.isfinite(v).all():
            raise ValueError("heatmap values must be finite")
        v = np.clip(v, 0.0, 1.0)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class CornerObservation:
    """Fitted blob: sub-pixel center, per-axis widths, fit residual, status."""

    mu: np.ndarray
    sigma: np.ndarray
    fit_residual: float
    status: str = STATUS_INLIER

    def __post_init__(self) -> None:
        mu = np.array(self.mu, dtype=float).reshape(2)
        sigma = np.array(self.sigma, dtype=float).reshape(2)
        if not np.isfinite(mu).all():
            raise ValueError("mu must be finite")
        if not (sigma > 0).all():
            raise ValueError("sigma must be positive")
        mu.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)


def render_heatmap(
    corners: Sequence[np.ndarray] | np.ndarray, sigma_ref: float, size: tuple[int, int]
) -> Heatmap:
    """Draw one isotropic Gaussian blob of width `sigma_ref` per corner.

    Overlapping blobs combine by per-pixel maximum, so peak values stay
    at 1. `size` is (width, height). Support is truncated at 6 sigma.
    """
    if sigma_ref <= 0:
        raise ValueError("sigma_ref must be positive")
    w, h = size
    out = np.zeros((h, w))
    pts = np.atleast_2d(np.asarray(corners, dtype=float)) if len(corners) else np.empty((0, 2))
    reach = _RENDER_SUPPORT_SIGMAS * sigma_ref
    inv = 1.0 / (2.0 * sigma_ref * sigma_ref)
    for mx, my in pts:
        x0 = max(int(np.floor(mx - reach)), 0)
        x1 = min(int(np.ceil(mx + reach)), w - 1)
        y0 = max(int(np.floor(my - reach)), 0)
        y1 = min(int(np.ceil(my + reach)), h - 1)
        if x0 > x1 or y0 > y1:
            continue
        xs = np.arange(x0, x1 + 1)
        ys = np.arange(y0, y1 + 1)
        gx = np.exp(-np.square(xs - mx) * inv)
        gy = np.exp(-np.square(ys - my) * inv)
        patch = gy[:, None] * gx[None, :]
        region = out[y0 : y1 + 1, x0 : x1 + 1]
        np.maximum(region, patch, out=region)
    return Heatmap(out)


def heatmap_mse(a: Heatmap, b: Heatmap) -> float:
    """Mean over pixels of the squared difference."""
    if a.values.shape != b.values.shape:
        raise ValueError("heatmap dimensions differ")
    return float(np.mean(np.square(a.values - b.values)))


def detect_peaks(h: Heatmap, threshold: float, min_separation: float) -> list[tuple[int, int]]:
    """Strict 3x3 local maxima at or above `threshold`, greedily
    suppressed within `min_separation` pixels by descending value.

    Returns integer (x, y) pixel positions, ordered by descending value
    with row-major tie-breaking.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    v = h.values
    padded = np.full((v.shape[0] + 2, v.shape[1] + 2), -np.inf)
    padded[1:-1, 1:-1] = v
    is_max = v >= threshold
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            is_max &= v > padded[1 + dy : padded.shape[0] - 1 + dy, 1 + dx : padded.shape[1] - 1 + dx]
    ys, xs = np.nonzero(is_max)
    if len(xs) == 0:
        return []
    order = np.lexsort((xs, ys, -v[ys, xs]))
    kept: list[tuple[int, int]] = []
    min_sep_sq = min_separation * min_separation
    for i in order:
        x, y = int(xs[i]), int(ys[i])
        if all((x - kx) ** 2 + (y - ky) ** 2 >= min_sep_sq for kx, ky in kept):
            kept.append((x, y))
    return kept


def fit_gaussian_surface(h: Heatmap, peak: tuple[int, int], window: int = 7) -> CornerObservation:
    """Sub-pixel blob center and widths from a window around a peak.

    Pixels above the value floor enter the intensity-weighted
    log-linear system; the quadratic coefficients give back the center
    and per-axis variances. The residual is the RMS difference between
    the window values and the reconstructed Gaussian.

    Raises GaussianFitError when fewer than 6 pixels are usable, the
    system is rank-deficient, or a recovered variance is non-positive
    (the surface is not a Gaussian bump).
    """
    if window < 5 or window % 2 == 0:
        raise ValueError("window must be odd and >= 5")
    px, py = int(peak[0]), int(peak[1])
    half = window // 2
    v = h.values
    x0, x1 = max(px - half, 0), min(px + half, v.shape[1] - 1)
    y0, y1 = max(py - half, 0), min(py + half, v.shape[0] - 1)
    if x1 - x0 + 1 < 5 or y1 - y0 + 1 < 5:
        raise GaussianFitError("window clipped below 5x5 at the raster border")
    patch = v[y0 : y1 + 1, x0 : x1 + 1]
    peak_value = v[py, px]
    floor = max(_VALUE_FLOOR_FRACTION * peak_value, _VALUE_FLOOR_ABS)
    ys, xs = np.nonzero(patch > floor)
    if len(xs) < 6:
        raise GaussianFitError("fewer than 6 usable pixels above the value floor")
    # local coordinates about the peak keep the system well conditioned
    # and make fits exactly translation-equivariant
    lx = xs + (x0 - px)
    ly = ys + (y0 - py)
    intens = patch[ys, xs]
    a = intens * np.log(intens)
    B = np.column_stack([intens, intens * lx, intens * ly, intens * lx * lx, intens * ly * ly])
    c, _, rank, _ = np.linalg.lstsq(B, a, rcond=None)
    if rank < 5:
        raise GaussianFitError("rank-deficient surface (no curvature)")
    # -1e-8 would mean sigma ~ 7000 px; treat anything flatter as no blob
    if c[3] > -1e-8 or c[4] > -1e-8:
        raise GaussianFitError("non-positive recovered variance; surface is not Gaussian")
    sx2 = -1.0 / (2.0 * c[3])
    sy2 = -1.0 / (2.0 * c[4])
    mu_local = np.array([c[1] * sx2, c[2] * sy2])
    log_model = c[0] + c[1] * lx + c[2] * ly + c[3] * lx * lx + c[4] * ly * ly
    residual = float(np.sqrt(np.mean(np.square(intens - np.exp(log_model)))))
    return CornerObservation(
        mu=mu_local + (px, py),
        sigma=np.sqrt([sx2, sy2]),
        fit_residual=residual,
        status=STATUS_INLIER,
    )


def reject_outliers(
    obs: Sequence[CornerObservation],
    sigma_ref: float = 1.5,
    tau: float = 2.0,
    residual_max: float = 0.05,
) -> list[CornerObservation]:
    """Partition observations by blob-shape plausibility.

    An observation stays an inlier iff both widths lie inside
    [sigma_ref/tau, sigma_ref*tau] and its fit residual is at most
    `residual_max`. Others are restatused (width violations win over
    residual violations). Order and positions are untouched.
    """
    if tau <= 1:
        raise ValueError("tau must exceed 1")
    lo, hi = sigma_ref / tau, sigma_ref * tau
    out: list[CornerObservation] = []
    for o in obs:
        if not ((lo <= o.sigma[0] <= hi) and (lo <= o.sigma[1] <= hi)):
            out.append(replace(o, status=STATUS_REJECTED_SIGMA))
        elif o.fit_residual > residual_max:
            out.append(replace(o, status=STATUS_REJECTED_RESIDUAL))
        else:
            out.append(replace(o, status=STATUS_INLIER))
    return out


def _box_sum(img: np.ndarray, radius: int) -> np.ndarray:
    """Sum over the (2r+1)^2 window at each pixel, edge-replicated."""
    padded = np.pad(img, radius + 1, mode="edge")
    c = padded.cumsum(axis=0).cumsum(axis=1)
    size = 2 * radius + 1
    return (
        c[size:, size:] - c[:-size, size:] - c[size:, :-size] + c[:-size, :-size]
    )[: img.shape[0], : img.shape[1]]


def _quadrant_ncc(img: np.ndarray, r: int) -> np.ndarray:
    """Magnitude of normalized correlation with the sign(dx)*sign(dy)
    quadrant template of radius r."""
    padded = np.pad(img, r, mode="edge")
    h, w = img.shape
    # the template is separable: sign(dx) along x, sign(dy) along y
    xdiff = np.zeros((h + 2 * r, w))
    for d in range(1, r + 1):
        xdiff += padded[:, r + d : r + d + w] - padded[:, r - d : r - d + w]
    num = np.zeros((h, w))
    for d in range(1, r + 1):
        num += xdiff[r + d : r + d + h] - xdiff[r - d : r - d + h]
    n_win = (2 * r + 1) ** 2
    s1 = _box_sum(img, r)
    s2 = _box_sum(img * img, r)
    energy = np.maximum(s2 - s1 * s1 / n_win, 0.0)
    kern_norm = 2.0 * r  # sqrt of the 4r^2 unit entries
    denom = kern_norm * np.sqrt(energy)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(denom > 1e-9, np.abs(num) / denom, 0.0)


def response_detect(img: np.ndarray, kernel_radius: int = 4) -> Heatmap:
    """Corner-likeness map from normalized correlation with a quadrant
    junction template.

    The template is sign(dx)*sign(dy) over a (2r+1)^2 window: +1 where
    the two diagonal quadrants agree, -1 on the other pair. Straight
    edges through the window center cancel exactly, while chessboard
    junctions correlate strongly in either polarity, so the magnitude
    of the correlation is used, scaled to [0, 1]. The template is
    evaluated at `kernel_radius` and at half that radius (minimum 2)
    and the two magnitudes combined per pixel by maximum, so junctions
    in strongly foreshortened board regions, where a cell can shrink
    below the full window, keep a clear peak. Constant regions yield 0.
    """
    img = np.asarray(img, dtype=float)
    if img.ndim != 2 or min(img.shape) <= 2 * kernel_radius + 1:
        raise ValueError("image must be 2-D and larger than the kernel")
    ncc = _quadrant_ncc(img, kernel_radius)
    half = max(2, kernel_radius // 2)
    if half < kernel_radius:
        ncc = np.maximum(ncc, _quadrant_ncc(img, half))
    return Heatmap(np.clip(ncc, 0.0, 1.0))


def write_hmap(path: str | Path, h: Heatmap) -> None:
    """Binary heatmap: magic 'HMAP', u32-LE width and height, then
    width*height float32-LE values row-major."""
    data = h.values.astype("<f4").tobytes(order="C")
    with open(path, "wb") as f:
        f.write(_HMAP_MAGIC)
        f.write(struct.pack("<II", h.width, h.height))
        f.write(data)


def read_hmap(path: str | Path) -> Heatmap:
    raw = Path(path).read_bytes()
    if raw[:4] != _HMAP_MAGIC:
        raise ValueError(f"{path}: not a heatmap file (bad magic)")
    w, hgt = struct.unpack("<II", raw[4:12])
    expected = 12 + 4 * w * hgt
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    values = np.frombuffer(raw[12:], dtype="<f4").reshape(hgt, w)
    return Heatmap(values.astype(float))


def observations_to_json(obs: Sequence[CornerObservation]) -> list[dict]:
    return [
        {
            "mu": o.mu.tolist(),
            "sigma": o.sigma.tolist(),
            "residual": o.fit_residual,
            "status": o.status,
        }
        for o in obs
    ]


def observations_from_json(items: Sequence[dict]) -> list[CornerObservation]:
    return [
        CornerObservation(
            mu=np.array(it["mu"], dtype=float),
            sigma=np.array(it["sigma"], dtype=float),
            fit_residual=float(it["residual"]),
            status=str(it["status"]),
        )
        for it in items
    ]
