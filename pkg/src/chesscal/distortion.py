"""Radial distortion and correction models with image resampling.

The forward (distortion) model scales a point's distance from the
center by a polynomial in the normalized source radius,

    r_d = r_c * (k0 + k1*r_c^2 + k2*r_c^4),

while the correction model uses a denser polynomial in the distorted
radius,

    r_c = r_d * (k0' + k1'*r_d + k2'*r_d^2 + k3'*r_d^3 + k4'*r_d^4).

Radii are normalized by `r_norm` (by convention half the image
diagonal, placing the image corner at radius 1). Both maps keep the
angular coordinate about the center unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .gridorder import fit_line_tls, line_residuals

__all__ = [
    "DistortionModel",
    "CorrectionModel",
    "LineEstimationResult",
    "distort_point",
    "correct_point",
    "fit_correction_model",
    "estimate_correction_from_lines",
    "warp_image",
    "apply_distortion_image",
    "grid_loss",
    "monotone_radius",
    "fit_domain_radius",
    "FIT_DOMAIN_BACKOFF",
]

# Dense sampling step for monotonicity checks, in normalized radius.
_MONO_STEP = 1e-3
# The correction fit stays this far inside the forward model's
# invertible prefix; closer to the fold the inverse slope diverges and
# a degree-5 polynomial can no longer track it.
FIT_DOMAIN_BACKOFF = 0.7
# Monotonicity probe range when locating the fold for fitting; nothing
# in a half-diagonal-normalized image lies beyond this radius.
_FIT_PROBE_UPPER = 1.5


def _check_radial_fields(k: np.ndarray, center: np.ndarray, r_norm: float, n_coeff: int) -> None:
    if k.shape != (n_coeff,):
        raise ValueError(f"coefficient vector must have length {n_coeff}")
    if not np.isfinite(k).all():
        raise ValueError("coefficients must be finite")
    if center.shape != (2,) or not np.isfinite(center).all():
        raise ValueError("center must be a finite 2-vector")
    if not (np.isfinite(r_norm) and r_norm > 0):
        raise ValueError("r_norm must be positive")


@dataclass(frozen=True)
class DistortionModel:
    """Forward radial model; three coefficients over even powers."""

    k: np.ndarray
    center: np.ndarray
    r_norm: float

    def __post_init__(self) -> None:
        k = np.array(self.k, dtype=float).reshape(-1)
        center = np.array(self.center, dtype=float).reshape(-1)
        _check_radial_fields(k, center, self.r_norm, 3)
        k.setflags(write=False)
        center.setflags(write=False)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "center", center)

    def scale(self, r: np.ndarray) -> np.ndarray:
        """Radial scale factor at normalized radius r."""
        r2 = np.square(r)
        return self.k[0] + self.k[1] * r2 + self.k[2] * r2 * r2

    def forward(self, r: np.ndarray) -> np.ndarray:
        return r * self.scale(r)

    def is_monotone(self, upper: float = 1.05) -> bool:
        return monotone_radius(self.forward, upper) >= upper

    def to_json(self) -> dict:
        return {"k": self.k.tolist(), "center": self.center.tolist(), "r_norm": self.r_norm}

    @classmethod
    def from_json(cls, obj: dict) -> "DistortionModel":
        return cls(np.array(obj["k"], dtype=float), np.array(obj["center"], dtype=float), float(obj["r_norm"]))


@dataclass(frozen=True)
class CorrectionModel:
    """Inverse radial model; five coefficients over all powers."""

    kp: np.ndarray
    center: np.ndarray
    r_norm: float

    def __post_init__(self) -> None:
        kp = np.array(self.kp, dtype=float).reshape(-1)
        center = np.array(self.center, dtype=float).reshape(-1)
        _check_radial_fields(kp, center, self.r_norm, 5)
        kp.setflags(write=False)
        center.setflags(write=False)
        object.__setattr__(self, "kp", kp)
        object.__setattr__(self, "center", center)

    def scale(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        out = np.full_like(r, self.kp[4])
        for c in self.kp[3::-1]:
            out = out * r + c
        return out

    def forward(self, r: np.ndarray) -> np.ndarray:
        return r * self.scale(r)

    def is_monotone(self, upper: float = 1.05) -> bool:
        return monotone_radius(self.forward, upper) >= upper

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.kp, [1.0, 0.0, 0.0, 0.0, 0.0]))

    def to_json(self) -> dict:
        return {"k": self.kp.tolist(), "center": self.center.tolist(), "r_norm": self.r_norm}

    @classmethod
    def from_json(cls, obj: dict) -> "CorrectionModel":
        return cls(np.array(obj["k"], dtype=float), np.array(obj["center"], dtype=float), float(obj["r_norm"]))


def monotone_radius(radial_map: Callable[[np.ndarray], np.ndarray], upper: float = 1.05) -> float:
    """Largest radius in [0, upper] below which the map stays strictly
    increasing, probed on a 1e-3 grid."""
    r = np.arange(0.0, upper + _MONO_STEP, _MONO_STEP)
    values = radial_map(r)
    increasing = np.diff(values) > 0
    if increasing.all():
        return upper
    return float(r[int(np.argmin(increasing))])


def fit_domain_radius(m: "DistortionModel") -> float:
    """Source-radius domain over which fit_correction_model inverts `m`."""
    return min(1.0, FIT_DOMAIN_BACKOFF * monotone_radius(m.forward, upper=_FIT_PROBE_UPPER))


def _apply_radial(points: np.ndarray, center: np.ndarray, r_norm: float, scale_fn) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    d = pts - center
    r = np.linalg.norm(d, axis=1) / r_norm
    s = np.where(r > 0, scale_fn(r), 1.0)
    out = center + d * s[:, None]
    return out[0] if single else out


def distort_point(m: DistortionModel, p: np.ndarray) -> np.ndarray:
    """Apply the forward radial model to a pixel point (or (n, 2) array)."""
    return _apply_radial(p, m.center, m.r_norm, m.scale)


def correct_point(c: CorrectionModel, p: np.ndarray) -> np.ndarray:
    """Apply the correction model to a pixel point (or (n, 2) array)."""
    return _apply_radial(p, c.center, c.r_norm, c.scale)


def fit_correction_model(m: DistortionModel, n_samples: int = 256) -> tuple[CorrectionModel, float]:
    """Least-squares inverse of a forward model.

    Samples the forward map on uniformly spaced source radii over the
    invertible domain [0, min(1, 0.7 * fold radius)] and solves the
    linear system for the five correction coefficients. Returns the
    model together with the worst absolute radial residual over the
    sample domain (in normalized radius units).
    """
    if n_samples < 16:
        raise ValueError("n_samples must be >= 16")
    r_fit = fit_domain_radius(m)
    if r_fit <= 0:
        raise ValueError("forward model is decreasing at the center")
    rc = np.linspace(0.0, r_fit, n_samples)
    rd = m.forward(rc)
    B = rd[:, None] ** np.arange(1, 6)[None, :]
    kp, _, rank, _ = np.linalg.lstsq(B, rc, rcond=None)
    if rank < 5:
        raise ValueError("degenerate forward model: normal equations are singular")
    residual = float(np.abs(rc - B @ kp).max())
    return CorrectionModel(kp, m.center, m.r_norm), residual


@dataclass(frozen=True)
class LineEstimationResult:
    model: CorrectionModel
    converged: bool
    residual: float
    iterations: int


def estimate_correction_from_lines(
    line_point_sets: Sequence[np.ndarray],
    center: np.ndarray,
    r_norm: float,
    max_iterations: int = 100,
) -> LineEstimationResult:
    """Estimate correction coefficients from curved traces of straight lines.

    Minimizes the summed squared orthogonal line-fit residuals of the
    corrected point sets by damped least squares started at the
    identity model. Line straightness cannot observe a global radial
    gain (and the all-zero model trivially zeroes the objective by
    collapsing every trace to a point), so the constant coefficient is
    pinned at 1 and candidate steps that fold the map over the data
    radii are rejected. A result that exhausts the iteration budget is
    returned flagged (`converged=False`) with its final residual.
    """
    lines = [np.atleast_2d(np.asarray(l, dtype=float)) for l in line_point_sets]
    if len(lines) < 4:
        raise ValueError("need >= 4 lines")
    if any(len(l) < 5 for l in lines):
        raise ValueError("each line needs >= 5 points")
    center = np.asarray(center, dtype=float).reshape(2)
    r_data = max(
        float(np.linalg.norm(pts - center, axis=1).max() / r_norm) for pts in lines
    )

    def residual_vector(tail: np.ndarray) -> np.ndarray | None:
        model = CorrectionModel(np.concatenate([[1.0], tail]), center, r_norm)
        if monotone_radius(model.forward, upper=r_data + 0.02) < r_data:
            return None
        parts = []
        for pts in lines:
            corrected = correct_point(model, pts)
            line = fit_line_tls(corrected)
            parts.append(line_residuals(line, corrected))
        return np.concatenate(parts)

    tail = np.zeros(4)
    lam = 1e-3
    h = 1e-7
    r = residual_vector(tail)
    if r is None:
        raise ValueError("line traces extend beyond a representable radius")
    cost = float(r @ r)
    converged = False
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        J = np.empty((len(r), 4))
        degenerate = False
        for j in range(4):
            dk = np.zeros(4)
            dk[j] = h
            r_plus = residual_vector(tail + dk)
            r_minus = residual_vector(tail - dk)
            if r_plus is None or r_minus is None:
                degenerate = True
                break
            J[:, j] = (r_plus - r_minus) / (2 * h)
        if degenerate:
            break
        g = J.T @ r
        if np.abs(g).max() < 1e-12:
            converged = True
            break
        JtJ = J.T @ J
        step_ok = False
        for _ in range(20):
            try:
                delta = np.linalg.solve(JtJ + lam * np.diag(np.maximum(np.diag(JtJ), 1e-12)), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            r_trial = residual_vector(tail + delta)
            cost_trial = float(r_trial @ r_trial) if r_trial is not None else np.inf
            if cost_trial < cost:
                tail, r, cost = tail + delta, r_trial, cost_trial
                lam = max(lam / 10.0, 1e-12)
                step_ok = True
                break
            lam *= 10.0
        if not step_ok or np.linalg.norm(delta) < 1e-14:
            converged = True
            break
    rms = float(np.sqrt(cost / max(len(r), 1)))
    model = CorrectionModel(np.concatenate([[1.0], tail]), center, r_norm)
    return LineEstimationResult(model, converged, rms, iterations)


def _invert_radial_with_lut(
    forward: Callable[[np.ndarray], np.ndarray], r_src_max: float, n: int = 4096
) -> Callable[[np.ndarray], np.ndarray]:
    """Inverse of a radial map via a dense monotone lookup table.

    Queries beyond the map's range return +inf so downstream sampling
    treats them as out of bounds.
    """
    r_src = np.linspace(0.0, r_src_max, n)
    r_dst = forward(r_src)
    increasing = np.diff(r_dst) > 0
    if not increasing.all():
        stop = int(np.argmin(increasing)) + 1
        r_src, r_dst = r_src[:stop], r_dst[:stop]

    def inverse(q: np.ndarray) -> np.ndarray:
        out = np.interp(q, r_dst, r_src)
        return np.where(q > r_dst[-1], np.inf, out)

    return inverse


def _resample_radial(img: np.ndarray, center: np.ndarray, r_norm: float, src_radius_fn) -> np.ndarray:
    """Inverse-mapping resample: each output pixel pulls from the source
    location given by `src_radius_fn` applied to its own radius.
    Out-of-bounds source locations produce 0."""
    img = np.asarray(img, dtype=float)
    h, w = img.shape
    vv, uu = np.mgrid[0:h, 0:w].astype(float)
    du = uu - center[0]
    dv = vv - center[1]
    r = np.hypot(du, dv) / r_norm
    r_src = src_radius_fn(r.ravel()).reshape(h, w)
    with np.errstate(invalid="ignore"):
        ratio = np.where(r > 0, r_src / r, 1.0)
    us = center[0] + du * ratio
    vs = center[1] + dv * ratio
    return _bilinear_sample(img, us, vs)


def _bilinear_sample(img: np.ndarray, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
    h, w = img.shape
    inside = (us >= 0) & (us <= w - 1) & (vs >= 0) & (vs <= h - 1)
    u = np.where(inside, us, 0.0)
    v = np.where(inside, vs, 0.0)
    u0 = np.clip(np.floor(u).astype(int), 0, w - 2)
    v0 = np.clip(np.floor(v).astype(int), 0, h - 2)
    fu = u - u0
    fv = v - v0
    top = img[v0, u0] * (1 - fu) + img[v0, u0 + 1] * fu
    bot = img[v0 + 1, u0] * (1 - fu) + img[v0 + 1, u0 + 1] * fu
    return np.where(inside, top * (1 - fv) + bot * fv, 0.0)


def warp_image(img: np.ndarray, c: CorrectionModel) -> np.ndarray:
    """Produce the corrected image: each output pixel samples the source
    at its distorted-side location (inverse of the correction map),
    bilinearly interpolated. The identity model returns the input
    unchanged bit for bit."""
    img = np.asarray(img, dtype=float)
    if img.size == 0:
        raise ValueError("image is empty")
    if c.is_identity:
        return img.copy()
    r_hi = np.hypot(*img.shape) / c.r_norm + 0.1
    inverse = _invert_radial_with_lut(c.forward, r_hi)
    return _resample_radial(img, c.center, c.r_norm, inverse)


def apply_distortion_image(img: np.ndarray, m: DistortionModel) -> np.ndarray:
    """Render the distorted view of an undistorted image.

    Output pixels live in the distorted frame; each samples the source
    at the radius whose forward image equals its own (inverse of the
    forward model over its monotone prefix)."""
    img = np.asarray(img, dtype=float)
    if img.size == 0:
        raise ValueError("image is empty")
    r_mono = monotone_radius(m.forward, upper=np.hypot(*img.shape) / m.r_norm + 0.1)
    inverse = _invert_radial_with_lut(m.forward, r_mono)
    return _resample_radial(img, m.center, m.r_norm, inverse)


def grid_loss(p_dst: np.ndarray, p_cor: np.ndarray) -> float:
    """Mean L1 displacement between matched point lists, in pixels."""
    a = np.atleast_2d(np.asarray(p_dst, dtype=float))
    b = np.atleast_2d(np.asarray(p_cor, dtype=float))
    if a.shape != b.shape:
        raise ValueError("point lists must have matching shapes")
    if len(a) == 0:
        raise ValueError("point lists are empty")
    return float(np.abs(a - b).sum(axis=1).mean())
