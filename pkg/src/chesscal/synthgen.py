"""Synthetic chessboard dataset generator with analytic ground truth.

Every sample carries the exact camera parameters, pose, sub-pixel
corner positions and corner heatmap used to render it, so each pipeline
stage can be measured against the truth. Augmentations (specular
highlight, radial distortion, blur) update the ground truth
consistently: distorted samples store the displaced corners, the
re-rendered heatmap and the distortion model applied.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .camgeom import BoardSpec, Extrinsics, Intrinsics, project_points
from .distortion import (
    DistortionModel,
    apply_distortion_image,
    distort_point,
    fit_domain_radius,
)
from .heatmap import Heatmap, render_heatmap, write_hmap

__all__ = [
    "SceneSample",
    "AugmentConfig",
    "BlurConfig",
    "LightingConfig",
    "DatasetConfig",
    "PoseRejectionError",
    "HEATMAP_SIGMA",
    "sample_camera",
    "sample_pose",
    "render_board",
    "augment",
    "sample_distortion_model",
    "generate_dataset",
    "gaussian_blur_3x3",
]

HEATMAP_SIGMA = 1.5

# Shades used by the renderer.
_WHITE = 0.9
_BLACK = 0.1
_BACKGROUND = 0.5
# Quiet zone around the playing area, in squares.
_MARGIN_SQUARES = 1.5
_CORNER_MARGIN_PX = 8.0
# Corners of a distorted sample must stay inside this fraction of the
# correction fit domain so the fitted inverse stays accurate there.
_CORNER_DOMAIN_FRACTION = 0.93

_LEVEL_RANGES = {
    "level1": ((1.0, 1.0), (-0.35, -0.2), (-0.1, 0.0)),
    "level2": ((0.8, 1.2), (-0.5, -0.35), (-0.3, -0.1)),
}


class PoseRejectionError(ValueError):
    """Pose pushes a corner outside the image margin."""


@dataclass(frozen=True)
class BlurConfig:
    kernel: int = 3
    sigma: float = 1.5

    def __post_init__(self) -> None:
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.kernel < 3 or self.kernel % 2 == 0:
            raise ValueError("kernel must be odd and >= 3")


@dataclass(frozen=True)
class LightingConfig:
    center: tuple[float, float]
    radius: float
    gain: float
    shininess: float

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise ValueError("radius must be positive")


@dataclass(frozen=True)
class AugmentConfig:
    blur: BlurConfig | None = None
    lighting: LightingConfig | None = None
    distortion_level: str = "none"
    noise_seed: int = 0

    def __post_init__(self) -> None:
        if self.distortion_level not in ("none", "level1", "level2"):
            raise ValueError("distortion_level must be none, level1 or level2")

    @property
    def is_empty(self) -> bool:
        return self.blur is None and self.lighting is None and self.distortion_level == "none"


@dataclass(frozen=True)
class SceneSample:
    intrinsics: Intrinsics
    extrinsics: Extrinsics
    board: BoardSpec
    image: np.ndarray
    gt_corners: np.ndarray
    gt_heatmap: Heatmap
    distortion: DistortionModel | None = None


def sample_camera(rng_seed: int) -> Intrinsics:
    """Random intrinsics with focal lengths in [100, 300] px, principal
    point in [120, 360] px and skew in [1, 5] px."""
    rng = np.random.default_rng(rng_seed)
    return Intrinsics(
        fx=float(rng.uniform(100.0, 300.0)),
        fy=float(rng.uniform(100.0, 300.0)),
        skew=float(rng.uniform(1.0, 5.0)),
        px=float(rng.uniform(120.0, 360.0)),
        py=float(rng.uniform(120.0, 360.0)),
    )


def _rotation_xyz(rx: float, ry: float, rz: float) -> np.ndarray:
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def _lattice_geometry(corners: np.ndarray, rows: int, cols: int) -> tuple[float, float]:
    """(worst arm deviation from axis alignment in degrees, smallest
    cell arm length in px) over the projected lattice."""
    c = corners.reshape(rows, cols, 2)
    arms = np.concatenate(
        [
            (c[:, 1:] - c[:, :-1]).reshape(-1, 2),
            (c[1:, :] - c[:-1, :]).reshape(-1, 2),
        ]
    )
    lengths = np.linalg.norm(arms, axis=1)
    ang = np.rad2deg(np.arctan2(arms[:, 1], arms[:, 0])) % 90.0
    dev = np.minimum(ang, 90.0 - ang)
    return float(dev.max()), float(lengths.min())


def sample_pose(
    rng: np.random.Generator,
    K: Intrinsics,
    board: BoardSpec,
    size: tuple[int, int] = (480, 480),
    fill_range: tuple[float, float] = (0.4, 0.8),
    max_attempts: int = 200,
) -> Extrinsics:
    """Draw a board pose whose corners all render inside the image.

    Besides the margin test, poses are gated on viewing geometry the
    correlation detector can handle: every projected lattice arm must
    stay within 20 degrees of an image axis and span at least 9 px.
    Raises PoseRejectionError when no admissible pose is found.
    """
    w, h = size
    world = board.world_points()
    board_center = np.array([*world.mean(axis=0), 0.0])
    board_extent = (max(board.cols, board.rows) + 1) * board.square_size
    for _ in range(max_attempts):
        tilt = rng.uniform(0.0, np.deg2rad(45.0))
        azimuth = rng.uniform(0.0, 2.0 * np.pi)
        roll = rng.uniform(-np.deg2rad(12.0), np.deg2rad(12.0))
        R = _rotation_xyz(tilt * np.cos(azimuth), tilt * np.sin(azimuth), roll)
        fill = rng.uniform(*fill_range)
        z = 0.5 * (K.fx + K.fy) * board_extent / (fill * min(w, h))
        target = np.array(
            [w / 2.0 + rng.uniform(-40, 40), h / 2.0 + rng.uniform(-40, 40), 1.0]
        )
        ray = np.linalg.inv(K.matrix) @ target
        t = z * ray - R @ board_center
        E = Extrinsics(R, t)
        try:
            corners = project_points(K, E, np.column_stack([world, np.zeros(len(world))]))
        except ValueError:
            continue
        m = _CORNER_MARGIN_PX
        if not (
            (corners[:, 0] >= m).all()
            and (corners[:, 0] <= w - 1 - m).all()
            and (corners[:, 1] >= m).all()
            and (corners[:, 1] <= h - 1 - m).all()
        ):
            continue
        worst_dev, min_arm = _lattice_geometry(corners, board.rows, board.cols)
        if worst_dev <= 20.0 and min_arm >= 9.0:
            return E
    raise PoseRejectionError("no admissible pose found")


def render_board(
    K: Intrinsics,
    E: Extrinsics,
    board: BoardSpec,
    size: tuple[int, int] = (480, 480),
    supersample: int = 4,
) -> SceneSample:
    """Render an anti-aliased board view with exact ground truth.

    Pixels are averaged over a supersample x supersample grid of
    inverse-homography lookups into the board plane. The playing area
    is surrounded by a white quiet zone of 1.5 squares on mid-gray
    background. Corner projections feed the ground-truth list and the
    reference heatmap (sigma 1.5).
    """
    w, h = size
    world = board.world_points()
    pts3 = np.column_stack([world, np.zeros(len(world))])
    corners = project_points(K, E, pts3)  # raises on non-positive depth
    m = _CORNER_MARGIN_PX
    if (
        (corners[:, 0] < m).any()
        or (corners[:, 0] > w - 1 - m).any()
        or (corners[:, 1] < m).any()
        or (corners[:, 1] > h - 1 - m).any()
    ):
        raise PoseRejectionError("a corner projects outside the image margin")
    H = K.matrix @ np.column_stack([E.rotation[:, 0], E.rotation[:, 1], E.translation])
    Hinv = np.linalg.inv(H)
    s = board.square_size
    # playing area spans one square beyond the interior lattice
    lo = -s
    hi_x = board.cols * s
    hi_y = board.rows * s
    margin = _MARGIN_SQUARES * s

    ss = supersample
    sub = (np.arange(ss) + 0.5) / ss - 0.5
    img = np.empty((h, w))
    chunk = 64
    us = (np.arange(w)[:, None] + sub[None, :]).ravel()  # w*ss subcolumns
    for row0 in range(0, h, chunk):
        row1 = min(row0 + chunk, h)
        vs = (np.arange(row0, row1)[:, None] + sub[None, :]).ravel()
        U, V = np.meshgrid(us, vs)
        q = np.stack([U.ravel(), V.ravel(), np.ones(U.size)])
        bp = Hinv @ q
        bx = bp[0] / bp[2]
        by = bp[1] / bp[2]
        on_board = (bx >= lo) & (bx <= hi_x) & (by >= lo) & (by <= hi_y)
        in_quiet = (
            (bx >= lo - margin) & (bx <= hi_x + margin) & (by >= lo - margin) & (by <= hi_y + margin)
        )
        parity = (np.floor(bx / s) + np.floor(by / s)).astype(int) & 1
        shade = np.where(parity == 0, _BLACK, _WHITE)
        color = np.where(on_board, shade, np.where(in_quiet, _WHITE, _BACKGROUND))
        block = color.reshape(row1 - row0, ss, w, ss).mean(axis=(1, 3))
        img[row0:row1] = block
    gt_heatmap = render_heatmap(corners, HEATMAP_SIGMA, size)
    return SceneSample(
        intrinsics=K,
        extrinsics=E,
        board=board,
        image=img,
        gt_corners=corners,
        gt_heatmap=gt_heatmap,
        distortion=None,
    )


def gaussian_blur_3x3(img: np.ndarray, sigma: float = 1.5) -> np.ndarray:
    """Convolve with a normalized 3x3 Gaussian kernel, edge-replicated."""
    d = np.arange(-1, 2)
    k1 = np.exp(-np.square(d) / (2.0 * sigma * sigma))
    k1 /= k1.sum()
    padded = np.pad(img, 1, mode="edge")
    tmp = k1[0] * padded[:, :-2] + k1[1] * padded[:, 1:-1] + k1[2] * padded[:, 2:]
    return k1[0] * tmp[:-2] + k1[1] * tmp[1:-1] + k1[2] * tmp[2:]


def _specular_highlight(img: np.ndarray, cfg: LightingConfig) -> np.ndarray:
    h, w = img.shape
    vv, uu = np.mgrid[0:h, 0:w].astype(float)
    d = np.hypot(uu - cfg.center[0], vv - cfg.center[1])
    lobe = np.maximum(0.0, 1.0 - d / cfg.radius) ** cfg.shininess
    return np.clip(img + cfg.gain * lobe, 0.0, 1.0)


def sample_distortion_model(
    level: str,
    rng: np.random.Generator,
    center: np.ndarray,
    r_norm: float,
    required_radius: float | None = None,
    max_attempts: int = 50,
) -> DistortionModel:
    """Draw level coefficients, rejecting models whose invertible fit
    domain would not cover `required_radius` (normalized)."""
    if level not in _LEVEL_RANGES:
        raise ValueError(f"unknown distortion level {level!r}")
    (k0r, k1r, k2r) = _LEVEL_RANGES[level]
    for _ in range(max_attempts):
        k = np.array(
            [rng.uniform(*k0r), rng.uniform(*k1r), rng.uniform(*k2r)]
        )
        model = DistortionModel(k, center, r_norm)
        if required_radius is None:
            return model
        if _CORNER_DOMAIN_FRACTION * fit_domain_radius(model) >= required_radius:
            return model
    raise ValueError(
        f"no {level} model covers radius {required_radius:.3f} after {max_attempts} draws"
    )


def augment(sample: SceneSample, cfg: AugmentConfig) -> SceneSample:
    """Apply lighting, then distortion, then blur; ground truth follows.

    Distortion warps the image through the forward radial model (drawn
    from the level's coefficient ranges, re-drawn until it is invertible
    over the sample's corner radii), maps the ground-truth corners
    through the same model and re-renders the heatmap at the displaced
    corners. An empty config returns the sample unchanged.
    """
    if cfg.is_empty:
        return sample
    rng = np.random.default_rng(cfg.noise_seed)
    img = sample.image
    corners = sample.gt_corners
    heat = sample.gt_heatmap
    model = sample.distortion
    if cfg.lighting is not None:
        img = _specular_highlight(img, cfg.lighting)
    if cfg.distortion_level != "none":
        h, w = img.shape
        center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        r_norm = 0.5 * np.hypot(w - 1, h - 1)
        corner_radius = float(
            (np.linalg.norm(corners - center, axis=1) / r_norm).max()
        )
        model = sample_distortion_model(
            cfg.distortion_level, rng, center, r_norm, required_radius=corner_radius
        )
        img = apply_distortion_image(img, model)
        corners = distort_point(model, corners)
        heat = render_heatmap(corners, HEATMAP_SIGMA, (w, h))
    if cfg.blur is not None:
        img = gaussian_blur_3x3(img, cfg.blur.sigma)
    return replace(
        sample, image=img, gt_corners=corners, gt_heatmap=heat, distortion=model
    )


# ---------------------------------------------------------------------------
# dataset writing


@dataclass(frozen=True)
class DatasetConfig:
    count: int
    seed: int
    board: BoardSpec
    size: tuple[int, int] = (480, 480)
    blur: bool = False
    lighting: bool = False
    distortion_level: str = "none"

    def __post_init__(self) -> None:
        if self.count <= 0:
            raise ValueError("count must be positive")
        if self.distortion_level not in ("none", "level1", "level2"):
            raise ValueError("distortion_level must be none, level1 or level2")
        w, h = self.size
        if w < 64 or h < 64:
            raise ValueError("size must be at least 64x64")

    def to_json(self) -> dict:
        return {
            "count": self.count,
            "seed": self.seed,
            "board": self.board.to_json(),
            "size": list(self.size),
            "blur": self.blur,
            "lighting": self.lighting,
            "distortion_level": self.distortion_level,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetConfig":
        known = {"count", "seed", "board", "size", "blur", "lighting", "distortion_level"}
        extra = set(obj) - known
        if extra:
            raise ValueError(f"unknown config field: {sorted(extra)[0]}")
        for field in ("count", "seed", "board"):
            if field not in obj:
                raise ValueError(f"missing config field: {field}")
        return cls(
            count=int(obj["count"]),
            seed=int(obj["seed"]),
            board=BoardSpec.from_json(obj["board"]),
            size=tuple(obj.get("size", (480, 480))),
            blur=bool(obj.get("blur", False)),
            lighting=bool(obj.get("lighting", False)),
            distortion_level=str(obj.get("distortion_level", "none")),
        )


def _sample_augment_config(
    cfg: DatasetConfig, rng: np.random.Generator, size: tuple[int, int]
) -> AugmentConfig:
    w, h = size
    lighting = None
    if cfg.lighting:
        lighting = LightingConfig(
            center=(float(rng.uniform(0, w - 1)), float(rng.uniform(0, h - 1))),
            radius=float(rng.uniform(0.15 * min(w, h), 0.5 * min(w, h))),
            gain=float(rng.uniform(0.2, 0.6)),
            shininess=float(rng.uniform(2.0, 8.0)),
        )
    blur = BlurConfig() if cfg.blur else None
    noise_seed = int(rng.integers(0, 2**31 - 1))
    return AugmentConfig(
        blur=blur, lighting=lighting, distortion_level=cfg.distortion_level, noise_seed=noise_seed
    )


def generate_sample(cfg: DatasetConfig, K: Intrinsics, index: int) -> SceneSample:
    """Render and augment sample `index` deterministically from
    (dataset seed, index)."""
    rng = np.random.default_rng([cfg.seed, index])
    for _ in range(20):
        pose = sample_pose(rng, K, cfg.board, cfg.size)
        sample = render_board(K, pose, cfg.board, cfg.size)
        aug = _sample_augment_config(cfg, rng, cfg.size)
        try:
            return augment(sample, aug)
        except ValueError:
            continue  # distortion could not cover this pose; redraw it
    raise RuntimeError(f"sample {index}: no pose/distortion combination found")


def generate_dataset(cfg: DatasetConfig, out_dir: str | Path) -> dict:
    """Write images (8-bit grayscale PNG), heatmaps (HMAP), gt.json and
    manifest.json; returns the manifest. Byte-identical on rerun with
    the same config."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    K = sample_camera(cfg.seed)
    entries = []
    files = []
    for i in range(cfg.count):
        sample = generate_sample(cfg, K, i)
        img_name = f"img_{i:04d}.png"
        hm_name = f"hm_{i:04d}.hmap"
        pixels = np.clip(np.rint(sample.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(pixels, mode="L").save(out / img_name)
        write_hmap(out / hm_name, sample.gt_heatmap)
        entries.append(
            {
                "image": img_name,
                "heatmap": hm_name,
                "intrinsics": sample.intrinsics.to_json(),
                "extrinsics": sample.extrinsics.to_json(),
                "corners": sample.gt_corners.tolist(),
                "distortion": sample.distortion.to_json() if sample.distortion else None,
            }
        )
        files.extend([img_name, hm_name])
    gt = {
        "seed": cfg.seed,
        "board": cfg.board.to_json(),
        "size": list(cfg.size),
        "samples": entries,
    }
    with open(out / "gt.json", "w") as f:
        json.dump(gt, f, indent=1)
    manifest = {
        "config": cfg.to_json(),
        "seed": cfg.seed,
        "gt": "gt.json",
        "files": files,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest
