"""Command-line driver: dataset generation, the correction -> detection
-> estimation pipeline, and metric reports.

Exit codes: 0 success, 1 pipeline failure, 2 configuration error. All
randomness flows from the seed in the configuration, so reruns produce
byte-identical JSON outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibrate import (
    RansacConfig,
    intrinsics_metrics,
    ransac_calibrate,
    result_to_json,
)
from .camgeom import BoardSpec, Extrinsics, Intrinsics, reprojection_error
from .distortion import (
    CorrectionModel,
    DistortionModel,
    estimate_correction_from_lines,
    fit_correction_model,
    warp_image,
)
from .gridorder import CornerGrid, collineation_refine, sort_corners
from .heatmap import (
    STATUS_INLIER,
    Heatmap,
    detect_peaks,
    fit_gaussian_surface,
    GaussianFitError,
    read_hmap,
    reject_outliers,
    response_detect,
    write_hmap,
)
from .synthgen import DatasetConfig, generate_dataset

SOURCES = ("gt_heatmap", "response_detector", "external_heatmap_dir")
CORRECTION_MODES = ("none", "fit_from_known", "estimate_from_lines")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage


@dataclass(frozen=True)
class DetectionParams:
    threshold: float = 0.3
    min_separation: float = 6.0
    window: int = 7
    sigma_ref: float = 1.5
    tau: float = 2.0
    residual_max: float = 0.05


# the correlation detector produces wider, less Gaussian peaks than
# rendered heatmaps; its defaults are tuned on the synthetic boards
_RESPONSE_DETECTION = DetectionParams(
    threshold=0.45, min_separation=6.0, window=7, sigma_ref=2.4, tau=2.0, residual_max=0.25
)


@dataclass(frozen=True)
class PipelineConfig:
    source: str = "gt_heatmap"
    correction: str = "none"
    board: BoardSpec | None = None
    ransac: RansacConfig = field(default_factory=RansacConfig)
    detection: DetectionParams | None = None
    external_heatmap_dir: str | None = None

    def __post_init__(self) -> None:
        if self.source not in SOURCES:
            raise ConfigError("source")
        if self.correction not in CORRECTION_MODES:
            raise ConfigError("correction")
        if self.source == "external_heatmap_dir" and not self.external_heatmap_dir:
            raise ConfigError("external_heatmap_dir")

    def detection_params(self) -> DetectionParams:
        if self.detection is not None:
            return self.detection
        return _RESPONSE_DETECTION if self.source == "response_detector" else DetectionParams()

    @classmethod
    def from_json(cls, obj: dict) -> "PipelineConfig":
        det = None
        if "detection" in obj:
            try:
                det = DetectionParams(**obj["detection"])
            except TypeError as exc:
                raise ConfigError("detection") from exc
        board = BoardSpec.from_json(obj["board"]) if "board" in obj else None
        return cls(
            source=obj.get("source", "gt_heatmap"),
            correction=obj.get("correction", "none"),
            board=board,
            ransac=RansacConfig.from_json(obj.get("ransac", {})),
            detection=det,
            external_heatmap_dir=obj.get("external_heatmap_dir"),
        )


def _load_dataset(dataset_dir: Path) -> tuple[dict, list[dict]]:
    manifest_path = dataset_dir / "manifest.json"
    if not manifest_path.exists():
        raise StageError("load", f"no manifest.json in {dataset_dir}")
    manifest = json.loads(manifest_path.read_text())
    gt = json.loads((dataset_dir / manifest["gt"]).read_text())
    return gt, gt["samples"]


def _load_image(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=float) / 255.0


def _image_correction(
    sample: dict, image: np.ndarray | None, mode: str
) -> CorrectionModel | None:
    """Correction model for one image, or None when nothing to correct."""
    if mode == "none":
        return None
    if mode == "fit_from_known":
        if sample.get("distortion") is None:
            return None
        model = DistortionModel.from_json(sample["distortion"])
        corrected, _ = fit_correction_model(model)
        return corrected
    # estimate_from_lines: a preliminary response-detector pass on the
    # distorted image supplies curved lattice rows/columns as traces
    h, w = image.shape
    params = _RESPONSE_DETECTION
    heat = response_detect(image)
    peaks = detect_peaks(heat, params.threshold, params.min_separation)
    peaks = peaks[: sample["_board_rows"] * sample["_board_cols"]]
    mus = []
    for peak in peaks:
        try:
            obs = fit_gaussian_surface(heat, peak, params.window)
        except GaussianFitError:
            continue
        mus.append(obs.mu)
    if len(mus) < 20:
        raise StageError("correction", "too few corners for line estimation")
    pts = np.array(mus)
    board_rows = sample["_board_rows"]
    board_cols = sample["_board_cols"]
    try:
        grid = _tolerant_sort(pts, board_rows, board_cols)
    except ValueError as exc:
        raise StageError("correction", f"could not order distorted corners: {exc}") from exc
    lines = []
    for i in range(grid.rows):
        sel = grid.valid[i]
        if sel.sum() >= 5:
            lines.append(grid.points[i][sel])
    for j in range(grid.cols):
        sel = grid.valid[:, j]
        if sel.sum() >= 5:
            lines.append(grid.points[sel, j])
    if len(lines) < 4:
        raise StageError("correction", "too few line traces for estimation")
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    r_norm = 0.5 * np.hypot(w - 1, h - 1)
    result = estimate_correction_from_lines(lines, center, r_norm)
    return result.model


def _tolerant_sort(pts: np.ndarray, rows: int, cols: int) -> CornerGrid:
    """Lattice sort with a widened cell tolerance for curved lattices."""
    return sort_corners(pts, rows, cols, cell_tolerance=0.45)


def _process_image(
    index: int,
    sample: dict,
    dataset_dir: Path,
    config: PipelineConfig,
    board: BoardSpec,
) -> tuple[CornerGrid, dict]:
    params = config.detection_params()
    sample = dict(sample)
    sample["_board_rows"] = board.rows
    sample["_board_cols"] = board.cols
    diag: dict = {"image": sample["image"]}

    needs_image = config.source == "response_detector" or config.correction == "estimate_from_lines"
    image = _load_image(dataset_dir / sample["image"]) if needs_image else None

    correction = _image_correction(sample, image, config.correction)
    diag["corrected"] = correction is not None

    if config.source == "gt_heatmap":
        heat = read_hmap(dataset_dir / sample["heatmap"])
    elif config.source == "external_heatmap_dir":
        heat = read_hmap(Path(config.external_heatmap_dir) / sample["heatmap"])
    else:
        src = warp_image(image, correction) if correction is not None else image
        heat = response_detect(src)
    if config.source in ("gt_heatmap", "external_heatmap_dir") and correction is not None:
        heat = Heatmap(warp_image(heat.values, correction))

    peaks = detect_peaks(heat, params.threshold, params.min_separation)
    diag["peaks"] = len(peaks)
    # keep at most one candidate per lattice cell, strongest first
    peaks = peaks[: board.rows * board.cols]
    observations = []
    fit_failures = 0
    for peak in peaks:
        try:
            observations.append(fit_gaussian_surface(heat, peak, params.window))
        except GaussianFitError:
            fit_failures += 1
    diag["fit_failures"] = fit_failures
    observations = reject_outliers(
        observations, sigma_ref=params.sigma_ref, tau=params.tau, residual_max=params.residual_max
    )
    inlier_mus = np.array([o.mu for o in observations if o.status == STATUS_INLIER])
    diag["rejected"] = sum(1 for o in observations if o.status != STATUS_INLIER)
    diag["inliers"] = len(inlier_mus)
    if len(inlier_mus) < 4:
        raise StageError("detect", f"image {index}: only {len(inlier_mus)} corner inliers")
    try:
        grid = sort_corners(inlier_mus, board.rows, board.cols)
    except ValueError as exc:
        raise StageError("sort", f"image {index}: {exc}") from exc
    diag["sorted_cells"] = grid.valid_count()
    refined = collineation_refine(grid)
    diag["recovered"] = int(refined.valid_count() - grid.valid_count())
    return refined, diag


def run_calibration_pipeline(
    dataset_dir: str | Path, config: PipelineConfig, threads: int = 1
) -> tuple[dict, dict]:
    """Full pipeline over a dataset directory.

    Returns (result_json, diagnostics_json). Raises StageError with the
    failing stage's name.
    """
    dataset_dir = Path(dataset_dir)
    gt, samples = _load_dataset(dataset_dir)
    board = config.board or BoardSpec.from_json(gt["board"])
    if board.to_json() != gt["board"]:
        raise StageError("load", "config board does not match the dataset manifest")
    if len(samples) < config.ransac.subset_size:
        raise StageError("load", f"dataset has {len(samples)} images, need >= {config.ransac.subset_size}")

    def work(args):
        index, sample = args
        try:
            grid, diag = _process_image(index, sample, dataset_dir, config, board)
            return grid, diag
        except StageError as exc:
            # one unusable image should not sink the dataset; the
            # consensus stage needs only enough survivors
            return None, {"image": sample["image"], "failed": str(exc)}

    tasks = list(enumerate(samples))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            processed = list(pool.map(work, tasks))
    else:
        processed = [work(t) for t in tasks]
    grids = [g for g, _ in processed if g is not None]
    kept_indices = [i for i, (g, _) in enumerate(processed) if g is not None]
    diagnostics = {"images": [d for _, d in processed]}
    if len(grids) < config.ransac.subset_size:
        raise StageError(
            "detect", f"only {len(grids)} of {len(samples)} images usable, need >= {config.ransac.subset_size}"
        )

    try:
        result = ransac_calibrate(grids, board, config.ransac)
    except (ValueError, RuntimeError) as exc:
        raise StageError("calibrate", str(exc)) from exc
    result_json = result_to_json(result, seed=config.ransac.seed)
    result_json["grids"] = [g.to_json() for g in grids]
    result_json["board"] = board.to_json()
    result_json["image_indices"] = kept_indices
    diagnostics["per_image_rpe"] = list(result.per_image_rpe)
    diagnostics["inlier_images"] = list(result.inlier_images)
    return result_json, diagnostics


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(config_path: str, out_dir: str) -> int:
    try:
        obj = json.loads(Path(config_path).read_text())
        cfg = DatasetConfig.from_json(obj)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        generate_dataset(cfg, out_dir)
    except OSError as exc:
        print(f"generation failed: {exc}", file=sys.stderr)
        return 1
    print(str(Path(out_dir) / "manifest.json"))
    return 0


def _load_pipeline_config(config_path: str | None, seed: int | None) -> PipelineConfig:
    obj = {}
    if config_path:
        obj = json.loads(Path(config_path).read_text())
    config = PipelineConfig.from_json(obj)
    if seed is not None:
        ransac = RansacConfig.from_json({**config.ransac.to_json(), "seed": seed})
        config = PipelineConfig(
            source=config.source,
            correction=config.correction,
            board=config.board,
            ransac=ransac,
            detection=config.detection,
            external_heatmap_dir=config.external_heatmap_dir,
        )
    return config


def cmd_calibrate(dataset_dir: str, config_path: str | None, out_dir: str, seed: int | None, threads: int) -> int:
    try:
        config = _load_pipeline_config(config_path, seed)
    except (ConfigError, json.JSONDecodeError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result_json, diagnostics = run_calibration_pipeline(dataset_dir, config, threads)
    except StageError as exc:
        print(f"pipeline failed at {exc}", file=sys.stderr)
        with open(out / "diagnostics.json", "w") as f:
            json.dump({"failed_stage": exc.stage, "message": str(exc)}, f, indent=1)
        return 1
    with open(out / "result.json", "w") as f:
        json.dump(result_json, f, indent=1)
    with open(out / "diagnostics.json", "w") as f:
        json.dump(diagnostics, f, indent=1)
    print(f"rpe={result_json['rpe']:.6f} inliers={len(result_json['inlier_images'])}")
    print(str(out / "result.json"))
    return 0


def _eval_one(result_obj: dict, gt_obj: dict) -> dict:
    est = Intrinsics.from_json(result_obj["intrinsics"])
    gt_k = Intrinsics.from_json(gt_obj["samples"][0]["intrinsics"])
    m = intrinsics_metrics(gt_k, est)
    report = {"e_fl": m.e_fl, "e_pp": m.e_pp, "e_ip": m.e_ip}
    if "grids" in result_obj and "board" in result_obj:
        board = BoardSpec.from_json(result_obj["board"])
        grids = [CornerGrid.from_json(g) for g in result_obj["grids"]]
        extr = [Extrinsics.from_json(e) for e in result_obj["extrinsics"]]
        report["rpe_mean_euclidean"] = reprojection_error(est, extr, grids, board, "mean_euclidean")
        report["rpe_eq10"] = reprojection_error(est, extr, grids, board, "eq10_literal")
    else:
        report["rpe_mean_euclidean"] = result_obj.get("rpe")
        report["rpe_eq10"] = None
    if "seed" in result_obj:
        report["seed"] = result_obj["seed"]
    return report


def cmd_eval(result_paths: list[str], gt_path: str, out_path: str | None) -> int:
    try:
        gt_obj = json.loads(Path(gt_path).read_text())
        results = [json.loads(Path(p).read_text()) for p in result_paths]
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        runs = [_eval_one(r, gt_obj) for r in results]
    except (KeyError, ValueError) as exc:
        print(f"schema mismatch: {exc}", file=sys.stderr)
        return 1
    if len(runs) == 1:
        report = runs[0]
    else:
        e_ips = [r["e_ip"] for r in runs]
        report = {
            "runs": runs,
            "e_ip_mean": float(np.mean(e_ips)),
            "e_ip_variance": float(np.var(e_ips)),
        }
    text = json.dumps(report, indent=1)
    print(text)
    if out_path:
        Path(out_path).write_text(text)
    return 0


def cmd_detect(dataset_dir: str, config_path: str | None, out_dir: str, seed: int | None, threads: int) -> int:
    """Corners only: run the pipeline up to the refined grids."""
    try:
        config = _load_pipeline_config(config_path, seed)
    except (ConfigError, json.JSONDecodeError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    dataset = Path(dataset_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        gt, samples = _load_dataset(dataset)
        board = config.board or BoardSpec.from_json(gt["board"])
        corners = []
        for i, sample in enumerate(samples):
            grid, diag = _process_image(i, sample, dataset, config, board)
            corners.append({"image": sample["image"], "grid": grid.to_json(), "stats": diag})
    except StageError as exc:
        print(f"pipeline failed at {exc}", file=sys.stderr)
        return 1
    with open(out / "corners.json", "w") as f:
        json.dump({"images": corners}, f, indent=1)
    print(str(out / "corners.json"))
    return 0


def cmd_correct(dataset_dir: str, config_path: str | None, out_dir: str, seed: int | None, threads: int) -> int:
    """Images only: write distortion-corrected PNGs (and warped heatmaps)."""
    from PIL import Image

    try:
        config = _load_pipeline_config(config_path, seed)
    except (ConfigError, json.JSONDecodeError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if config.correction == "none":
        print("config error: correction mode is 'none'", file=sys.stderr)
        return 2
    dataset = Path(dataset_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        gt, samples = _load_dataset(dataset)
        board = gt["board"]
        for sample in samples:
            sample = dict(sample)
            sample["_board_rows"] = board["rows"]
            sample["_board_cols"] = board["cols"]
            image = _load_image(dataset / sample["image"])
            correction = _image_correction(sample, image, config.correction)
            corrected = warp_image(image, correction) if correction is not None else image
            pixels = np.clip(np.rint(corrected * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(pixels, mode="L").save(out / sample["image"])
            heat = read_hmap(dataset / sample["heatmap"])
            if correction is not None:
                heat = Heatmap(warp_image(heat.values, correction))
            write_hmap(out / sample["heatmap"], heat)
    except StageError as exc:
        print(f"pipeline failed at {exc}", file=sys.stderr)
        return 1
    print(str(out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chesscal", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic dataset")
    p.add_argument("--config", required=True, help="dataset config JSON")
    p.add_argument("--out", required=True, help="output directory")

    for name, help_text in (
        ("calibrate", "run the full calibration pipeline"),
        ("detect", "detect and order corners only"),
        ("correct", "write corrected images only"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("dataset", help="dataset directory (with manifest.json)")
        p.add_argument("--config", default=None, help="pipeline config JSON")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the consensus seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads (same results for any value)")

    p = sub.add_parser("eval", help="score a result against ground truth")
    p.add_argument("results", nargs="+", help="result JSON file(s)")
    p.add_argument("--gt", required=True, help="dataset gt.json")
    p.add_argument("--out", default=None, help="optional report JSON path")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "generate":
        return cmd_generate(args.config, args.out)
    if args.command == "calibrate":
        return cmd_calibrate(args.dataset, args.config, args.out, args.seed, args.threads)
    if args.command == "detect":
        return cmd_detect(args.dataset, args.config, args.out, args.seed, args.threads)
    if args.command == "correct":
        return cmd_correct(args.dataset, args.config, args.out, args.seed, args.threads)
    if args.command == "eval":
        return cmd_eval(args.results, args.gt, args.out)
    return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
