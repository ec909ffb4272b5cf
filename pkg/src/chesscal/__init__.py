"""Chessboard camera calibration toolkit.

Pipeline stages (in run order): radial distortion correction, heatmap
corner detection with sub-pixel Gaussian fitting and shape-based
outlier rejection, lattice sorting with collineation refinement, and
image-level consensus calibration. A synthetic board generator with
analytic ground truth backs every stage's evaluation.
"""

from .calibrate import (
    CalibrationResult,
    RansacConfig,
    calibrate_zhang,
    intrinsics_metrics,
    ransac_calibrate,
    refine_parameters,
)
from .camgeom import (
    BoardSpec,
    Extrinsics,
    Homography,
    Intrinsics,
    estimate_homography_dlt,
    extrinsics_from_homography,
    intrinsics_from_homographies,
    project_point,
    reprojection_error,
)
from .distortion import (
    CorrectionModel,
    DistortionModel,
    correct_point,
    distort_point,
    estimate_correction_from_lines,
    fit_correction_model,
    grid_loss,
    warp_image,
)
from .gridorder import (
    CornerGrid,
    Line2D,
    collineation_refine,
    fit_line_tls,
    intersect_lines,
    sort_corners,
)
from .heatmap import (
    CornerObservation,
    Heatmap,
    detect_peaks,
    fit_gaussian_surface,
    heatmap_mse,
    read_hmap,
    reject_outliers,
    render_heatmap,
    response_detect,
    write_hmap,
)
from .synthgen import (
    AugmentConfig,
    DatasetConfig,
    SceneSample,
    augment,
    generate_dataset,
    render_board,
    sample_camera,
    sample_pose,
)

__version__ = "0.1.0"
