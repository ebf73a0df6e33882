"""Monocular orchard-row fruit counting: segmentation, counting, tracking."""

__version__ = "0.1.0"

from .imaging import (
    BinaryMask,
    BoundingBox,
    LabImage,
    RgbImage,
    box_iou,
    box_overlap_fraction,
    connected_components,
    rgb_to_lab,
)
from .segmentation import (
    AppleColorModel,
    ColorGaussian,
    ColorMixture,
    SegmentationParams,
    Superpixel,
    classify_superpixels,
    fit_color_mixture,
    gaussian_kl,
    match_components,
    segment_frame,
    slic,
    symmetrized_kl,
)
from .counting import (
    ClusterCount,
    CountingParams,
    SpatialGaussian,
    SpatialMixture,
    baseline_aic_bic,
    component_reward,
    count_cluster,
    count_frame,
    fit_spatial_mixture,
    kernel_response,
    mixture_penalty,
)
from .motion import (
    Homography,
    Keypoint,
    MotionParams,
    detect_and_describe,
    estimate_homography,
    match_descriptors,
    propagate_box,
)
from .merging import (
    ClusterTrack,
    GroundLine,
    MergingParams,
    filter_ground,
    finalize_counts,
    step_tracks,
)
from .evaluation import (
    FrameAnnotation,
    PRPoint,
    counting_confusion,
    match_detections,
    pr_curve,
)
from .pipeline import PipelineConfig, run_pipeline, resume_with_updated_model
from .synthgen import SceneSpec, corrupt, render_sequence
