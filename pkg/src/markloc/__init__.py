"""LiDAR road-marking detection and HD-map localization.

Pipeline: adaptive intensity segmentation -> probabilistic local map ->
bird's-eye-view rasterization + instance labeling -> semantic GICP
registration against an HD map, plus a deterministic scenario simulator and an
evaluation harness.
"""

from .core import (
    ConstraintCategory,
    LidarPoint,
    MarkingLabel,
    PointCloud,
    Pose2,
    category_of,
    compose,
    transform_point,
)
from .evaluation import (
    DirSource,
    LiveSource,
    PipelineConfig,
    PoseError,
    RunReport,
    pose_error,
    run_pipeline,
    write_report,
)
from .hdmap import HDMap, MapElement, associate, load_map, save_map
from .libev import (
    HeuristicLabeler,
    LiBEVRaster,
    MarkingInstance,
    OracleLabeler,
    RasterConfig,
    detection_metrics,
    rasterize,
)
from .localmap import LocalMap, LocalMapConfig, retention_probability
from .registration import (
    SemanticCloud,
    SolveReport,
    SolverParams,
    build_semantic_cloud,
    icp_solve,
    instance_covariance,
    map_covariance,
    sgicp_solve,
)
from .segmentation import (
    AdaptiveThreshold,
    GroundFilterConfig,
    ThresholdFilterState,
    extract_ground,
    kalman_update,
    segment_high_reflectance,
)
from .sim import Scenario, ScenarioSpec, build_scenario, render_scan, write_scenario

__version__ = "0.1.0"
