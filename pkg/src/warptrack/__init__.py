"""Dense non-rigid scene tracking and interaction extraction for point cloud video.

The pipeline tracks a scene model captured from the first frame through
every later frame with a locally rigid warp field, segments the actor,
detects actor-environment contacts from the resulting trajectories, and
for each contact extracts the manipulated rigid object together with its
per-frame 6DOF pose.
"""

from .errors import (
    AmbiguousComponentError,
    ConfigError,
    DegenerateInputError,
    InputError,
    MissingArtifactError,
    NoConsensusError,
    NoOverlapError,
    ObjectLostError,
    TrackingError,
)
from .geometry import (
    CameraIntrinsics,
    NeighborhoodGraph,
    PointCloud,
    RGBDFrame,
    back_project,
    build_knn_graph,
    build_proximity_graph,
    connected_components,
    estimate_normals,
    knn_search,
    voxel_downsample,
)

__version__ = "0.1.0"

__all__ = [
    "AmbiguousComponentError",
    "CameraIntrinsics",
    "ConfigError",
    "DegenerateInputError",
    "InputError",
    "MissingArtifactError",
    "NeighborhoodGraph",
    "NoConsensusError",
    "NoOverlapError",
    "ObjectLostError",
    "PointCloud",
    "RGBDFrame",
    "TrackingError",
    "back_project",
    "build_knn_graph",
    "build_proximity_graph",
    "connected_components",
    "estimate_normals",
    "knn_search",
    "voxel_downsample",
    "__version__",
]
