"""pixelgraph: trainable pixel-node-pixel RGB-D segmentation on a latent graph."""

from .errors import PixelGraphError
from .geometry import (
    CameraIntrinsics,
    DepthMap,
    NeighborhoodParams,
    NormalMap,
    PointCloud,
    back_project,
    encode_normals,
    fill_invalid,
    fit_normal,
    gather_neighbors,
)
from .gnn import GcnLayer, GnnStack, ReasoningLayer, gcn_forward, graph_reasoning_forward, stack_forward
from .graph_build import (
    GraphBuildConfig,
    LatentGraph,
    ProjectionMatrix,
    adjacency_from_projection,
    adjacency_locality,
    adjacency_semantic,
    compute_centroids_oracle,
    fuse,
    generate_projection,
    harden,
    normalize_adjacency,
    predict_centroids,
    project_nodes,
    transform_features,
)
from .losses import (
    LabelMap,
    LossWeights,
    centroid_mse,
    cross_entropy,
    kl_uniformity,
    total_loss,
)
from .metrics import EvalReport, confusion_matrix, report_from_confusion
from .pipeline import (
    GnnSpec,
    ModelConfig,
    SegmentationModel,
    TrainConfig,
    evaluate,
    node_usage_entropy,
    prepare_scene,
    prepare_scenes,
    train,
    visualize_assignment,
)
from .reprojection import ReprojectionConfig, reproject
from .scenes import CLASS_NAMES, SceneParams, SyntheticScene, generate_scene, load_scene, save_scene
from .tensor import GradientTape, Tensor, constant, finite_difference_check

__version__ = "0.1.0"
