"""Patch-based no-reference point cloud quality assessment.

The pipeline: normalize a colored point cloud into a canonical sphere,
extract patches by farthest point sampling plus k-nearest neighbors, run a
two-branch (structure/texture) point network over each patch, fuse pooled
patch features, and aggregate learned per-patch weights and scores into a
single predicted mean opinion score.
"""

from pstpcqa.pointcloud import PointCloud, LabeledSample, load_ply, save_ply, normalize
from pstpcqa.patching import PatchConfig, PatchSet, farthest_point_sampling, knn, random_sample, extract_patches
from pstpcqa.network import ModelConfig, SGPConfig, ModelWeights, PredictionBundle, init_weights, forward, param_count
from pstpcqa.training import LossConfig, ScheduleConfig, SplitPlan, loss, cosine_lr, make_splits, fit
from pstpcqa.evaluation import EvalReport, plcc, srcc, krcc, rmse, evaluate

__version__ = "0.1.0"

__all__ = [
    "PointCloud", "LabeledSample", "load_ply", "save_ply", "normalize",
    "PatchConfig", "PatchSet", "farthest_point_sampling", "knn", "random_sample", "extract_patches",
    "ModelConfig", "SGPConfig", "ModelWeights", "PredictionBundle", "init_weights", "forward", "param_count",
    "LossConfig", "ScheduleConfig", "SplitPlan", "loss", "cosine_lr", "make_splits", "fit",
    "EvalReport", "plcc", "srcc", "krcc", "rmse", "evaluate",
    "__version__",
]
