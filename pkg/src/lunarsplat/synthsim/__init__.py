"""Synthetic scene, sensor, trajectory, and corruption models."""

from .corrupt import (
    STEREO_BASELINE_M,
    CorruptionConfig,
    SparseDepthSet,
    corrupt_depth,
    corrupt_labels,
    simulate_sparse_matches,
)
from .raycast import FrameTruth, render_ground_truth, truth_to_frame
from .scene import Box, Rock, SceneConfig, SceneModel, generate_scene
from .trajectory import TrajectoryConfig, camera_pose, generate_trajectory

__all__ = [
    "Box", "CorruptionConfig", "FrameTruth", "Rock", "SceneConfig", "SceneModel",
    "SparseDepthSet", "STEREO_BASELINE_M", "TrajectoryConfig", "camera_pose",
    "corrupt_depth", "corrupt_labels", "generate_scene", "generate_trajectory",
    "render_ground_truth", "simulate_sparse_matches", "truth_to_frame",
]
