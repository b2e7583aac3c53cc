"""Rover camera trajectories over the terrain: straight runs and arcs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidConfigError
from ..scene_core import Pose
from .scene import SceneModel


@dataclass(frozen=True)
class TrajectoryConfig:
    kind: str = "straight"       # "straight" or "arc"
    start_x: float = 0.0
    start_y: float = 0.0
    heading_deg: float = 0.0
    length: float = 20.0         # meters along the path
    speed: float = 1.0           # m/s
    rate_hz: float = 10.0
    camera_height: float = 2.2   # mast height above the terrain
    pitch_deg: float = -45.0     # negative looks down
    arc_radius: float = 8.0      # used when kind == "arc"
    # intrinsics for the rig that rides this trajectory
    width: int = 128
    height: int = 96
    fov_deg: float = 60.0
    near: float = 0.1
    far: float = 100.0

    def focal_px(self) -> float:
        return (self.width / 2.0) / np.tan(np.deg2rad(self.fov_deg) / 2.0)


def camera_pose(position: np.ndarray, yaw: float, pitch: float) -> Pose:
    """World->camera pose for a camera at `position` looking along `yaw`,
    pitched by `pitch` (radians, negative = down). Camera x right, y down."""
    cz = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), np.sin(pitch)])
    cx = np.cross(cz, np.array([0.0, 0.0, 1.0]))
    nx = np.linalg.norm(cx)
    if nx < 1e-9:
        raise InvalidConfigError("camera pitch too close to vertical")
    cx /= nx
    cy = np.cross(cz, cx)
    R = np.stack([cx, cy, cz])
    return Pose(R, -R @ position)


def generate_trajectory(cfg: TrajectoryConfig, scene: SceneModel):
    """Poses at fixed rate along the path; camera height tracks the terrain.

    Returns a list of (time_seconds, Pose) with the world->camera convention.
    """
    if cfg.speed <= 0 or cfg.rate_hz <= 0:
        raise InvalidConfigError("trajectory speed and rate must be positive")
    if cfg.length <= 0:
        raise InvalidConfigError("trajectory length must be positive")
    duration = cfg.length / cfg.speed
    count = int(round(duration * cfg.rate_hz)) + 1
    times = np.arange(count) / cfg.rate_hz
    arc = np.minimum(times * cfg.speed, cfg.length)

    heading = np.deg2rad(cfg.heading_deg)
    pitch = np.deg2rad(cfg.pitch_deg)
    start = np.array([cfg.start_x, cfg.start_y])

    if cfg.kind == "straight":
        d = np.array([np.cos(heading), np.sin(heading)])
        xy = start[None, :] + arc[:, None] * d[None, :]
        yaws = np.full(count, heading)
    elif cfg.kind == "arc":
        if cfg.arc_radius <= 0:
            raise InvalidConfigError("arc trajectories need arc_radius > 0")
        r = cfg.arc_radius
        # center sits to the left of the initial heading
        left = np.array([-np.sin(heading), np.cos(heading)])
        center = start + r * left
        theta0 = np.arctan2(start[1] - center[1], start[0] - center[0])
        theta = theta0 + arc / r
        xy = center[None, :] + r * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        yaws = theta + np.pi / 2.0
    else:
        raise InvalidConfigError(f"unknown trajectory kind {cfg.kind!r}")

    z, inside = scene.dem.sample(xy[:, 0], xy[:, 1])
    if not np.all(inside):
        raise InvalidConfigError("trajectory leaves the terrain bounds")

    poses = []
    for i in range(count):
        pos = np.array([xy[i, 0], xy[i, 1], float(z[i]) + cfg.camera_height])
        poses.append((float(times[i]), camera_pose(pos, float(yaws[i]), pitch)))
    return poses
