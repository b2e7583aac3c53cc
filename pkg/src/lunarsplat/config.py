"""Run configuration: one TOML file with sections mirroring module configs.

Unknown keys are hard errors (drift protection); every error names the
offending section.key. All randomness derives from the single [run] seed
through named substreams, so component tests and full runs agree.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from typing import Optional

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .errors import InvalidConfigError
from .losses import LossWeights
from .mapping import MappingConfig
from .synthsim import CorruptionConfig, SceneConfig, TrajectoryConfig


@dataclass(frozen=True)
class RunSection:
    mode: str = "gtgt"
    seed: int = 0


@dataclass(frozen=True)
class MappingSection:
    voxel_size: float = 0.05
    knn_k: int = 3
    scale_gain: float = 0.7
    keyframe_stride: int = 10
    batch_size: int = 2
    iters_per_keyframe: int = 8
    final_iters: int = 200
    opacity_init: float = 0.5
    prune_opacity_min: float = 0.005
    dem_prior: bool = False
    dem_low_margin: float = 0.2    # placeholder margins, tune per scene
    dem_high_margin: float = 2.0
    scene_extent: float = 0.0      # 0 -> derived from the scene bounds
    lr_mean_per_extent: float = 4e-5
    lr_mean_final_frac: float = 0.01
    lr_scale: float = 5e-3
    lr_rotation: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3


@dataclass(frozen=True)
class LossSection:
    lambda_ssim: float = 0.2
    lambda_scale: float = 0.1
    lambda_depth: float = 0.5
    lambda_empty: float = 0.1
    lambda_dense: float = 0.1
    lambda_semantic: float = 0.1
    tau_ratio: float = 10.0
    alpha_accum: float = 2.0
    depth_min: float = 0.3
    depth_max: float = 20.0
    semantic_clamp: float = 1e-6

    def weights(self) -> LossWeights:
        return LossWeights(
            lambda_ssim=self.lambda_ssim, lambda_scale=self.lambda_scale,
            lambda_depth=self.lambda_depth, lambda_empty=self.lambda_empty,
            lambda_dense=self.lambda_dense, lambda_semantic=self.lambda_semantic,
            tau_ratio=self.tau_ratio, alpha_accum=self.alpha_accum,
            depth_range=(self.depth_min, self.depth_max),
            semantic_clamp=self.semantic_clamp)


@dataclass(frozen=True)
class EvalSection:
    gt_resolution: float = 0.02
    surface_threshold: float = 0.05
    height_cell: float = 0.05
    opacity_min: float = 0.05      # extraction threshold for Gaussian checkpoints
    crop_tol: float = 0.1
    crop_frame_stride: int = 1
    depth_max: float = 20.0


@dataclass
class AppConfig:
    run: RunSection
    scene: SceneConfig
    trajectory: TrajectoryConfig
    losses: LossSection
    mapping: MappingSection
    eval: EvalSection
    corruption: Optional[CorruptionConfig] = None

    def weights(self) -> LossWeights:
        return self.losses.weights()

    def scene_extent(self) -> float:
        if self.mapping.scene_extent > 0:
            return self.mapping.scene_extent
        dx = self.scene.x_max - self.scene.x_min
        dy = self.scene.y_max - self.scene.y_min
        return 0.5 * float((dx * dx + dy * dy) ** 0.5)

    def mapping_config(self, dem_prior=None) -> MappingConfig:
        m = self.mapping
        return MappingConfig(
            voxel_size=m.voxel_size, knn_k=m.knn_k, scale_gain=m.scale_gain,
            keyframe_stride=m.keyframe_stride, batch_size=m.batch_size,
            iters_per_keyframe=m.iters_per_keyframe, final_iters=m.final_iters,
            opacity_init=m.opacity_init, prune_opacity_min=m.prune_opacity_min,
            dem_prior=dem_prior, scene_extent=self.scene_extent(),
            lr_mean_per_extent=m.lr_mean_per_extent,
            lr_mean_final_frac=m.lr_mean_final_frac, lr_scale=m.lr_scale,
            lr_rotation=m.lr_rotation, lr_opacity=m.lr_opacity,
            lr_color=m.lr_color, seed=self.run.seed)


_SECTIONS = {
    "run": RunSection,
    "scene": SceneConfig,
    "trajectory": TrajectoryConfig,
    "corruption": CorruptionConfig,
    "losses": LossSection,
    "mapping": MappingSection,
    "eval": EvalSection,
}


def _build_section(name: str, cls, data: dict):
    allowed = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in allowed:
            raise InvalidConfigError(f"unknown key {name}.{key}")
        target = allowed[key].type
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise InvalidConfigError(f"[{name}]: {exc}") from exc


def parse_config(text: str) -> AppConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise InvalidConfigError(f"config parse error: {exc}") from exc
    for section in data:
        if section not in _SECTIONS:
            raise InvalidConfigError(f"unknown section [{section}]")
    built = {}
    for name, cls in _SECTIONS.items():
        if name == "corruption":
            built[name] = (_build_section(name, cls, data[name])
                           if name in data else None)
        else:
            built[name] = _build_section(name, cls, data.get(name, {}))
    return AppConfig(**built)


def load_config(path) -> AppConfig:
    try:
        with open(path, "r") as f:
            text = f.read()
    except OSError as exc:
        raise InvalidConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
