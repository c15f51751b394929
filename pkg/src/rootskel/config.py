"""Flat pipeline configuration with a versioned schema.

Every tunable of every stage lives here so runs are reproducible from
one document. Unknown keys are rejected rather than ignored; silent
typos in config files are worse than errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ValidationError

SCHEMA_VERSION = 1


@dataclass
class PipelineConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0

    # cross-view matching
    matching_threshold: int = 4
    vote_smallest_box_only: bool = False
    samples_per_root: int = 8
    oracle_matches: bool = False

    # detection decoding (used when a bundle ships raw grids)
    objectness_threshold: float = 0.25
    iou_threshold: float = 0.9
    keypoint_y_uses_ah: bool = False

    # triangulation + fusion
    asymmetric_errors_as_printed: bool = False
    max_mean_reproj_error_px: float = 3.0
    fusion_epsilon: float = 1e-6
    dist_threshold_px: float = 5.0

    # bundle adjustment
    sba_iterations: int = 20
    damping_policy: str = "adaptive"
    lambda0: float = 1e-3
    angle_weight: float = 0.1

    # main-root connection
    stroke_width: float = 3.0
    eq10_literal: bool = False
    retention_min_count: int = 2

    # evaluation
    criterion_2d_px: float = 5.0
    criterion_3d_frac: float = 0.02

    # execution
    jobs: int = 1

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValidationError(
                f"unsupported schema_version {self.schema_version}, expected {SCHEMA_VERSION}"
            )
        if self.matching_threshold < 1:
            raise ValidationError("matching_threshold must be >= 1")
        if self.damping_policy not in ("constant", "adaptive"):
            raise ValidationError("damping_policy must be 'constant' or 'adaptive'")
        if self.sba_iterations < 1:
            raise ValidationError("sba_iterations must be >= 1")
        if self.jobs < 1:
            raise ValidationError("jobs must be >= 1")
        for name in (
            "objectness_threshold",
            "iou_threshold",
        ):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ValidationError(f"{name} must lie in [0, 1]")
        for name in (
            "max_mean_reproj_error_px",
            "dist_threshold_px",
            "lambda0",
            "stroke_width",
            "criterion_2d_px",
            "criterion_3d_frac",
        ):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.angle_weight < 0:
            raise ValidationError("angle_weight must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_overrides(self, **overrides) -> "PipelineConfig":
        values = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in values:
                raise ValidationError(f"unknown config key: {key}")
            values[key] = value
        return PipelineConfig.from_dict(values)
