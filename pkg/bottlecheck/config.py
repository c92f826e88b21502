"""Configuration loading and validation for bottlecheck."""

import copy
import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any

from bottlecheck.classifiers import FAMILY_DEFAULTS, ClassifierConfig, Family
from bottlecheck.ensemble import EnsembleParams
from bottlecheck.features import FeatureKind, FeatureSpec, default_feature_grid
from bottlecheck.imaging import (
    DEFAULT_BACKGROUND_FRAMES,
    DEFAULT_DIFFERENCE_PATCHES,
    DEFAULT_ROI,
    Patch,
    TriggerConfig,
    default_trigger_config,
)
from bottlecheck.synthgen import SceneSpec

logger = logging.getLogger(__name__)


class ConfigValidationError(ValueError):
    """Raised when configuration validation fails."""

    pass


DEFAULT_CONFIG: dict[str, Any] = {
    "trigger": {
        "patches": [p.to_list() for p in DEFAULT_DIFFERENCE_PATCHES],
        "theta_thres": default_trigger_config().theta_thres,
        "n_background_frames": DEFAULT_BACKGROUND_FRAMES,
    },
    "roi": DEFAULT_ROI.to_list(),
    "lambda_avg": 0.5,
    "features": {
        "bhog": FeatureSpec.bhog().to_dict(),
        "bgh": FeatureSpec.bgh().to_dict(),
        "raw": FeatureSpec.raw().to_dict(),
    },
    "pool": {
        "families": [f.value for f in Family],
        "features": [k.value for k in FeatureKind],
        "hyperparameters": {f.value: dict(FAMILY_DEFAULTS[f]) for f in Family},
    },
    "ensemble": asdict(EnsembleParams()),
    "scene": SceneSpec().to_dict(),
    "sweep": {
        "feature_grid": [spec.to_dict() for spec in default_feature_grid()],
    },
    "paths": {
        "dataset": "data/dataset",
        "model": "models/ensemble.joblib",
        "reports": "reports",
    },
    "workers": 1,
    "debug": False,
}

# Mappings that a config file replaces wholesale instead of merging into.
REPLACED_KEYS = {"scene.defect_mix"}


@dataclass(frozen=True)
class PathsConfig:
    dataset: str
    model: str
    reports: str


@dataclass(frozen=True)
class PipelineConfig:
    """Validated pipeline configuration."""

    trigger: TriggerConfig
    roi: Patch
    lambda_avg: float
    features: dict[FeatureKind, FeatureSpec]
    families: tuple[Family, ...]
    pool_features: tuple[FeatureKind, ...]
    hyperparameters: dict[Family, ClassifierConfig]
    ensemble: EnsembleParams
    scene: SceneSpec
    paths: PathsConfig
    feature_grid: tuple[FeatureSpec, ...] = ()
    workers: int = 1
    debug: bool = False

    @property
    def pool(self) -> list[tuple[ClassifierConfig, FeatureSpec]]:
        """Candidate (classifier, feature) pairs: every family with every pool feature."""
        return [
            (self.hyperparameters[family], self.features[kind])
            for family in self.families
            for kind in self.pool_features
        ]

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(self, ensemble=replace(self.ensemble, seed=seed))

    def to_dict(self) -> dict[str, Any]:
        return {
            "trigger": {
                "patches": [p.to_list() for p in self.trigger.patches],
                "theta_thres": self.trigger.theta_thres,
                "n_background_frames": self.trigger.n_background_frames,
            },
            "roi": self.roi.to_list(),
            "lambda_avg": self.lambda_avg,
            "features": {kind.value: spec.to_dict() for kind, spec in self.features.items()},
            "pool": {
                "families": [f.value for f in self.families],
                "features": [k.value for k in self.pool_features],
                "hyperparameters": {f.value: c.params for f, c in self.hyperparameters.items()},
            },
            "ensemble": asdict(self.ensemble),
            "scene": self.scene.to_dict(),
            "sweep": {"feature_grid": [spec.to_dict() for spec in self.feature_grid]},
            "paths": asdict(self.paths),
            "workers": self.workers,
            "debug": self.debug,
        }


def _merge(defaults: dict, overrides: dict, prefix: str = "") -> dict:
    """Deep-merge overrides into a copy of defaults; unknown keys are errors."""
    merged = copy.deepcopy(defaults)
    for key, value in overrides.items():
        dotted = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigValidationError(f"Unknown config key: {dotted}")
        if isinstance(defaults[key], dict) and dotted not in REPLACED_KEYS:
            if not isinstance(value, dict):
                raise ConfigValidationError(f"Config key {dotted} must be an object")
            merged[key] = _merge(defaults[key], value, f"{dotted}.")
        else:
            merged[key] = value
    return merged


def _build(data: dict) -> PipelineConfig:
    """Construct the nested value objects; their own errors become ConfigValidationError."""
    try:
        trigger = TriggerConfig(
            patches=tuple(Patch.from_list(p) for p in data["trigger"]["patches"]),
            theta_thres=float(data["trigger"]["theta_thres"]),
            n_background_frames=int(data["trigger"]["n_background_frames"]),
        )
        roi = Patch.from_list(data["roi"])
        features = {
            FeatureKind(kind): FeatureSpec.from_dict({**spec, "kind": kind})
            for kind, spec in data["features"].items()
        }
        families = tuple(Family(f) for f in data["pool"]["families"])
        pool_features = tuple(FeatureKind(k) for k in data["pool"]["features"])
        hyperparameters = {
            Family(f): ClassifierConfig(Family(f), params)
            for f, params in data["pool"]["hyperparameters"].items()
        }
        ensemble = EnsembleParams(**data["ensemble"])
        scene = SceneSpec.from_dict(data["scene"])
        paths = PathsConfig(**data["paths"])
        feature_grid = tuple(FeatureSpec.from_dict(spec) for spec in data["sweep"]["feature_grid"])
        lambda_avg = float(data["lambda_avg"])
        workers = int(data["workers"])
        debug = bool(data["debug"])
    except (ValueError, TypeError, KeyError) as e:
        raise ConfigValidationError(f"Invalid configuration: {e}") from e

    if not 0.0 < lambda_avg < 1.0:
        raise ConfigValidationError(f"lambda_avg must lie in (0, 1), got {lambda_avg}")
    if workers < 1:
        raise ConfigValidationError(f"workers must be >= 1, got {workers}")
    if not families or not pool_features:
        raise ConfigValidationError("pool.families and pool.features must be non-empty")
    if not feature_grid:
        raise ConfigValidationError("sweep.feature_grid must be non-empty")
    if not roi.fits(scene.frame_w, scene.frame_h):
        raise ConfigValidationError(f"ROI {roi} does not fit the {scene.frame_w}x{scene.frame_h} frame")
    for p in trigger.patches:
        if not p.fits(scene.frame_w, scene.frame_h):
            raise ConfigValidationError(f"Trigger patch {p} does not fit the frame")
    return PipelineConfig(
        trigger=trigger,
        roi=roi,
        lambda_avg=lambda_avg,
        features=features,
        families=families,
        pool_features=pool_features,
        hyperparameters=hyperparameters,
        ensemble=ensemble,
        scene=scene,
        paths=paths,
        feature_grid=feature_grid,
        workers=workers,
        debug=debug,
    )


def default_config() -> PipelineConfig:
    return _build(copy.deepcopy(DEFAULT_CONFIG))


def load_config(path: Path | None = None) -> PipelineConfig:
    """Load configuration from a JSON file.

    Returns defaults if path is None. A given path must exist.
    Merges partial config with defaults; unknown keys are rejected.
    """
    if path is None:
        return default_config()
    if not Path(path).is_file():
        raise ConfigValidationError(f"Config file {path} not found")
    logger.info(f"Loading config from {path}")

    with open(path) as f:
        try:
            file_config = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigValidationError(f"Config file {path} is not valid JSON: {e}") from e
    if not isinstance(file_config, dict):
        raise ConfigValidationError(f"Config file {path} must hold a JSON object")

    return _build(_merge(DEFAULT_CONFIG, file_config))


def save_config(config: PipelineConfig, path: Path) -> None:
    """Save the full configuration document.

    Args:
        config: Configuration to save.
        path: Destination JSON file; parent directories are created.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(config.to_dict(), f, indent=2)
