"""Configuration manager for run manifests."""

import copy
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import yaml

from .measures import MeasureSettings
from .records import AXES
from .robust_regress import REGRESSION_FAMILIES
from .trainer import DatasetSpec, TrainingSettings, expand_grid

logger = logging.getLogger(__name__)

SEED_ENV_VAR = "ROBUSTGEN_SEED"

# Sections that only locate files; they do not change any result.
UNHASHED_SECTIONS = ("store", "output")


class ManifestError(ValueError):
    """Raised when a run manifest is missing, unreadable or invalid."""


def get_config_dir() -> Path:
    """
    Return the user config directory.

    Platform-specific locations:
    - Windows: %APPDATA%\\robustgen\\
    - macOS/Linux: ~/.robustgen/
    """
    if sys.platform == "win32":
        appdata = os.environ.get("APPDATA")
        if appdata:
            return Path(appdata) / "robustgen"
        return Path.home() / "robustgen"
    else:
        return Path.home() / ".robustgen"


def get_config_path() -> Path:
    """Return the full path to user config.yaml."""
    return get_config_dir() / "config.yaml"


def load_user_config() -> Optional[dict[str, Any]]:
    """
    Load existing user configuration if it exists.

    Returns:
        Config dict if file exists and is valid, None otherwise.
    """
    config_path = get_config_path()
    if not config_path.exists():
        return None

    try:
        with open(config_path, "r") as f:
            return yaml.safe_load(f)
    except (yaml.YAMLError, OSError) as e:
        logger.warning("Ignoring unreadable user config %s: %s", config_path, e)
        return None


def load_bundled_config() -> dict[str, Any]:
    """Load the manifest shipped with the package."""
    config_file = resources.files(__package__) / "config.yaml"
    with config_file.open("r") as f:
        return yaml.safe_load(f)


def load_yaml_file(path: Union[str, Path]) -> dict[str, Any]:
    path = Path(path)
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ManifestError(f"Cannot read manifest {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ManifestError(f"Invalid YAML in manifest {path}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ManifestError(f"Manifest {path} must be a mapping at the top level")
    return data


def deep_merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> dict[str, Any]:
    """Merge ``override`` into a copy of ``base``; nested mappings merge, anything else replaces."""
    merged = copy.deepcopy(dict(base))
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def manifest_hash(data: Mapping[str, Any]) -> str:
    """First 16 hex digits of the SHA-256 of the canonical JSON form of a manifest."""
    hashed = {key: value for key, value in data.items() if key not in UNHASHED_SECTIONS}
    canonical = json.dumps(hashed, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class EvaluationSettings:
    axes: tuple[str, ...] = AXES
    n_eff_min: float = 12.0
    noise_filter: bool = True


@dataclass(frozen=True)
class RunManifest:
    """A validated run manifest."""

    grid: dict[str, list[Any]]
    datasets: dict[str, DatasetSpec]
    num_seeds: int
    master_seed: int
    training: TrainingSettings
    workers: int
    measures: MeasureSettings
    evaluation: EvaluationSettings
    regression_family: str
    store_path: Path
    output_dir: Path
    raw: dict[str, Any] = field(default_factory=dict, compare=False, repr=False)

    @property
    def hash(self) -> str:
        return manifest_hash(self.raw)

    def settings_hash(self, **settings: Any) -> str:
        """The manifest hash qualified by command-line settings that change the outputs."""
        return f"{self.hash}-{manifest_hash(settings)[:8]}"

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunManifest":
        try:
            return cls._from_dict(data)
        except ManifestError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"Invalid manifest: {e}") from e

    @classmethod
    def _from_dict(cls, data: Mapping[str, Any]) -> "RunManifest":
        grid = _section(data, "grid")
        grid = {axis: _as_list(grid.get(axis), f"grid.{axis}") for axis in AXES}
        unknown_axes = set(_section(data, "grid")) - set(AXES)
        if unknown_axes:
            raise ManifestError(f"Unknown grid axes: {', '.join(sorted(unknown_axes))}")

        datasets = {
            str(dataset_id): DatasetSpec.from_dict(_mapping(spec, f"datasets.{dataset_id}"))
            for dataset_id, spec in _section(data, "datasets").items()
        }
        missing = [str(d) for d in grid["dataset_id"] if str(d) not in datasets]
        if missing:
            raise ManifestError(f"Grid refers to undefined datasets: {', '.join(missing)}")
        expand_grid(grid)

        seeds = _section(data, "seeds")
        training = dict(_section(data, "training"))
        workers = int(training.pop("workers", 1))
        evaluation = _section(data, "evaluation")
        axes = tuple(evaluation.get("axes", AXES))
        bad_axes = [axis for axis in axes if axis not in AXES]
        if bad_axes:
            raise ManifestError(f"Unknown evaluation axes: {', '.join(bad_axes)}")

        family = _section(data, "regression").get("family", "single_axis_varies")
        if family not in REGRESSION_FAMILIES:
            raise ManifestError(
                f"Unknown regression family {family!r}; "
                f"choose from {', '.join(REGRESSION_FAMILIES)}"
            )

        manifest = cls(
            grid=grid,
            datasets=datasets,
            num_seeds=int(seeds.get("num_seeds", 10)),
            master_seed=int(seeds.get("master_seed", 0)),
            training=TrainingSettings(**training),
            workers=workers,
            measures=MeasureSettings(**_section(data, "measures")),
            evaluation=EvaluationSettings(
                axes=axes,
                n_eff_min=float(evaluation.get("n_eff_min", 12)),
                noise_filter=bool(evaluation.get("noise_filter", True)),
            ),
            regression_family=family,
            store_path=Path(_section(data, "store").get("path", "runs/records.jsonl")),
            output_dir=Path(_section(data, "output").get("dir", "results")),
            raw=copy.deepcopy(dict(data)),
        )
        if manifest.num_seeds < 1:
            raise ManifestError("seeds.num_seeds must be at least 1")
        if manifest.workers < 1:
            raise ManifestError("training.workers must be at least 1")
        return manifest


def _mapping(value: Any, name: str) -> Mapping[str, Any]:
    if value is None:
        return {}
    if not isinstance(value, Mapping):
        raise ManifestError(f"{name} must be a mapping")
    return value


def _section(data: Mapping[str, Any], name: str) -> Mapping[str, Any]:
    return _mapping(data.get(name), name)


def _as_list(value: Any, name: str) -> list[Any]:
    if not isinstance(value, list) or not value:
        raise ManifestError(f"{name} must be a non-empty list")
    return list(value)


def apply_seed_override(data: dict[str, Any]) -> dict[str, Any]:
    """Replace seeds.master_seed with ROBUSTGEN_SEED when it is set."""
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None or raw.strip() == "":
        return data
    try:
        seed = int(raw)
    except ValueError:
        raise ManifestError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from None
    data = deep_merge(data, {"seeds": {"master_seed": seed}})
    logger.info("Master seed overridden to %d by %s", seed, SEED_ENV_VAR)
    return data


def load_manifest(
    config_path: Optional[Union[str, Path]] = None, *, use_user_config: bool = True
) -> RunManifest:
    """
    Resolve the run manifest with priority: explicit file > user config > bundled config.
    """
    data = load_bundled_config()
    if use_user_config:
        user_config = load_user_config()
        if user_config:
            data = deep_merge(data, user_config)
    if config_path is not None:
        data = deep_merge(data, load_yaml_file(config_path))
    return RunManifest.from_dict(apply_seed_override(data))
