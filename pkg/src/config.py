"""
Configuration module for SourceCV.
Parses experiment YAML files into an immutable ExperimentConfig.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml

from src.errors import ConfigError
from src.models import MODEL_KINDS, TrainConfig
from src.signal_prep import PrepConfig
from src.synthgen import PRESET_NAMES, SynthSpec, preset, with_overrides

logger = logging.getLogger(__name__)

PROTOCOLS = ("single_source", "multi_source", "source_prediction")
INPUT_SETS = ("features", "features_labels", "labels")
DEFAULT_K = {"single_source": 5, "multi_source": None, "source_prediction": None}

TOP_LEVEL_KEYS = {
    "protocol", "dataset", "model", "prep", "k", "seed", "n_jobs", "output_dir", "source_prediction",
}
DATASET_KEYS = {"manifest", "synthetic"}
SYNTHETIC_KEYS = {
    "preset", "seed", "n_sources", "source_size", "n_labels", "n_features", "prior_shift",
    "covariate_shift", "effect_shift", "effect_scale", "noise_std", "prevalence", "effect",
}
MODEL_KEYS = {
    "kind", "max_iter", "tol", "l2", "n_rounds", "max_depth", "learning_rate",
    "n_bins", "reg_lambda", "min_child_weight", "gamma",
}
PREP_KEYS = {"target_fs", "target_len", "age_scale_max", "per_lead_normalization", "lead_index"}
SOURCE_PREDICTION_KEYS = {"train_frac", "input_sets"}


@dataclass(frozen=True)
class SourcePredictionConfig:
    train_frac: float = 0.7
    input_sets: Tuple[str, ...] = INPUT_SETS

    def __post_init__(self):
        if not 0 < self.train_frac < 1:
            raise ConfigError(f"train_frac must lie in (0, 1), got {self.train_frac}")
        object.__setattr__(self, "input_sets", tuple(self.input_sets))
        unknown = [name for name in self.input_sets if name not in INPUT_SETS]
        if unknown or not self.input_sets:
            raise ConfigError(f"input_sets must be a non-empty subset of {list(INPUT_SETS)}, got {list(self.input_sets)}")


@dataclass(frozen=True)
class ExperimentConfig:
    """
    One experiment: dataset, protocol, learner and output location.

    Exactly one of manifest and synthetic is set. k = None means the
    protocol default (5 for single_source, the number of training sources
    for multi_source).
    """

    protocol: str
    manifest: Optional[str] = None
    synthetic: Optional[SynthSpec] = None
    model_kind: str = "logistic"
    train: TrainConfig = field(default_factory=TrainConfig)
    prep: PrepConfig = field(default_factory=PrepConfig)
    k: Optional[int] = None
    seed: int = 0
    n_jobs: int = 1
    output_dir: str = "results"
    source_prediction: SourcePredictionConfig = field(default_factory=SourcePredictionConfig)

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"Unknown protocol {self.protocol!r}, expected one of {list(PROTOCOLS)}")
        if (self.manifest is None) == (self.synthetic is None):
            raise ConfigError("Exactly one of dataset.manifest and dataset.synthetic must be given")
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"Unknown model kind {self.model_kind!r}, expected one of {sorted(MODEL_KINDS)}")
        if self.k is not None and self.k < 2:
            raise ConfigError(f"k must be at least 2, got {self.k}")
        if self.n_jobs == 0:
            raise ConfigError("n_jobs must not be 0")

    def to_dict(self) -> Dict[str, Any]:
        """Plain-data echo of the configuration for reports."""
        return {
            "protocol": self.protocol,
            "manifest": self.manifest,
            "synthetic": asdict(self.synthetic) if self.synthetic is not None else None,
            "model": {"kind": self.model_kind, **asdict(self.train)},
            "prep": asdict(self.prep),
            "k": self.k,
            "seed": self.seed,
            "source_prediction": {
                "train_frac": self.source_prediction.train_frac,
                "input_sets": list(self.source_prediction.input_sets),
            },
        }


def _section(data: Dict[str, Any], name: str, allowed: set) -> Dict[str, Any]:
    section = data.get(name) or {}
    if not isinstance(section, dict):
        raise ConfigError(f"Section {name!r} must be a mapping")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"Unknown keys in {name!r}: {unknown}")
    return section


def _build(cls, values: Dict[str, Any], where: str):
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid {where} settings: {e}")


def _int(value: Any, name: str) -> int:
    try:
        return int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be an integer, got {value!r}")


def _synthetic_spec(section: Dict[str, Any], seed: int) -> SynthSpec:
    values = dict(section)
    preset_name = values.pop("preset", None)
    values.setdefault("seed", seed)
    for key in ("prevalence", "effect"):
        if key in values and values[key] is not None:
            values[key] = tuple(tuple(row) for row in values[key])
    if isinstance(values.get("source_size"), list):
        values["source_size"] = tuple(values["source_size"])
    if preset_name is not None:
        if preset_name not in PRESET_NAMES:
            raise ConfigError(f"Unknown preset {preset_name!r}, expected one of {list(PRESET_NAMES)}")
        try:
            return with_overrides(preset(preset_name), **values)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid synthetic settings: {e}")
    return _build(SynthSpec, values, "synthetic")


def config_from_dict(data: Dict[str, Any], base_dir: Optional[str] = None) -> ExperimentConfig:
    """
    Build an ExperimentConfig from parsed YAML.

    Args:
        data: Parsed mapping
        base_dir: Directory relative manifest paths resolve against

    Raises:
        ConfigError: Unknown keys, missing sections or invalid values
    """
    if not isinstance(data, dict):
        raise ConfigError("Configuration must be a mapping")
    unknown = sorted(set(data) - TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigError(f"Unknown top-level keys: {unknown}")
    if "protocol" not in data:
        raise ConfigError("Configuration lacks 'protocol'")

    seed = _int(data.get("seed", 0), "seed")
    dataset = _section(data, "dataset", DATASET_KEYS)
    manifest = dataset.get("manifest")
    if manifest is not None and base_dir is not None and not Path(manifest).is_absolute():
        manifest = str(Path(base_dir) / manifest)
    synthetic = None
    if dataset.get("synthetic") is not None:
        synthetic = _synthetic_spec(_section(dataset, "synthetic", SYNTHETIC_KEYS), seed)

    model = dict(_section(data, "model", MODEL_KEYS))
    model_kind = model.pop("kind", "logistic")
    train = _build(TrainConfig, {**model, "seed": seed}, "model")

    prep = _build(PrepConfig, {**_section(data, "prep", PREP_KEYS), "rng_seed": seed}, "prep")

    sp = dict(_section(data, "source_prediction", SOURCE_PREDICTION_KEYS))
    if "input_sets" in sp:
        sp["input_sets"] = tuple(sp["input_sets"])
    source_prediction = _build(SourcePredictionConfig, sp, "source_prediction")

    k = data.get("k", DEFAULT_K.get(data["protocol"]))
    return ExperimentConfig(
        protocol=data["protocol"],
        manifest=manifest,
        synthetic=synthetic,
        model_kind=model_kind,
        train=train,
        prep=prep,
        k=_int(k, "k") if k is not None else None,
        seed=seed,
        n_jobs=_int(data.get("n_jobs", 1), "n_jobs"),
        output_dir=str(data.get("output_dir", "results")),
        source_prediction=source_prediction,
    )


def load_config(path: str) -> ExperimentConfig:
    """
    Read an experiment YAML file.

    Raises:
        ConfigError: Unreadable file, invalid YAML or invalid settings
    """
    config_path = Path(path)
    try:
        with open(config_path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except FileNotFoundError:
        logger.error(f"Config file not found: {config_path}")
        raise ConfigError(f"Config file not found: {config_path}")
    except yaml.YAMLError as e:
        logger.error(f"Invalid YAML in {config_path}: {e}")
        raise ConfigError(f"Invalid YAML in {config_path}: {e}")

    cfg = config_from_dict(data, base_dir=str(config_path.parent))
    logger.info(f"Loaded {cfg.protocol} config from {config_path}")
    return cfg


def load_synth_config(path: str) -> SynthSpec:
    """
    Read a generator YAML file (the keys of dataset.synthetic at top level).

    Raises:
        ConfigError: Unreadable file or invalid settings
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}")
    except yaml.YAMLError as e:
        raise ConfigError(f"Invalid YAML in {path}: {e}")
    if not isinstance(data, dict):
        raise ConfigError("Generator configuration must be a mapping")
    unknown = sorted(set(data) - SYNTHETIC_KEYS)
    if unknown:
        raise ConfigError(f"Unknown generator keys: {unknown}")
    return _synthetic_spec(data, _int(data.get("seed", 0), "seed"))
