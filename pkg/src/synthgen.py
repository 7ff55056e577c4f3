"""
Synthetic data module for SourceCV.
Generates multi-source multilabel datasets with controllable source-level shift.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.special import expit, logit

from src.dataset import Dataset, FeatureVector, LabelSpace, Record, save_dataset
from src.errors import ConfigError
from src.seeding import derive_rng

logger = logging.getLogger(__name__)

# Base prevalence range and demographics of generated records
BASE_PREVALENCE_RANGE = (0.1, 0.35)
AGE_MEAN = 57.0
AGE_STD = 18.0
AGE_RANGE = (18.0, 95.0)
MALE_SHARE = 0.56

MANIFEST_NAME = "manifest.csv"


@dataclass(frozen=True)
class SynthSpec:
    """
    Parameters of the linear-Gaussian multi-source generator.

    features = sum_l y_l * effect_s[l] + offset_s + noise, where offset_s has
    norm covariate_shift and effect_s[l] is the shared effect plus a source
    perturbation of norm effect_shift * ||effect[l]||. Label prevalences are
    logit(base_l) + prior_shift * z_sl unless `prevalence` fixes them.
    """

    n_sources: int = 5
    source_size: Union[int, Tuple[int, ...]] = 2000
    n_labels: int = 8
    n_features: int = 24
    prior_shift: float = 0.0
    covariate_shift: float = 0.0
    effect_shift: float = 0.0
    effect_scale: float = 1.5
    noise_std: float = 1.0
    prevalence: Optional[Tuple[Tuple[float, ...], ...]] = None
    effect: Optional[Tuple[Tuple[float, ...], ...]] = None
    seed: int = 0

    def __post_init__(self):
        if self.n_sources < 1:
            raise ConfigError(f"n_sources must be at least 1, got {self.n_sources}")
        if self.n_labels < 1 or self.n_features < 1:
            raise ConfigError("n_labels and n_features must be at least 1")
        if not self.noise_std > 0:
            raise ConfigError(f"noise_std must be positive, got {self.noise_std}")
        for name in ("prior_shift", "covariate_shift", "effect_shift", "effect_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if isinstance(self.source_size, (list, tuple)):
            object.__setattr__(self, "source_size", tuple(int(s) for s in self.source_size))
            if len(self.source_size) != self.n_sources:
                raise ConfigError(f"source_size lists {len(self.source_size)} sizes for {self.n_sources} sources")
        if min(self.source_sizes) < 1:
            raise ConfigError("Every source needs at least one record")
        if self.prevalence is not None:
            prevalence = np.asarray(self.prevalence, dtype=float)
            if prevalence.shape != (self.n_sources, self.n_labels):
                raise ConfigError(f"prevalence must be {self.n_sources} x {self.n_labels}, got {prevalence.shape}")
            if np.any(prevalence < 0) or np.any(prevalence > 1):
                raise ConfigError("Prevalences must lie in [0, 1]")
            object.__setattr__(self, "prevalence", tuple(tuple(row) for row in prevalence.tolist()))
        if self.effect is not None:
            effect = np.asarray(self.effect, dtype=float)
            if effect.shape != (self.n_labels, self.n_features):
                raise ConfigError(f"effect must be {self.n_labels} x {self.n_features}, got {effect.shape}")
            object.__setattr__(self, "effect", tuple(tuple(row) for row in effect.tolist()))

    @property
    def source_sizes(self) -> Tuple[int, ...]:
        if isinstance(self.source_size, tuple):
            return self.source_size
        return (int(self.source_size),) * self.n_sources

    @property
    def source_ids(self) -> Tuple[str, ...]:
        return tuple(f"source_{s}" for s in range(self.n_sources))

    @property
    def label_codes(self) -> Tuple[str, ...]:
        return tuple(f"L{l:02d}" for l in range(self.n_labels))


_PRESETS: Dict[str, Dict[str, float]] = {
    "no_shift": {"prior_shift": 0.0, "covariate_shift": 0.0, "effect_shift": 0.0},
    "label_shift": {"prior_shift": 1.0, "covariate_shift": 0.0, "effect_shift": 0.0},
    "covariate_shift": {"prior_shift": 0.0, "covariate_shift": 1.0, "effect_shift": 1.0},
    "both": {"prior_shift": 1.0, "covariate_shift": 1.0, "effect_shift": 1.0},
}
PRESET_NAMES = tuple(_PRESETS)


def preset(name: str) -> SynthSpec:
    """
    Fixed specs: 5 sources x 2000 records, 8 labels, 24 features.

    Raises:
        ConfigError: Unknown preset name
    """
    if name not in _PRESETS:
        raise ConfigError(f"Unknown preset {name!r}, expected one of {list(PRESET_NAMES)}")
    return SynthSpec(n_sources=5, source_size=2000, n_labels=8, n_features=24, **_PRESETS[name])


def _unit_rows(rng: np.random.Generator, n_rows: int, n_cols: int) -> np.ndarray:
    rows = rng.standard_normal((n_rows, n_cols))
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    return rows / np.where(norms > 0, norms, 1.0)


def _shared_parameters(spec: SynthSpec) -> Tuple[np.ndarray, np.ndarray]:
    rng = derive_rng(spec.seed, "synthgen", "shared")
    base = rng.uniform(*BASE_PREVALENCE_RANGE, size=spec.n_labels)
    if spec.effect is not None:
        effect = np.asarray(spec.effect, dtype=float)
    else:
        effect = spec.effect_scale * _unit_rows(rng, spec.n_labels, spec.n_features)
    return base, effect


def _generate_source(spec: SynthSpec, s: int, base: np.ndarray, effect: np.ndarray) -> List[Record]:
    source_id = spec.source_ids[s]
    n = spec.source_sizes[s]
    rng = derive_rng(spec.seed, "synthgen", source_id)

    z = rng.standard_normal(spec.n_labels)
    if spec.prevalence is not None:
        prevalence = np.asarray(spec.prevalence[s], dtype=float)
    else:
        prevalence = expit(logit(base) + spec.prior_shift * z)

    offset = spec.covariate_shift * _unit_rows(rng, 1, spec.n_features)[0]
    effect_norms = np.linalg.norm(effect, axis=1, keepdims=True)
    source_effect = effect + spec.effect_shift * effect_norms * _unit_rows(rng, spec.n_labels, spec.n_features)

    Y = rng.random((n, spec.n_labels)) < prevalence
    X = Y.astype(float) @ source_effect + offset + spec.noise_std * rng.standard_normal((n, spec.n_features))
    ages = np.round(np.clip(rng.normal(AGE_MEAN, AGE_STD, size=n), *AGE_RANGE), 1)
    males = rng.random(n) < MALE_SHARE

    codes = spec.label_codes
    records = []
    for i in range(n):
        labels = frozenset(codes[l] for l in np.flatnonzero(Y[i]))
        records.append(
            Record(
                record_id=f"{source_id}-{i:05d}",
                source_id=source_id,
                age=float(ages[i]),
                sex="male" if males[i] else "female",
                labels=labels,
                payload=FeatureVector(tuple(X[i])),
                # no finding means a normal record
                normal=not labels,
            )
        )
    logger.debug(f"Generated {n} records for {source_id} with prevalences {np.round(prevalence, 3).tolist()}")
    return records


def generate(spec: SynthSpec) -> Dataset:
    """
    Draw a synthetic dataset.

    Every source uses its own stream derived from (spec.seed, source id), so
    the output is deterministic and independent of generation order.

    Returns:
        Dataset with FeatureVector payloads and labels L00, L01, ...
    """
    base, effect = _shared_parameters(spec)
    records = []
    for s in range(spec.n_sources):
        records.extend(_generate_source(spec, s, base, effect))
    ds = Dataset(records=tuple(records), label_space=LabelSpace(spec.label_codes))
    logger.info(
        f"Generated {len(ds)} records over {spec.n_sources} sources "
        f"(prior {spec.prior_shift}, covariate {spec.covariate_shift}, effect {spec.effect_shift})"
    )
    return ds


def write_synthetic(ds: Dataset, outdir: str) -> str:
    """Write a manifest plus feature payload files under outdir."""
    path = Path(outdir) / MANIFEST_NAME
    return save_dataset(ds, str(path))


def with_overrides(spec: SynthSpec, **overrides) -> SynthSpec:
    """Copy of spec with the given fields replaced (validated again)."""
    return replace(spec, **overrides)
