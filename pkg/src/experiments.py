"""
Experiment orchestrator module for SourceCV.
Runs the single-source, multi-source and source-prediction protocols end to end.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from src.config import ExperimentConfig
from src.dataset import (
    Dataset,
    FeatureVector,
    LabelMatrix,
    SignalRef,
    build_label_matrix,
    feature_matrix,
    load_dataset,
    subset,
)
from src.errors import DataError
from src.metrics import (
    confusion_and_accuracy,
    macro_auc,
    majority_baseline,
    micro_auc,
    reliability,
    valid_labels,
)
from src.models import fit_softmax, get_fitter, predict_classes, predict_scores
from src.seeding import derive_seed
from src.signal_prep import SEX_NUMERIC, encode_demographics, extract_dataset_features
from src.splits import FoldPlan, leave_source_out, stratified_holdout, stratified_kfold
from src.synthgen import generate

logger = logging.getLogger(__name__)

RESULT_SCHEMA_VERSION = 1
METHOD_KFOLD = "kfold"
METHOD_LSO = "lso"
METRICS = ("macro_auc", "micro_auc")
ALL_CONTEXTS = "all"
SINGLE_SOURCE_DEFAULT_K = 5


@dataclass
class ProtocolResult:
    """
    Everything a protocol run produced.

    contexts holds one row per (context, method, metric) with the CV
    estimate and the test value; reliability is computed from exactly those
    rows.
    """

    protocol: str
    config: Dict = field(default_factory=dict)
    sources: Dict[str, int] = field(default_factory=dict)
    labels: List[str] = field(default_factory=list)
    contexts: List[Dict] = field(default_factory=list)
    folds: List[Dict] = field(default_factory=list)
    reliability: List[Dict] = field(default_factory=list)
    source_prediction: List[Dict] = field(default_factory=list)
    schema_version: int = RESULT_SCHEMA_VERSION

    def is_empty(self) -> bool:
        return not self.contexts and not self.source_prediction

    def to_dict(self) -> Dict:
        return {
            "schema_version": self.schema_version,
            "protocol": self.protocol,
            "config": self.config,
            "sources": self.sources,
            "labels": self.labels,
            "contexts": self.contexts,
            "folds": self.folds,
            "reliability": self.reliability,
            "source_prediction": self.source_prediction,
        }


def load_experiment_dataset(cfg: ExperimentConfig) -> Dataset:
    """Dataset named by the config: a manifest on disk or a synthetic spec."""
    if cfg.manifest is not None:
        return load_dataset(cfg.manifest)
    return generate(cfg.synthetic)


def design_matrix(ds: Dataset, cfg: ExperimentConfig) -> np.ndarray:
    """
    Learner inputs: payload features followed by age_scaled and sex_numeric.

    Signal payloads go through lead II feature extraction, which appends the
    same two demographic columns.

    Raises:
        DataError: Mixed payload kinds
    """
    kinds = {type(record.payload) for record in ds.records}
    if kinds == {SignalRef}:
        return extract_dataset_features(ds, cfg.prep, n_jobs=cfg.n_jobs)
    if kinds != {FeatureVector}:
        raise DataError("Datasets mixing signal and feature payloads are not supported")

    demographics = np.array(
        [
            (encode_demographics(r.age, r.sex, cfg.prep.age_scale_max)[0], SEX_NUMERIC[r.sex])
            for r in ds.records
        ]
    )
    return np.hstack([feature_matrix(ds), demographics])


def _check_disjoint(a: np.ndarray, b: np.ndarray, what: str) -> None:
    overlap = np.intersect1d(a, b)
    if overlap.size:
        logger.error(f"Leakage detected in {what}: {overlap.size} shared records")
        raise RuntimeError(f"Leakage detected in {what}: {overlap.size} shared records")


def _evaluate(model, X: np.ndarray, train_lm: LabelMatrix, eval_lm: LabelMatrix) -> Optional[Dict[str, float]]:
    """Macro and micro AUC on an evaluation slice, or None when undefined."""
    valid = valid_labels(train_lm, eval_lm)
    sm = predict_scores(model, X)
    try:
        return {"macro_auc": macro_auc(sm, eval_lm, valid), "micro_auc": micro_auc(sm, eval_lm, valid)}
    except ValueError as e:
        logger.debug(f"AUC undefined: {e}")
        return None


def cross_validate(
    X: np.ndarray,
    lm: LabelMatrix,
    plan: FoldPlan,
    fit: Callable,
    cfg: ExperimentConfig,
    context: str,
    method: str,
) -> Tuple[Dict[str, float], List[Dict]]:
    """
    CV estimate as the unweighted mean of fold metrics.

    Folds without a valid label are skipped with a warning.

    Returns:
        Tuple of (estimate per metric, fold rows)

    Raises:
        DataError: No fold produced a defined metric
        RuntimeError: A training fold shares records with its validation fold
    """
    rows = []
    for fold, (train_idx, val_idx) in enumerate(plan.splits()):
        _check_disjoint(train_idx, val_idx, f"{context}/{method} fold {fold}")
        train_lm = lm.rows(train_idx)
        model = fit(X[train_idx], train_lm, cfg.train)
        scores = _evaluate(model, X[val_idx], train_lm, lm.rows(val_idx))
        if scores is None:
            logger.warning(f"{context}/{method}: fold {fold} has no valid label, skipped")
            continue
        row = {
            "context": context,
            "method": method,
            "fold": fold,
            "n_train": int(train_idx.size),
            "n_val": int(val_idx.size),
            "fold_source": plan.fold_source[fold] if plan.fold_source else "",
        }
        row.update(scores)
        rows.append(row)

    if not rows:
        logger.error(f"{context}/{method}: every fold was undefined")
        raise DataError(f"No fold of {context}/{method} had a valid label")

    estimate = {metric: float(np.mean([row[metric] for row in rows])) for metric in METRICS}
    logger.debug(f"{context}/{method}: {len(rows)} of {plan.n_folds} folds, estimate {estimate}")
    return estimate, rows


def _context_rows(
    context: str, train_sources: Sequence[str], test_source: str, method: str,
    estimate: Dict[str, float], test: Dict[str, float],
) -> List[Dict]:
    return [
        {
            "context": context,
            "train_sources": "|".join(train_sources),
            "test_source": test_source,
            "method": method,
            "metric": metric,
            "cv_estimate": estimate[metric],
            "test_value": test[metric],
            "signed_error": estimate[metric] - test[metric],
        }
        for metric in METRICS
    ]


def _reliability_rows(contexts: List[Dict], group: str, method: str) -> List[Dict]:
    rows = []
    for metric in METRICS:
        selected = [c for c in contexts if c["method"] == method and c["metric"] == metric]
        if len(selected) < 2:
            logger.warning(f"Reliability for {group}/{method}/{metric} needs 2 contexts, got {len(selected)}")
            continue
        report = reliability(
            [(c["cv_estimate"], c["test_value"]) for c in selected],
            context_ids=[c["context"] for c in selected],
        )
        row = {"context": group, "method": method, "metric": metric}
        row.update(report.to_dict())
        rows.append(row)
    return rows


def _source_indices(ds: Dataset) -> Dict[str, np.ndarray]:
    sources = ds.source_array()
    return {source: np.flatnonzero(sources == source) for source in ds.source_names}


def _single_source_context(
    cfg: ExperimentConfig, X: np.ndarray, lm: LabelMatrix, record_ids: List[str],
    indices: Dict[str, np.ndarray], train_source: str, k: int,
) -> Tuple[List[Dict], List[Dict]]:
    fit = get_fitter(cfg.model_kind)
    train_idx = indices[train_source]
    train_lm = lm.rows(train_idx)
    plan = stratified_kfold(
        train_lm, k, derive_seed(cfg.seed, "single_source", train_source),
        record_ids=[record_ids[i] for i in train_idx],
    )
    estimate, folds = cross_validate(X[train_idx], train_lm, plan, fit, cfg, train_source, METHOD_KFOLD)

    final = fit(X[train_idx], train_lm, cfg.train)
    contexts = []
    for test_source, test_idx in indices.items():
        if test_source == train_source:
            continue
        _check_disjoint(train_idx, test_idx, f"{train_source}->{test_source}")
        test = _evaluate(final, X[test_idx], train_lm, lm.rows(test_idx))
        if test is None:
            logger.warning(f"{train_source}->{test_source}: no valid label, pair skipped")
            continue
        contexts.extend(
            _context_rows(f"{train_source}->{test_source}", [train_source], test_source, METHOD_KFOLD, estimate, test)
        )
    return contexts, folds


def run_single_source(cfg: ExperimentConfig, ds: Optional[Dataset] = None) -> ProtocolResult:
    """
    Train on one source, test on every other source.

    For each train source: stratified K-fold CV estimate, a final model on
    the whole source, and test AUCs on each other source. Reliability is
    reported per train source and over all pairs.

    Raises:
        DataError: Fewer than two sources, or a source smaller than K
    """
    ds = ds if ds is not None else load_experiment_dataset(cfg)
    k = cfg.k or SINGLE_SOURCE_DEFAULT_K
    if len(ds.sources) < 2:
        raise DataError(f"single_source needs at least 2 sources, got {len(ds.sources)}")
    small = [s for s, n in ds.sources.items() if n < k]
    if small:
        logger.error(f"Sources smaller than K={k}: {small}")
        raise DataError(f"Sources with fewer records than K={k}: {small}")

    X = design_matrix(ds, cfg)
    lm = build_label_matrix(ds)
    indices = _source_indices(ds)
    logger.info(f"Running single_source over {len(indices)} sources with K={k}")

    outputs = Parallel(n_jobs=cfg.n_jobs)(
        delayed(_single_source_context)(cfg, X, lm, ds.record_ids, indices, source, k)
        for source in ds.source_names
    )

    result = ProtocolResult(
        protocol="single_source", config=cfg.to_dict(), sources=dict(ds.sources), labels=list(lm.labels)
    )
    for contexts, folds in outputs:
        result.contexts.extend(contexts)
        result.folds.extend(folds)
    for source in ds.source_names:
        own = [c for c in result.contexts if c["train_sources"] == source]
        result.reliability.extend(_reliability_rows(own, source, METHOD_KFOLD))
    result.reliability.extend(_reliability_rows(result.contexts, ALL_CONTEXTS, METHOD_KFOLD))

    logger.info(f"single_source complete: {len(result.contexts) // len(METRICS)} pairs evaluated")
    return result


def _multi_source_context(
    cfg: ExperimentConfig, ds: Dataset, X: np.ndarray, lm: LabelMatrix,
    indices: Dict[str, np.ndarray], test_source: str,
) -> Tuple[List[Dict], List[Dict]]:
    fit = get_fitter(cfg.model_kind)
    train_sources = [s for s in ds.source_names if s != test_source]
    train_idx = np.sort(np.concatenate([indices[s] for s in train_sources]))
    test_idx = indices[test_source]
    _check_disjoint(train_idx, test_idx, f"held-out {test_source}")

    train_ds = subset(ds, train_idx)
    train_lm = lm.rows(train_idx)
    X_train = X[train_idx]
    k = cfg.k or len(train_sources)
    context = f"test={test_source}"

    kfold_plan = stratified_kfold(
        train_lm, k, derive_seed(cfg.seed, "multi_source", test_source), record_ids=train_ds.record_ids
    )
    lso_plan = leave_source_out(train_ds)
    if test_source in (lso_plan.fold_source or ()):
        raise RuntimeError(f"Leakage detected: {test_source} appears in its own training folds")

    kfold_estimate, kfold_folds = cross_validate(X_train, train_lm, kfold_plan, fit, cfg, context, METHOD_KFOLD)
    lso_estimate, lso_folds = cross_validate(X_train, train_lm, lso_plan, fit, cfg, context, METHOD_LSO)

    # one final model serves both methods
    final = fit(X_train, train_lm, cfg.train)
    test = _evaluate(final, X[test_idx], train_lm, lm.rows(test_idx))
    if test is None:
        logger.warning(f"{context}: no valid label on the held-out source, context skipped")
        return [], kfold_folds + lso_folds

    contexts = _context_rows(context, train_sources, test_source, METHOD_KFOLD, kfold_estimate, test)
    contexts += _context_rows(context, train_sources, test_source, METHOD_LSO, lso_estimate, test)
    return contexts, kfold_folds + lso_folds


def run_multi_source(cfg: ExperimentConfig, ds: Optional[Dataset] = None) -> ProtocolResult:
    """
    Hold out each source in turn and compare K-fold and leave-source-out CV.

    Raises:
        DataError: Fewer than three sources
    """
    ds = ds if ds is not None else load_experiment_dataset(cfg)
    if len(ds.sources) < 3:
        raise DataError(f"multi_source needs at least 3 sources, got {len(ds.sources)}")

    X = design_matrix(ds, cfg)
    lm = build_label_matrix(ds)
    indices = _source_indices(ds)
    logger.info(f"Running multi_source over {len(indices)} held-out sources")

    outputs = Parallel(n_jobs=cfg.n_jobs)(
        delayed(_multi_source_context)(cfg, ds, X, lm, indices, source) for source in ds.source_names
    )

    result = ProtocolResult(
        protocol="multi_source", config=cfg.to_dict(), sources=dict(ds.sources), labels=list(lm.labels)
    )
    for contexts, folds in outputs:
        result.contexts.extend(contexts)
        result.folds.extend(folds)
    for method in (METHOD_KFOLD, METHOD_LSO):
        result.reliability.extend(_reliability_rows(result.contexts, ALL_CONTEXTS, method))

    logger.info(f"multi_source complete: {len(result.contexts) // (2 * len(METRICS))} held-out sources evaluated")
    return result


def source_prediction_inputs(X: np.ndarray, lm: LabelMatrix, input_set: str) -> np.ndarray:
    """Inputs of one source-prediction input set."""
    if input_set == "features":
        return X
    if input_set == "features_labels":
        return np.hstack([X, lm.values.astype(float)])
    if input_set == "labels":
        if lm.shape[1] == 0:
            raise DataError("The labels input set needs a non-empty label space")
        return lm.values.astype(float)
    raise ValueError(f"Unknown input set {input_set!r}")


def run_source_prediction(cfg: ExperimentConfig, ds: Optional[Dataset] = None) -> ProtocolResult:
    """
    Predict the source of each record from its inputs.

    Uses a source-stratified holdout and reports accuracy, the confusion
    matrix and the majority baseline per input set.

    Raises:
        DataError: Fewer than two sources
    """
    ds = ds if ds is not None else load_experiment_dataset(cfg)
    if len(ds.sources) < 2:
        raise DataError(f"source_prediction needs at least 2 sources, got {len(ds.sources)}")

    X = design_matrix(ds, cfg)
    lm = build_label_matrix(ds)
    sources = ds.source_array().astype(str)
    plan = stratified_holdout(
        ds, cfg.source_prediction.train_frac, "source", derive_seed(cfg.seed, "source_prediction")
    )
    train_idx, test_idx = plan.fold_indices(0), plan.fold_indices(1)
    _check_disjoint(train_idx, test_idx, "source prediction holdout")
    if test_idx.size == 0:
        raise DataError("Holdout left no test records")

    baseline = majority_baseline(sources[train_idx], sources[test_idx])
    result = ProtocolResult(
        protocol="source_prediction", config=cfg.to_dict(), sources=dict(ds.sources), labels=list(lm.labels)
    )
    for input_set in cfg.source_prediction.input_sets:
        inputs = source_prediction_inputs(X, lm, input_set)
        model = fit_softmax(inputs[train_idx], sources[train_idx], cfg.train)
        predicted = predict_classes(model, inputs[test_idx])
        matrix, accuracy = confusion_and_accuracy(predicted, sources[test_idx], ds.source_names)
        result.source_prediction.append({
            "input_set": input_set,
            "accuracy": accuracy,
            "baseline": baseline,
            "n_train": int(train_idx.size),
            "n_test": int(test_idx.size),
            "classes": ds.source_names,
            "confusion": matrix.tolist(),
        })
        logger.info(f"Source prediction on {input_set}: accuracy {accuracy:.3f} (baseline {baseline:.3f})")

    return result


PROTOCOL_RUNNERS = {
    "single_source": run_single_source,
    "multi_source": run_multi_source,
    "source_prediction": run_source_prediction,
}


def run_experiment(cfg: ExperimentConfig, ds: Optional[Dataset] = None) -> ProtocolResult:
    """
    Run the protocol named by cfg.

    Args:
        cfg: Experiment configuration
        ds: Pre-loaded dataset, otherwise loaded from cfg

    Returns:
        ProtocolResult

    Raises:
        DataError: Dataset unsuitable for the protocol
    """
    logger.info(f"Starting {cfg.protocol} experiment (seed {cfg.seed})")

    logger.info("Step 1: Loading dataset...")
    if ds is None:
        ds = load_experiment_dataset(cfg)
    logger.info(f"Dataset has {len(ds)} records from {len(ds.sources)} sources")

    logger.info(f"Step 2: Running {cfg.protocol} protocol...")
    result = PROTOCOL_RUNNERS[cfg.protocol](cfg, ds)

    logger.info(
        f"Experiment complete: {len(result.contexts)} context rows, "
        f"{len(result.reliability)} reliability rows"
    )
    return result
