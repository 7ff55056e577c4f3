"""
Report generator module for SourceCV.
Writes protocol results as JSON and CSV files and renders them as text.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Union

import pandas as pd

from src.experiments import RESULT_SCHEMA_VERSION, ProtocolResult
from src.metrics import reliability

logger = logging.getLogger(__name__)

RESULTS_JSON = "results.json"
RELIABILITY_CSV = "reliability.csv"
CONTEXTS_CSV = "contexts.csv"
FOLDS_CSV = "folds.csv"
CONFUSION_CSV = "confusion.csv"

RELIABILITY_COLUMNS = ["context", "method", "metric", "me", "sd", "rmse", "n"]
CONTEXT_COLUMNS = [
    "context", "train_sources", "test_source", "method", "metric",
    "cv_estimate", "test_value", "signed_error",
]
FOLD_COLUMNS = ["context", "method", "fold", "fold_source", "n_train", "n_val", "macro_auc", "micro_auc"]
CONFUSION_COLUMNS = ["input_set", "true_source", "predicted_source", "count"]


def _as_dict(result: Union[ProtocolResult, Dict]) -> Dict:
    return result.to_dict() if isinstance(result, ProtocolResult) else result


def _confusion_rows(source_prediction: List[Dict]) -> List[Dict]:
    rows = []
    for entry in source_prediction:
        classes = entry["classes"]
        for i, true_source in enumerate(classes):
            for j, predicted_source in enumerate(classes):
                rows.append({
                    "input_set": entry["input_set"],
                    "true_source": true_source,
                    "predicted_source": predicted_source,
                    "count": entry["confusion"][i][j],
                })
    return rows


def _write_csv(rows: List[Dict], columns: List[str], path: Path) -> None:
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False, float_format="%.10g")
    logger.debug(f"Wrote {len(rows)} rows to {path}")


def emit_reports(result: Union[ProtocolResult, Dict], outdir: str) -> List[str]:
    """
    Write the result files of one protocol run.

    results.json holds everything; reliability.csv, contexts.csv and
    folds.csv are written for CV protocols and confusion.csv for source
    prediction. Output is byte-identical for identical results.

    Args:
        result: ProtocolResult or its dict form
        outdir: Output directory, created if missing

    Returns:
        Paths of the files written

    Raises:
        ValueError: The result has no contexts and no source-prediction rows
        IOError: A file cannot be written
    """
    data = _as_dict(result)
    if not data.get("contexts") and not data.get("source_prediction"):
        logger.error("Refusing to emit an empty result")
        raise ValueError("Result has no contexts to report")

    out = Path(outdir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)

        json_path = out / RESULTS_JSON
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True)
            f.write("\n")
        written.append(json_path)

        if data.get("contexts"):
            _write_csv(data["reliability"], RELIABILITY_COLUMNS, out / RELIABILITY_CSV)
            _write_csv(data["contexts"], CONTEXT_COLUMNS, out / CONTEXTS_CSV)
            _write_csv(data["folds"], FOLD_COLUMNS, out / FOLDS_CSV)
            written += [out / RELIABILITY_CSV, out / CONTEXTS_CSV, out / FOLDS_CSV]

        if data.get("source_prediction"):
            _write_csv(_confusion_rows(data["source_prediction"]), CONFUSION_COLUMNS, out / CONFUSION_CSV)
            written.append(out / CONFUSION_CSV)
    except OSError as e:
        logger.error(f"Error writing reports to {out}: {e}")
        raise IOError(f"Failed to write reports to {out}: {e}")

    logger.info(f"Wrote {len(written)} report files to {out}")
    return [str(p) for p in written]


def load_results(path: str) -> Dict:
    """
    Read a results.json file.

    Raises:
        IOError: Missing or unreadable file
        ValueError: Not a results file or an unsupported schema version
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        logger.error(f"Cannot read results from {path}: {e}")
        raise IOError(f"Cannot read results from {path}: {e}")
    except json.JSONDecodeError as e:
        raise ValueError(f"{path} is not valid JSON: {e}")

    if not isinstance(data, dict) or "schema_version" not in data:
        raise ValueError(f"{path} is not a results file")
    if data["schema_version"] != RESULT_SCHEMA_VERSION:
        raise ValueError(f"Unsupported results schema version {data['schema_version']}")
    return data


def reliability_from_contexts(contexts: pd.DataFrame, method: str, metric: str):
    """Recompute a ReliabilityReport from contexts.csv rows."""
    rows = contexts[(contexts["method"] == method) & (contexts["metric"] == metric)]
    return reliability(
        list(zip(rows["cv_estimate"], rows["test_value"])), context_ids=list(rows["context"])
    )


def format_report(results: Dict) -> str:
    """Plain-text summary for the report verb."""
    lines = [f"Protocol: {results['protocol']}"]
    sources = results.get("sources", {})
    lines.append("Sources: " + ", ".join(f"{s} ({n})" for s, n in sorted(sources.items())))

    if results.get("reliability"):
        lines += ["", "Reliability"]
        table = pd.DataFrame(results["reliability"], columns=RELIABILITY_COLUMNS)
        lines.append(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))

    if results.get("contexts"):
        lines += ["", "Contexts"]
        table = pd.DataFrame(results["contexts"], columns=CONTEXT_COLUMNS).drop(columns=["train_sources"])
        lines.append(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))

    for entry in results.get("source_prediction", []):
        lines += [
            "",
            f"Source prediction ({entry['input_set']}): accuracy {entry['accuracy']:.4f}, "
            f"majority baseline {entry['baseline']:.4f}",
        ]
        matrix = pd.DataFrame(entry["confusion"], index=entry["classes"], columns=entry["classes"])
        lines.append(matrix.to_string())

    return "\n".join(lines)
