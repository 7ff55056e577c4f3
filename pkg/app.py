"""
Streamlit frontend application for SourceCV.
Browses the results.json written by a protocol run.
"""

import json
import logging

import pandas as pd
import streamlit as st

from src.report import CONTEXT_COLUMNS, FOLD_COLUMNS, RELIABILITY_COLUMNS, load_results

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

st.set_page_config(
    page_title="SourceCV",
    page_icon="📈",
    layout="wide",
    initial_sidebar_state="expanded"
)


def parse_uploaded(raw: bytes) -> dict:
    """
    Decode an uploaded results file.

    Raises:
        ValueError: Not a results file
    """
    data = json.loads(raw.decode("utf-8"))
    if not isinstance(data, dict) or "schema_version" not in data:
        raise ValueError("Not a results file")
    return data


def display_summary(results: dict) -> None:
    sources = results.get("sources", {})
    col1, col2, col3 = st.columns(3)
    col1.metric("Protocol", results.get("protocol", "?"))
    col2.metric("Sources", len(sources))
    col3.metric("Records", sum(sources.values()))

    with st.expander("Configuration", expanded=False):
        st.json(results.get("config", {}))


def display_reliability(results: dict) -> None:
    rows = results.get("reliability", [])
    if not rows:
        st.info("No reliability rows for this run")
        return
    st.dataframe(pd.DataFrame(rows, columns=RELIABILITY_COLUMNS), use_container_width=True)


def display_contexts(results: dict) -> None:
    """Per-context CV estimates against test values, with a method filter."""
    contexts = pd.DataFrame(results.get("contexts", []), columns=CONTEXT_COLUMNS)
    if contexts.empty:
        st.info("No per-context rows for this run")
        return

    methods = sorted(contexts["method"].unique())
    metric = st.radio("Metric", sorted(contexts["metric"].unique()), horizontal=True)
    chosen = st.multiselect("Methods", methods, default=methods)
    selected = contexts[(contexts["metric"] == metric) & (contexts["method"].isin(chosen))]

    st.dataframe(selected, use_container_width=True)
    st.scatter_chart(selected, x="test_value", y="cv_estimate", color="method")

    folds = pd.DataFrame(results.get("folds", []), columns=FOLD_COLUMNS)
    with st.expander(f"Folds ({len(folds)})", expanded=False):
        st.dataframe(folds, use_container_width=True)


def display_source_prediction(results: dict) -> None:
    entries = results.get("source_prediction", [])
    if not entries:
        st.info("No source-prediction rows for this run")
        return
    for entry in entries:
        st.write(
            f"**{entry['input_set']}**: accuracy {entry['accuracy']:.3f} "
            f"(majority baseline {entry['baseline']:.3f})"
        )
        matrix = pd.DataFrame(entry["confusion"], index=entry["classes"], columns=entry["classes"])
        st.dataframe(matrix, use_container_width=True)


def display_results(results: dict) -> None:
    try:
        st.subheader("📊 Summary")
        display_summary(results)

        st.subheader("🎯 Reliability")
        display_reliability(results)

        st.subheader("🔍 Contexts")
        display_contexts(results)

        st.subheader("🏷️ Source prediction")
        display_source_prediction(results)

        st.download_button(
            label="Download results.json",
            data=json.dumps(results, indent=2, sort_keys=True),
            file_name="results.json",
            mime="application/json"
        )
    except Exception as e:
        logger.error(f"Error displaying results: {e}")
        st.error(f"Error displaying results: {e}")


def main():
    """Main Streamlit application."""
    st.title("📈 SourceCV results viewer")

    with st.sidebar:
        st.header("About")
        st.write("""
        Compares cross-validation estimates with the performance measured on
        data sources the model never saw.

        Run `sourcecv run config.yaml`, then open the results.json it writes.
        """)

    path = st.text_input("Path to results.json", placeholder="results/results.json")
    uploaded = st.file_uploader("...or upload it", type=["json"])

    try:
        if uploaded is not None:
            st.session_state.results = parse_uploaded(uploaded.getvalue())
        elif path and st.button("Load", type="primary"):
            st.session_state.results = load_results(path)
            logger.info(f"Loaded results from {path}")
    except (IOError, ValueError) as e:
        logger.error(f"Cannot load results: {e}")
        st.error(f"❌ Cannot load results: {e}")

    if "results" in st.session_state:
        st.divider()
        display_results(st.session_state.results)


if __name__ == "__main__":
    main()
