"""
SheetGuard: Streamlit Audit Dashboard
─────────────────────────────────────────────────────────
Management view over an audit output directory written by
`sheetguard audit` (pipeline.run_audit): inventory KPIs, risk
distribution, findings and link dependencies.

Run with: streamlit run streamlit_app.py
"""

import os
import sys

import pandas as pd
import plotly.express as px
import streamlit as st

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from sheetguard.dashboard_data import (
    findings_by_kind,
    kind_breakdown,
    kpis,
    load_audit,
    most_depended_on,
    risk_distribution,
)

# ═══════════════════════════════════════════════════════════════════════
# PAGE CONFIGURATION
# ═══════════════════════════════════════════════════════════════════════

st.set_page_config(
    page_title="SheetGuard | Spreadsheet Audit",
    page_icon="🛡️",
    layout="wide",
    initial_sidebar_state="expanded",
)

st.markdown("""
<style>
    div[data-testid="metric-container"] {
        border: 1px solid rgba(139, 92, 246, 0.2);
        border-radius: 12px;
        padding: 16px;
    }
    .section-title {
        font-size: 1.1rem;
        font-weight: 700;
        letter-spacing: 0.08em;
        text-transform: uppercase;
        border-left: 4px solid #8b5cf6;
        padding-left: 12px;
        margin: 24px 0 12px 0;
    }
</style>
""", unsafe_allow_html=True)

# ═══════════════════════════════════════════════════════════════════════
# CHART THEME
# ═══════════════════════════════════════════════════════════════════════

RISK_COLORS = {"High": "#ef4444", "Medium": "#f59e0b", "Low": "#22c55e"}
CHART_COLORS = ["#8b5cf6", "#06b6d4", "#f59e0b", "#22c55e", "#ef4444", "#ec4899"]


def style_chart(fig):
    fig.update_layout(
        paper_bgcolor="rgba(0,0,0,0)",
        plot_bgcolor="rgba(0,0,0,0)",
        margin={"t": 40, "b": 40, "l": 40, "r": 20},
    )
    return fig


# ═══════════════════════════════════════════════════════════════════════
# DATA LOADING
# ═══════════════════════════════════════════════════════════════════════

@st.cache_data(ttl=60)
def load(out_dir: str):
    return load_audit(out_dir)


with st.sidebar:
    st.markdown("### 🛡️ SheetGuard")
    st.markdown("*End-user computing governance*")
    st.divider()
    out_dir = st.text_input("Audit output directory", os.getenv("SHEETGUARD_AUDIT_DIR", "./audit"))
    page = st.radio(
        "Navigation",
        ["Overview", "Findings", "Dependencies", "Inventory"],
        label_visibility="collapsed",
    )

if not os.path.isdir(out_dir):
    st.warning(f"No audit output at `{out_dir}`. Run `python -m sheetguard audit <roots> --out {out_dir}` first.")
    st.stop()

data = load(out_dir)
summary = data.summary

# ═══════════════════════════════════════════════════════════════════════
# PAGE: OVERVIEW
# ═══════════════════════════════════════════════════════════════════════

if page == "Overview":
    st.title("Spreadsheet Audit Overview")
    if summary.get("status") == "failed":
        st.error(f"Last audit failed: {summary.get('error')}")
    elif summary:
        st.caption(f"Audit of {', '.join(summary.get('roots', []))} at {summary.get('start_time')}")

    k = kpis(data)
    cols = st.columns(7)
    for col, (label, key) in zip(cols, [
        ("Files", "files"), ("Parsed", "parsed"), ("Failed", "failed"),
        ("High Risk", "high_risk"), ("With Macros", "with_macros"),
        ("Links", "links"), ("Broken Links", "broken_links"),
    ]):
        col.metric(label, f"{k[key]:,}")

    left, right = st.columns(2)
    with left:
        st.markdown('<p class="section-title">Risk distribution</p>', unsafe_allow_html=True)
        dist = risk_distribution(data.inventory)
        fig = px.bar(dist, x="risk", y="count", color="risk", color_discrete_map=RISK_COLORS)
        st.plotly_chart(style_chart(fig), use_container_width=True)
    with right:
        st.markdown('<p class="section-title">File kinds</p>', unsafe_allow_html=True)
        kinds = kind_breakdown(data.inventory)
        if kinds.empty:
            st.info("No files in the inventory.")
        else:
            fig = px.pie(kinds, names="kind", values="count", hole=0.5,
                         color_discrete_sequence=CHART_COLORS)
            st.plotly_chart(style_chart(fig), use_container_width=True)

    stages = summary.get("stages", {})
    if stages:
        st.markdown('<p class="section-title">Pipeline stages</p>', unsafe_allow_html=True)
        st.dataframe(pd.DataFrame([
            {"stage": name, "status": info.get("status"), "seconds": info.get("duration_seconds")}
            for name, info in stages.items()
        ]), use_container_width=True, hide_index=True)

# ═══════════════════════════════════════════════════════════════════════
# PAGE: FINDINGS
# ═══════════════════════════════════════════════════════════════════════

elif page == "Findings":
    st.title("Model Audit Findings")
    if data.findings.empty:
        st.success("No findings.")
    else:
        by_kind = findings_by_kind(data.findings)
        fig = px.bar(by_kind, x="kind", y="count", color="severity",
                     color_discrete_sequence=CHART_COLORS)
        st.plotly_chart(style_chart(fig), use_container_width=True)

        severities = sorted(data.findings["severity"].dropna().unique())
        chosen = st.multiselect("Severity", severities, default=severities)
        shown = data.findings[data.findings["severity"].isin(chosen)]
        st.dataframe(shown, use_container_width=True, hide_index=True)

# ═══════════════════════════════════════════════════════════════════════
# PAGE: DEPENDENCIES
# ═══════════════════════════════════════════════════════════════════════

elif page == "Dependencies":
    st.title("Link Dependencies")
    loops = summary.get("stages", {}).get("graph", {}).get("cycles", [])
    if loops:
        st.warning(f"{len(loops)} link cycle(s): " + "; ".join(" ↔ ".join(c) for c in loops))

    st.markdown('<p class="section-title">Most depended-on workbooks</p>', unsafe_allow_html=True)
    st.dataframe(most_depended_on(data.inventory), use_container_width=True, hide_index=True)

    st.markdown('<p class="section-title">Links</p>', unsafe_allow_html=True)
    st.dataframe(data.edges, use_container_width=True, hide_index=True)

    st.markdown('<p class="section-title">Broken links</p>', unsafe_allow_html=True)
    if data.broken.empty:
        st.success("No broken links.")
    else:
        st.dataframe(data.broken, use_container_width=True, hide_index=True)

    dot_path = os.path.join(out_dir, "graph.dot")
    if os.path.exists(dot_path):
        with open(dot_path, encoding="utf-8") as fh:
            st.graphviz_chart(fh.read())

# ═══════════════════════════════════════════════════════════════════════
# PAGE: INVENTORY
# ═══════════════════════════════════════════════════════════════════════

elif page == "Inventory":
    st.title("Inventory")
    inv = data.inventory
    if inv.empty:
        st.info("Inventory is empty.")
    else:
        risks = st.multiselect("Risk", ["High", "Medium", "Low"], default=["High", "Medium", "Low"])
        filtered = inv[inv["risk"].isin(risks) | inv["risk"].isna()]
        st.dataframe(filtered, use_container_width=True, hide_index=True)
        st.download_button(
            "Download CSV",
            filtered.to_csv(index=False).encode("utf-8"),
            file_name="inventory.csv",
            mime="text/csv",
        )
