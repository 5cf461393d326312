"""
Reports and Figures
===================
Heat maps of stored grids and Markdown/CSV/PDF/Excel tables of simulation
metrics.

REQUIREMENTS ADDRESSED:
- Heat maps with time on the x axis and site on the y axis
- BFDR table: sensitivity and FDR per STNR, delta and method
- SimBaS table: per-replicate and averaged-grid sensitivity and FDR
- RMSE table: total surface RMSE per method and the FFR reduction
- Optional PDF and Excel bundles of the same tables
"""

import logging
import os
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from reportlab.lib import colors  # noqa: E402
from reportlab.lib.pagesizes import letter  # noqa: E402
from reportlab.lib.styles import getSampleStyleSheet  # noqa: E402
from reportlab.platypus import Image, Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle  # noqa: E402

from config import APP_NAME, HEATMAP_CMAP, HEATMAP_DPI  # noqa: E402

logger = logging.getLogger(__name__)

MISSING = "n/a"


# ============================================================================
# HEAT MAPS
# ============================================================================

def render_heatmap(path: str, grid: np.ndarray, title: str = "", vmin: Optional[float] = None,
                   vmax: Optional[float] = None, cmap: str = HEATMAP_CMAP) -> str:
    """
    Render a T x S grid as a PNG.

    REQUIREMENT: time runs along x and site along y, first cell at the origin.
    """
    arr = np.asarray(grid, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4.5))
    image = ax.imshow(arr.T, origin="lower", aspect="auto", cmap=cmap, vmin=vmin, vmax=vmax,
                      interpolation="nearest")
    ax.set_xlabel("time")
    ax.set_ylabel("site")
    if title:
        ax.set_title(title)
    fig.colorbar(image, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=HEATMAP_DPI, metadata={"Software": None})
    plt.close(fig)
    logger.debug("Rendered %s", path)
    return path


# ============================================================================
# TABLES
# ============================================================================

def format_rate(summary: Optional[Dict]) -> str:
    """'93.5% (1.2)' from a {mean, se} dict; the SE is omitted when absent."""
    if not summary or summary.get("mean") is None:
        return MISSING
    text = f"{100.0 * summary['mean']:.1f}%"
    if summary.get("se") is not None:
        text += f" ({100.0 * summary['se']:.1f})"
    return text


def _point_rate(value: Optional[float]) -> str:
    return MISSING if value is None else f"{100.0 * value:.1f}%"


def _methods(summaries: Sequence[Dict]) -> List[str]:
    seen = []
    for summary in summaries:
        for method in summary["methods"]:
            if method not in seen:
                seen.append(method)
    return seen


def bfdr_table(summaries: Sequence[Dict]) -> pd.DataFrame:
    """Sensitivity and FDR of the BFDR procedure, one row per (scenario, delta)."""
    methods = _methods(summaries)
    rows = []
    for summary in summaries:
        for delta in summary["deltas"]:
            row = {"scenario": summary["scenario"], "STNR": f"{summary['stnr']:.3g}", "delta": f"{delta:g}"}
            for method in methods:
                procs = summary["methods"].get(method, {}).get("procedures", {})
                proc = procs.get(f"bfdr_delta_{delta:g}", {})
                row[f"{method.upper()} sensitivity"] = format_rate(proc.get("sensitivity"))
                row[f"{method.upper()} FDR"] = format_rate(proc.get("fdr"))
            rows.append(row)
    return pd.DataFrame(rows)


def simbas_table(summaries: Sequence[Dict]) -> pd.DataFrame:
    """SimBaS sensitivity and FDR per scenario, per replicate and from the averaged score grid."""
    methods = _methods(summaries)
    rows = []
    for summary in summaries:
        row = {"scenario": summary["scenario"], "STNR": f"{summary['stnr']:.3g}", "alpha": f"{summary['alpha']:g}"}
        for method in methods:
            entry = summary["methods"].get(method, {})
            proc = entry.get("procedures", {}).get("simbas", {})
            averaged = entry.get("averaged_simbas", {})
            label = method.upper()
            row[f"{label} sensitivity"] = format_rate(proc.get("sensitivity"))
            row[f"{label} FDR"] = format_rate(proc.get("fdr"))
            row[f"{label} sensitivity (averaged grid)"] = _point_rate(averaged.get("sensitivity"))
            row[f"{label} FDR (averaged grid)"] = _point_rate(averaged.get("fdr"))
        rows.append(row)
    return pd.DataFrame(rows)


def rmse_table(summaries: Sequence[Dict]) -> pd.DataFrame:
    methods = _methods(summaries)
    rows = []
    for summary in summaries:
        row = {"scenario": summary["scenario"], "STNR": f"{summary['stnr']:.3g}",
               "replicates": summary["replicates"]}
        for method in methods:
            total = summary["methods"].get(method, {}).get("total_rmse")
            row[f"{method.upper()} total RMSE"] = MISSING if total is None else f"{total:.4g}"
        reduction = summary.get("rmse_reduction_pct")
        row["RMSE reduction"] = MISSING if reduction is None else f"{reduction:.1f}%"
        rows.append(row)
    return pd.DataFrame(rows)


def build_tables(summaries: Sequence[Dict]) -> Dict[str, pd.DataFrame]:
    ordered = sorted(summaries, key=lambda s: (s["scenario"], -s["stnr"]))
    return {
        "BFDR": bfdr_table(ordered),
        "SimBaS": simbas_table(ordered),
        "RMSE": rmse_table(ordered),
    }


def to_markdown(frame: pd.DataFrame) -> str:
    header = "| " + " | ".join(str(c) for c in frame.columns) + " |"
    rule = "|" + "|".join("---" for _ in frame.columns) + "|"
    body = ["| " + " | ".join(str(v) for v in row) + " |" for row in frame.itertuples(index=False)]
    return "\n".join([header, rule] + body)


def markdown_report(tables: Dict[str, pd.DataFrame], images: Sequence[str] = ()) -> str:
    lines = [f"# {APP_NAME}: simulation report", ""]
    for name, frame in tables.items():
        lines += [f"## {name}", "", to_markdown(frame), ""]
    if images:
        lines += ["## Heat maps", ""]
        lines += [f"![{os.path.splitext(os.path.basename(p))[0]}]({os.path.basename(p)})" for p in images]
        lines.append("")
    return "\n".join(lines)


# ============================================================================
# EXPORTS
# ============================================================================

def export_to_pdf(path: str, tables: Dict[str, pd.DataFrame], images: Sequence[str] = (),
                  title: str = APP_NAME) -> str:
    """Bundle tables and heat maps into one PDF."""
    doc = SimpleDocTemplate(path, pagesize=letter, invariant=1)
    styles = getSampleStyleSheet()
    story = [Paragraph(f"<b>{title} - Simulation Report</b>", styles["Title"]), Spacer(1, 12)]

    for name, frame in tables.items():
        story.append(Paragraph(name, styles["Heading2"]))
        data = [list(frame.columns)] + [[str(v) for v in row] for row in frame.itertuples(index=False)]
        table = Table(data, repeatRows=1)
        table.setStyle(TableStyle([
            ("FONTSIZE", (0, 0), (-1, -1), 6),
            ("BACKGROUND", (0, 0), (-1, 0), colors.lightgrey),
            ("GRID", (0, 0), (-1, -1), 0.25, colors.grey),
        ]))
        story.append(table)
        story.append(Spacer(1, 12))

    for image in images:
        story.append(Paragraph(os.path.basename(image), styles["Normal"]))
        story.append(Image(image, width=360, height=270))
        story.append(Spacer(1, 6))

    doc.build(story)
    return path


def export_to_excel(path: str, tables: Dict[str, pd.DataFrame]) -> str:
    """One sheet per table."""
    with pd.ExcelWriter(path, engine="openpyxl") as writer:
        for name, frame in tables.items():
            frame.to_excel(writer, sheet_name=name[:31], index=False)
    return path
