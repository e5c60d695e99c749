"""
Benchmark report: mAP per variant and labeled fraction, mean ± sd over seeds.

emit_report writes
  table.csv          variant x fraction, student mAP "mean ± sd" (percent)
  summary.csv        long form: variant, fraction, n, student/teacher mean and sd
  map_vs_fraction.svg
  report.xlsx        sheets `raw` and `summary`
  report.pdf         table + chart
  report.md
"""
import io
import logging
from datetime import datetime, timezone
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
from reportlab.lib.colors import HexColor, black, gray, white  # noqa: E402
from reportlab.lib.pagesizes import letter  # noqa: E402
from reportlab.lib.utils import ImageReader  # noqa: E402
from reportlab.pdfgen import canvas  # noqa: E402

from .utils import PipelineError  # noqa: E402

logger = logging.getLogger(__name__)

NAVY = HexColor('#003366')
LIGHT_GRAY = HexColor('#F8F9FA')
ACCENT = HexColor('#4A90E2')
VARIANT_ORDER = ("box_only", "point_detr", "multipoint_only", "symmetric_only", "pbc")
VARIANT_COLORS = {
    "box_only": "#7F7F7F",
    "point_detr": "#4A90E2",
    "multipoint_only": "#9467BD",
    "symmetric_only": "#2CA02C",
    "pbc": "#D62728",
}


def fraction_label(f):
    return f"{float(f) * 100:g}%"


def _fmt(mean, sd):
    if pd.isna(mean):
        return "-"
    return f"{mean * 100:.1f} ± {0.0 if pd.isna(sd) else sd * 100:.1f}"


def summarize(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean and sample sd over seeds of the successful cells."""
    ok = frame[frame["status"] == "ok"].copy()
    if ok.empty:
        raise PipelineError("no successful benchmark cells to report")
    ok["teacher_map"] = pd.to_numeric(ok["teacher_map"])
    ok["student_map"] = pd.to_numeric(ok["student_map"])
    summary = ok.groupby(["variant", "fraction"]).agg(
        n=("seed", "count"),
        student_mean=("student_map", "mean"),
        student_sd=("student_map", "std"),
        teacher_mean=("teacher_map", "mean"),
        teacher_sd=("teacher_map", "std"),
    ).reset_index()
    order = {v: i for i, v in enumerate(VARIANT_ORDER)}
    summary["_o"] = summary["variant"].map(order)
    return summary.sort_values(["_o", "fraction"]).drop(columns="_o").reset_index(drop=True)


def pivot_table(summary: pd.DataFrame, metric="student") -> pd.DataFrame:
    cells = summary.assign(value=[_fmt(m, s) for m, s in zip(summary[f"{metric}_mean"], summary[f"{metric}_sd"])])
    table = cells.pivot(index="variant", columns="fraction", values="value")
    table = table.reindex([v for v in VARIANT_ORDER if v in table.index])
    table.columns = [fraction_label(f) for f in table.columns]
    return table.fillna("-")


def create_map_chart(summary: pd.DataFrame, fmt="svg"):
    """mAP vs labeled fraction, one line per variant, error bars = sd."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), facecolor='white', sharey=True)
    for ax, metric, title in ((axes[0], "student", "Student mAP"), (axes[1], "teacher", "Teacher mAP (test points)")):
        for variant in VARIANT_ORDER:
            rows = summary[summary["variant"] == variant].dropna(subset=[f"{metric}_mean"])
            if rows.empty:
                continue
            ax.errorbar(rows["fraction"] * 100, rows[f"{metric}_mean"] * 100, yerr=rows[f"{metric}_sd"].fillna(0) * 100,
                        marker="o", capsize=3, label=variant, color=VARIANT_COLORS.get(variant))
        ax.set_xlabel("Fully labeled images (%)", fontsize=10, fontweight='bold')
        ax.set_title(title, fontsize=12, fontweight='bold', color='#003366')
        ax.spines['top'].set_visible(False)
        ax.spines['right'].set_visible(False)
        ax.grid(alpha=0.3, linestyle='--')
    axes[0].set_ylabel("mAP (%)", fontsize=10, fontweight='bold')
    axes[0].legend(fontsize=8)
    plt.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format=fmt, dpi=150, bbox_inches='tight', facecolor='white')
    plt.close(fig)
    buf.seek(0)
    return buf


def draw_header_footer(c, width, height, page_num, generated_on):
    margin_x = 50
    c.setStrokeColor(NAVY)
    c.setLineWidth(2)
    c.line(0, height - 35, width, height - 35)
    c.setFont("Helvetica-Bold", 10)
    c.setFillColor(NAVY)
    c.drawString(margin_x, height - 22, "pointbox benchmark report")
    c.setFont("Helvetica", 8)
    c.setFillColor(gray)
    date_text = f"Generated: {generated_on}"
    c.drawString(width - margin_x - c.stringWidth(date_text, "Helvetica", 8), height - 22, date_text)
    page_text = f"Page {page_num}"
    c.drawString((width - c.stringWidth(page_text, "Helvetica", 8)) / 2, 25, page_text)


def draw_styled_table(c, y, margin_x, width, data, col_widths=None):
    """Header row on navy, alternating light rows below."""
    if not data or len(data) < 2:
        return y
    num_cols = len(data[0])
    if col_widths is None:
        col_widths = [(width - 2 * margin_x) / num_cols] * num_cols
    row_height = 22

    c.setFillColor(NAVY)
    c.rect(margin_x, y - row_height, sum(col_widths), row_height, fill=1, stroke=0)
    c.setFont("Helvetica-Bold", 9)
    c.setFillColor(white)
    x_pos = margin_x + 6
    for i, cell in enumerate(data[0]):
        c.drawString(x_pos, y - row_height + 7, str(cell))
        x_pos += col_widths[i]
    y -= row_height

    c.setFont("Helvetica", 8)
    for row_idx, row in enumerate(data[1:], 1):
        if row_idx % 2 == 0:
            c.setFillColor(LIGHT_GRAY)
            c.rect(margin_x, y - row_height, sum(col_widths), row_height, fill=1, stroke=0)
        c.setFillColor(black)
        x_pos = margin_x + 6
        for i, cell in enumerate(row):
            c.drawString(x_pos, y - row_height + 7, str(cell))
            x_pos += col_widths[i]
        y -= row_height
    return y - 10


def _table_rows(table: pd.DataFrame):
    return [["variant"] + list(table.columns)] + [[v] + list(r) for v, r in zip(table.index, table.values.tolist())]


def build_pdf(summary, failed, generated_on) -> bytes:
    buf = io.BytesIO()
    c = canvas.Canvas(buf, pagesize=letter)
    width, height = letter
    margin_x = 40
    page = 1
    draw_header_footer(c, width, height, page, generated_on)
    y = height - 70
    for metric, title in (("student", "Student mAP (%)"), ("teacher", "Teacher mAP on test points (%)")):
        table = pivot_table(summary, metric)
        if metric == "teacher" and (table == "-").all().all():
            continue
        c.setFont("Helvetica-Bold", 13)
        c.setFillColor(NAVY)
        c.drawString(margin_x, y, title)
        y = draw_styled_table(c, y - 10, margin_x, width, _table_rows(table))
        y -= 15
    chart = ImageReader(create_map_chart(summary, fmt="png"))
    img_h = 220
    if y < img_h + 70:
        c.showPage()
        page += 1
        draw_header_footer(c, width, height, page, generated_on)
        y = height - 70
    c.drawImage(chart, margin_x, y - img_h, width=width - 2 * margin_x, height=img_h, preserveAspectRatio=True,
                mask='auto')
    y -= img_h + 20
    if failed:
        c.setFont("Helvetica-Oblique", 8)
        c.setFillColor(black)
        c.drawString(margin_x, max(y, 60), f"{len(failed)} cell(s) failed; see results.jsonl")
    c.save()
    return buf.getvalue()


def build_markdown(summary, failed, generated_on) -> str:
    table = pivot_table(summary, "student")
    md_lines = [
        "# pointbox benchmark report",
        f"**Generated:** {generated_on}",
        "",
        "## Student mAP (%) by labeled fraction",
        "| variant | " + " | ".join(table.columns) + " |",
        "|---" * (len(table.columns) + 1) + "|",
    ]
    for variant, row in zip(table.index, table.values.tolist()):
        md_lines.append(f"| {variant} | " + " | ".join(row) + " |")
    teacher = pivot_table(summary, "teacher")
    if not (teacher == "-").all().all():
        md_lines += ["", "## Teacher mAP (%) on test points",
                     "| variant | " + " | ".join(teacher.columns) + " |",
                     "|---" * (len(teacher.columns) + 1) + "|"]
        for variant, row in zip(teacher.index, teacher.values.tolist()):
            md_lines.append(f"| {variant} | " + " | ".join(row) + " |")
    if failed:
        md_lines += ["", "## Failed cells"]
        for r in failed:
            md_lines.append(f"- {r['variant']} {fraction_label(r['fraction'])} seed {r['seed']}: {r.get('error')}")
    return "\n".join(md_lines) + "\n"


def emit_report(result, out_dir):
    """Write every report artifact into `out_dir`; returns {name: path}."""
    frame = result.frame()
    summary = summarize(frame)
    failed = result.failed()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    generated_on = datetime.now(timezone.utc).strftime("%Y-%m-%d %H:%M UTC")

    paths = {
        "table": out / "table.csv",
        "summary": out / "summary.csv",
        "plot": out / "map_vs_fraction.svg",
        "xlsx": out / "report.xlsx",
        "pdf": out / "report.pdf",
        "md": out / "report.md",
    }
    pivot_table(summary, "student").to_csv(paths["table"], index_label="variant")
    summary.to_csv(paths["summary"], index=False)
    paths["plot"].write_bytes(create_map_chart(summary, fmt="svg").getvalue())
    with pd.ExcelWriter(paths["xlsx"], engine='openpyxl') as writer:
        frame.to_excel(writer, sheet_name="raw", index=False)
        summary.to_excel(writer, sheet_name="summary", index=False)
    paths["pdf"].write_bytes(build_pdf(summary, failed, generated_on))
    paths["md"].write_text(build_markdown(summary, failed, generated_on), encoding="utf-8")
    logger.info("report written to %s (%d variants, %d cells)", out, summary["variant"].nunique(), len(frame))
    return paths
