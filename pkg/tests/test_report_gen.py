import pandas as pd
import pytest
from openpyxl import load_workbook

from pointbox.bench import BenchmarkResult
from pointbox.report_gen import emit_report, fraction_label, pivot_table, summarize
from pointbox.utils import PipelineError


def _record(variant, fraction, seed, student, teacher=None, status="ok"):
    return {
        "variant": variant, "fraction": fraction, "seed": seed, "teacher_map": teacher,
        "student_map": student, "wall_time": 1.0, "status": status,
        "error": None if status == "ok" else "RuntimeError: boom",
    }


@pytest.fixture
def result():
    records = []
    for f in (0.05, 0.1):
        for s in (1, 2, 3):
            records.append(_record("box_only", f, s, 0.20 + f + 0.01 * s))
            records.append(_record("point_detr", f, s, 0.25 + f + 0.01 * s, 0.5))
            records.append(_record("pbc", f, s, 0.30 + f + 0.01 * s, 0.6 + 0.01 * s))
    records.append(_record("pbc", 0.1, 4, None, status="failed"))
    return BenchmarkResult(records)


def test_summary_excludes_failures(result):
    summary = summarize(result.frame())
    assert len(summary) == 6
    assert summary["variant"].tolist()[:2] == ["box_only", "box_only"]
    row = summary[(summary["variant"] == "pbc") & (summary["fraction"] == 0.1)].iloc[0]
    assert row["n"] == 3
    assert row["student_mean"] == pytest.approx(0.42)
    assert row["student_sd"] == pytest.approx(0.01)
    assert pd.isna(summary[summary["variant"] == "box_only"]["teacher_mean"]).all()


def test_table_formats_mean_and_sd(result):
    table = pivot_table(summarize(result.frame()))
    assert list(table.columns) == ["5%", "10%"]
    assert list(table.index) == ["box_only", "point_detr", "pbc"]
    assert table.loc["pbc", "10%"] == "42.0 ± 1.0"
    assert (pivot_table(summarize(result.frame()), "teacher").loc["box_only"] == "-").all()
    assert fraction_label(0.3) == "30%"


def test_no_successful_cells():
    with pytest.raises(PipelineError):
        summarize(BenchmarkResult([_record("pbc", 0.1, 1, None, status="failed")]).frame())


def test_emit_report_writes_every_artifact(result, tmp_path):
    paths = emit_report(result, tmp_path)
    assert set(paths) == {"table", "summary", "plot", "xlsx", "pdf", "md"}
    assert all(p.is_file() and p.stat().st_size > 0 for p in paths.values())

    table = pd.read_csv(paths["table"], index_col="variant")
    assert "±" in table.loc["pbc", "5%"]
    assert "<svg" in paths["plot"].read_text(encoding="utf-8")
    assert paths["pdf"].read_bytes().startswith(b"%PDF")
    book = load_workbook(paths["xlsx"])
    assert book.sheetnames == ["raw", "summary"]
    assert book["raw"].max_row == len(result.records) + 1
    md = paths["md"].read_text(encoding="utf-8")
    assert "| pbc |" in md
    assert "Failed cells" in md
