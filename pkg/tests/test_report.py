from __future__ import annotations

import csv
import json

import fitz
import pytest

from app.core.experiment import Experiment
from app.services.report import (
    COLUMNS,
    ReportRow,
    rows_from_experiment,
    rows_from_files,
    sort_rows,
    write_report_csv,
    write_report_json,
)
from app.services.report_pdf import render_report_pdf, write_report_pdf


def _summary(**kw):
    d = {
        "model_id": "ecapa-toy-64", "scheme": "uniform", "bits": 8, "params": 82752,
        "size_bytes": 90000, "size_fp32_bytes": 340000, "eer": 0.05, "eer_norm": 0.04,
    }
    d.update(kw)
    return d


def test_row_derived_columns():
    row = ReportRow.from_summary(_summary(size_bytes=1000, size_fp32_bytes=4000, params=2_500_000))
    assert row.compression == pytest.approx(4.0)
    assert row.params_m == pytest.approx(2.5)
    assert row.size_mb == pytest.approx(0.001)


def test_incomplete_summary():
    d = _summary()
    del d["eer"]
    with pytest.raises(ValueError):
        ReportRow.from_summary(d)


def test_fp32_row_without_reference_size():
    d = _summary(scheme="fp32", bits=32, eer_norm=None)
    del d["size_fp32_bytes"]
    row = ReportRow.from_summary(d)
    assert row.compression == pytest.approx(1.0)
    assert row.eer_norm is None


def test_sorting_groups_models_by_decreasing_bitwidth():
    rows = sort_rows([
        ReportRow.from_summary(_summary(bits=4)),
        ReportRow.from_summary(_summary(model_id="resnet-toy-8", bits=32, scheme="fp32")),
        ReportRow.from_summary(_summary(bits=8, scheme="pot")),
        ReportRow.from_summary(_summary(bits=8)),
    ])
    assert [(r.model_id, r.bits, r.scheme) for r in rows] == [
        ("ecapa-toy-64", 8, "pot"),
        ("ecapa-toy-64", 8, "uniform"),
        ("ecapa-toy-64", 4, "uniform"),
        ("resnet-toy-8", 32, "fp32"),
    ]


def test_rows_from_experiment_use_eval_runs(tmp_path):
    exp = Experiment.create(tmp_path)
    run = exp.add_run("eval", model_id="ecapa-toy-64", metrics=_summary())
    exp.add_run("train", model_id="ecapa-toy-64")
    rows = rows_from_experiment(exp)
    assert len(rows) == 1 and rows[0].run_id == run.id


def test_rows_from_files(tmp_path):
    path = tmp_path / "summary.json"
    path.write_text(json.dumps(_summary(bits=4)), encoding="utf-8")
    assert rows_from_files([path])[0].bits == 4
    with pytest.raises(FileNotFoundError):
        rows_from_files([tmp_path / "absent.json"])


def test_json_and_csv_outputs(tmp_path):
    rows = [ReportRow.from_summary(_summary()), ReportRow.from_summary(_summary(bits=4, size_bytes=50000))]
    write_report_json(tmp_path / "r.json", rows)
    payload = json.loads((tmp_path / "r.json").read_text(encoding="utf-8"))
    assert payload["rows"][1]["compression"] == pytest.approx(6.8)

    write_report_csv(tmp_path / "r.csv", rows)
    with (tmp_path / "r.csv").open(encoding="utf-8") as f:
        table = list(csv.DictReader(f))
    assert tuple(table[0]) == COLUMNS
    assert table[1]["bits"] == "4"


def test_pdf_report_paginates(tmp_path):
    rows = [ReportRow.from_summary(_summary(model_id=f"m{i:02d}")) for i in range(60)]
    data = render_report_pdf(rows)
    assert data.startswith(b"%PDF")
    with fitz.open(stream=data, filetype="pdf") as doc:
        assert doc.page_count >= 2
        assert "m00" in doc[0].get_text()

    write_report_pdf(tmp_path / "r.pdf", rows[:3], title="Essai")
    assert (tmp_path / "r.pdf").read_bytes().startswith(b"%PDF")
