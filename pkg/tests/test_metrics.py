import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kifusion.metrics import (
    AccuracyMatrix, ReportChecksumError, ReportError, RunReport, backward_transfer, compare_runs,
    comparison_csv, format_comparison, matrix_csv_path, overall_performance, read_report, write_report,
)


def worked():
    m = AccuracyMatrix(3)
    for (i, j), v in {(0, 0): 0.9, (1, 1): 0.85, (2, 2): 0.95, (0, 1): 0.8, (1, 2): 0.75, (0, 2): 0.7}.items():
        m.set(i, j, v)
    return m


def report(label="kif", seed=0, m=None, **kw):
    return RunReport.from_matrix(m or worked(), config={"method": label}, seed=seed, label=label,
                                 stream={"generator": "rotated_gaussian"}, **kw)


class TestFormulas:
    # 0.8 and -0.15 have no exact binary form; the stored accuracies are the nearest
    # doubles, and the metrics must equal the correctly rounded mean of exactly those

    def test_op_worked(self):
        oracle = (Fraction(0.7) + Fraction(0.75) + Fraction(0.95)) / 3
        assert overall_performance(worked()) == float(oracle)
        assert abs(overall_performance(worked()) - 0.8) <= math.ulp(0.8)

    def test_bwt_worked(self):
        oracle = ((Fraction(0.7) - Fraction(0.9)) + (Fraction(0.75) - Fraction(0.85))) / 2
        assert backward_transfer(worked()) == float(oracle)
        assert abs(backward_transfer(worked()) + 0.15) <= math.ulp(0.15)

    def test_exact_on_dyadic_values(self):
        m = AccuracyMatrix(3)
        for (i, j), v in {(0, 0): 0.875, (1, 1): 0.75, (2, 2): 0.5, (0, 1): 0.5, (1, 2): 0.625, (0, 2): 0.25}.items():
            m.set(i, j, v)
        assert overall_performance(m) == 0.4583333333333333 == float(Fraction(11, 24))
        assert backward_transfer(m) == -0.375

    def test_single_task(self):
        m = AccuracyMatrix(1)
        m.set(0, 0, 0.6)
        assert overall_performance(m) == 0.6
        with pytest.raises(ValueError):
            backward_transfer(m)

    def test_all_ones(self):
        m = AccuracyMatrix(3, np.triu(np.ones((3, 3))) + np.tril(np.full((3, 3), np.nan), -1))
        assert overall_performance(m) == 1.0 and backward_transfer(m) == 0.0

    def test_positive_bwt(self):
        m = worked()
        m.set(0, 2, 0.95)
        m.set(1, 2, 0.9)
        assert backward_transfer(m) > 0

    def test_undefined_final_column(self):
        m = AccuracyMatrix(2)
        m.set(0, 0, 0.5)
        with pytest.raises(ValueError):
            overall_performance(m)

    def test_set_validation(self):
        m = AccuracyMatrix(2)
        with pytest.raises(ValueError):
            m.set(1, 0, 0.5)
        with pytest.raises(ValueError):
            m.set(0, 1, 1.5)

    def test_report_single_task_flag(self):
        m = AccuracyMatrix(1)
        m.set(0, 0, 0.6)
        r = RunReport.from_matrix(m, config={}, seed=0)
        assert r.op == 0.6 and r.bwt == 0.0 and not r.bwt_defined


@st.composite
def matrices(draw):
    k = draw(st.integers(1, 6))
    cells = np.full((k, k), np.nan)
    for i in range(k):
        for j in range(i, k):
            cells[i, j] = draw(st.floats(0, 1))
    return AccuracyMatrix(k, cells)


@settings(max_examples=60, deadline=None)
@given(matrices())
def test_csv_roundtrip_preserves_metrics(m):
    back = AccuracyMatrix.from_csv(m.to_csv())
    assert back == m
    assert abs(overall_performance(back) - overall_performance(m)) <= 1e-12
    if m.k > 1:
        assert abs(backward_transfer(back) - backward_transfer(m)) <= 1e-12


class TestReportFile:
    def test_roundtrip(self, tmp_path):
        r = report(cycle_log=[{"cycle": 10, "loss": 0.5}], update_counter=42)
        write_report(r, tmp_path / "r.json")
        assert read_report(tmp_path / "r.json") == r

    def test_structure(self, tmp_path):
        write_report(report(), tmp_path / "r.json")
        doc = json.loads((tmp_path / "r.json").read_text())
        assert doc["format"] == "kifusion-report" and doc["version"] == 1 and len(doc["sha256"]) == 64
        assert doc["payload"]["matrix"][1][0] is None

    def test_matrix_csv(self, tmp_path):
        write_report(report(), tmp_path / "r.json")
        path = matrix_csv_path(tmp_path / "r.json")
        assert path.name == "r.matrix.csv"
        lines = path.read_text().splitlines()
        assert lines[1].split(",")[0] == "null"
        np.testing.assert_allclose(AccuracyMatrix.from_csv(path.read_text()).cells, worked().cells, atol=1e-12)

    def test_truncated(self, tmp_path):
        write_report(report(), tmp_path / "r.json")
        text = (tmp_path / "r.json").read_text()
        (tmp_path / "r.json").write_text(text[: len(text) // 2])
        with pytest.raises(ReportChecksumError):
            read_report(tmp_path / "r.json")

    def test_tampered(self, tmp_path):
        write_report(report(), tmp_path / "r.json")
        doc = json.loads((tmp_path / "r.json").read_text())
        doc["payload"]["seed"] = 5
        (tmp_path / "r.json").write_text(json.dumps(doc))
        with pytest.raises(ReportChecksumError, match="checksum"):
            read_report(tmp_path / "r.json")

    def test_version(self, tmp_path):
        write_report(report(), tmp_path / "r.json")
        doc = json.loads((tmp_path / "r.json").read_text())
        doc["version"] = 2
        (tmp_path / "r.json").write_text(json.dumps(doc))
        with pytest.raises(ReportError, match="version"):
            read_report(tmp_path / "r.json")

    def test_not_a_report(self, tmp_path):
        (tmp_path / "x.json").write_text("[1, 2]")
        with pytest.raises(ReportError):
            read_report(tmp_path / "x.json")

    def test_no_temp_files_left(self, tmp_path):
        write_report(report(), tmp_path / "r.json")
        assert sorted(p.name for p in tmp_path.iterdir()) == ["r.json", "r.matrix.csv"]

    def test_stored_metrics_checked(self, tmp_path):
        import hashlib
        from kifusion.metrics import _canonical
        r = report()
        payload = r.to_payload()
        payload["op"] = 0.9
        doc = {"format": "kifusion-report", "version": 1, "payload": payload,
               "sha256": hashlib.sha256(_canonical(payload).encode()).hexdigest()}
        (tmp_path / "r.json").write_text(json.dumps(doc))
        with pytest.raises(ReportError, match="disagree"):
            read_report(tmp_path / "r.json")


class TestCompare:
    def test_single(self):
        (row,) = compare_runs([report()])
        r = report()
        assert row.op_mean == r.op and row.op_std == 0.0 and row.bwt_mean == r.bwt and row.runs == 1

    def test_mean_of_seeds(self):
        rs = []
        ops = []
        for seed, v in enumerate((0.7, 0.5, 0.6)):
            m = worked()
            m.set(2, 2, v)
            rs.append(report(seed=seed, m=m))
            ops.append((0.7 + 0.75 + v) / 3)
        (row,) = compare_runs(rs)
        assert math.isclose(row.op_mean, sum(ops) / 3, rel_tol=1e-12)
        assert math.isclose(row.op_std, float(np.std(ops)), rel_tol=1e-9)

    def test_sorted_by_op(self):
        low = worked()
        low.set(0, 2, 0.1)
        rows = compare_runs([report("seq", m=low), report("kif")])
        assert [r.label for r in rows] == ["kif", "seq"]
        text = format_comparison(rows)
        assert text.splitlines()[1].startswith("kif ") and "80.00" in text
        assert comparison_csv(rows).splitlines()[0] == "label,runs,op_mean,op_std,bwt_mean,bwt_std"

    def test_mismatched_streams(self):
        other = RunReport.from_matrix(worked(), config={}, seed=0, label="x", stream={"generator": "permuted_feature"})
        with pytest.raises(ValueError, match="different task stream"):
            compare_runs([report(), other])

    def test_empty(self):
        with pytest.raises(ValueError):
            compare_runs([])


def test_render():
    text = worked().render()
    lines = text.splitlines()
    assert "—" in lines[2] and "90.0" in lines[1]
    assert worked().render(percent=False).splitlines()[1].split()[1] == "0.9000"
