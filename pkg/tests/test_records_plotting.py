import re

import numpy as np
import pytest

from scalebio.harness.plotting import emit_histogram, emit_scan_plot, emit_weight_plot
from scalebio.records import RunRecord, fmt17


def _record(with_p=True, rows=3):
    rec = RunRecord(2, with_mixture=with_p)
    for k in range(rows):
        lam = np.array([0.1 * k, -0.1 * k])
        p = np.exp(lam) / np.exp(lam).sum() if with_p else None
        rec.append(10 * k, lam, 1.0 / (k + 1), 2.0 / (k + 1), 0.5, 0.123 * k, p=p)
    return rec


def test_csv_schema_and_precision(tmp_path):
    rec = _record()
    path = rec.to_csv(tmp_path / "r.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "step,lambda_0,lambda_1,p_0,p_1,loss_val,loss_trn,lambda_update_norm,elapsed_seconds"
    assert lines[2].split(",")[0] == "10" and lines[2].endswith(",0")
    assert float(lines[3].split(",")[5]) == 1.0 / 3
    assert fmt17(1 / 3) == "0.33333333333333331"


def test_csv_without_mixture(tmp_path):
    header = _record(with_p=False).to_csv(tmp_path / "r.csv").read_text().splitlines()[0]
    assert header == "step,lambda_0,lambda_1,loss_val,loss_trn,lambda_update_norm,elapsed_seconds"


def test_csv_roundtrip_and_wallclock(tmp_path):
    rec = _record()
    back = RunRecord.from_csv(rec.to_csv(tmp_path / "a.csv", wallclock=True))
    assert back.with_mixture and len(back) == 3
    np.testing.assert_array_equal(back.column("lam"), rec.column("lam"))
    np.testing.assert_array_equal(back.column("elapsed_seconds"), rec.column("elapsed_seconds"))
    np.testing.assert_array_equal(back.column("p"), rec.column("p"))


def test_record_rejects_bad_rows():
    rec = _record()
    with pytest.raises(ValueError):
        rec.append(5, np.zeros(2), 0, 0, 0, 0, p=np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        rec.append(100, np.zeros(3), 0, 0, 0, 0, p=np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        rec.append(100, np.zeros(2), 0, 0, 0, 0)
    with pytest.raises(KeyError):
        rec.column("nope")


def test_weight_plot(tmp_path):
    a = emit_weight_plot(_record(), tmp_path / "a.svg").read_bytes()
    b = emit_weight_plot(_record(), tmp_path / "b.svg").read_bytes()
    assert a == b
    text = a.decode()
    assert 'viewBox="0 0 800 500"' in text
    assert text.count('id="weight-source-0"') == 1 and text.count('id="weight-source-1"') == 1
    assert 'id="weight-source-2"' not in text


def test_weight_plot_rejects_bad_records(tmp_path):
    with pytest.raises(ValueError):
        emit_weight_plot(RunRecord(2, with_mixture=True), tmp_path / "x.svg")
    with pytest.raises(ValueError):
        emit_weight_plot(_record(with_p=False), tmp_path / "x.svg")


def test_scan_and_histogram(tmp_path):
    rows = [dict(alpha=a, gap=1 / a) for a in (10, 20, 40)]
    s1 = emit_scan_plot(rows, tmp_path / "s1.svg", "alpha", ["gap"], "alpha", "gap").read_bytes()
    s2 = emit_scan_plot(rows, tmp_path / "s2.svg", "alpha", ["gap"], "alpha", "gap").read_bytes()
    assert s1 == s2 and b'id="series-gap"' in s1
    with pytest.raises(ValueError):
        emit_scan_plot([], tmp_path / "s3.svg", "alpha", ["gap"], "a", "b")
    h = emit_histogram({"clean": [0.9, 0.8], "corrupted": [0.1]}, tmp_path / "h.svg", "weight").read_text()
    assert re.search(r'id="hist-1', h)
