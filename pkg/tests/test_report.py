from __future__ import annotations

import json
import re

import pytest

from opinionsim.consistency import published_result
from opinionsim.orchestrator import compare_to_reference
from opinionsim.report import EXPECTED_SERIES, ReportError, emit_report, parse_formats, render_chart
from opinionsim.survey_data import load_reference_dataset


@pytest.fixture(scope="module")
def published():
    result = published_result("fine_tuned")
    return result, compare_to_reference(result, load_reference_dataset())


def bars(svg):
    return re.findall(r'<rect class="bar" data-series="([^"]+)" data-option="(\d+)"', svg)


def test_lifestyle_chart_has_five_groups_of_four_bars(published, tmp_path):
    _, report = published
    emit_report(report, None, ["svg"], tmp_path)
    svg = (tmp_path / "charts" / "lifestyle.svg").read_text()
    found = bars(svg)
    assert len(found) == 20
    groups = {}
    for series, option in found:
        groups.setdefault(option, []).append(series)
    assert sorted(groups) == ["1", "2", "3", "4", "5"]
    for series in groups.values():
        assert series == ["GPT-4o", "GPT-4o mini", "GPT-4o1-preview", EXPECTED_SERIES]
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert len(list((tmp_path / "charts").glob("*.svg"))) == 10


def test_chart_bytes_are_deterministic(published, tmp_path):
    _, report = published
    emit_report(report, None, ["svg"], tmp_path / "a")
    emit_report(report, None, ["svg"], tmp_path / "b")
    for path in (tmp_path / "a" / "charts").iterdir():
        assert path.read_bytes() == (tmp_path / "b" / "charts" / path.name).read_bytes()


def test_bar_heights_track_values():
    svg = render_chart("q", {"A": [0.2, 0.8], EXPECTED_SERIES: [0.5, 0.5]}, ["Yes", "No"])
    heights = [float(h) for h in re.findall(r'class="bar"[^>]*height="([\d.]+)"', svg)]
    a_yes, e_yes, a_no, e_no = heights
    assert a_no == pytest.approx(4 * a_yes, rel=1e-3)
    assert e_yes == pytest.approx(e_no)
    with pytest.raises(ValueError):
        render_chart("q", {"A": [1.0]}, ["Yes", "No"])


def test_tables_and_json(published, tmp_path):
    result, report = published
    paths = emit_report(report, result, "csv,json", tmp_path)
    assert {p.name for p in paths} == {"metrics.csv", "model_means.csv", "distributions.csv", "report.json"}
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert "chi_square" in header and "cosine" in header
    assert len((tmp_path / "metrics.csv").read_text().splitlines()) == 31
    payload = json.loads((tmp_path / "report.json").read_text())
    assert len(payload["rows"]) == 30 and "experiment" in payload


def test_empty_formats_write_nothing(published, tmp_path):
    _, report = published
    target = tmp_path / "never"
    assert emit_report(report, None, [], target) == []
    assert not target.exists()


def test_unwritable_directory_raises(published, tmp_path):
    _, report = published
    blocker = tmp_path / "file"
    blocker.write_text("not a directory")
    with pytest.raises(ReportError, match="cannot write"):
        emit_report(report, None, ["json"], blocker)


def test_parse_formats():
    assert parse_formats(None) == ("csv", "json", "svg")
    assert parse_formats("svg, CSV,svg") == ("svg", "csv")
    assert parse_formats("") == ()
    with pytest.raises(ValueError):
        parse_formats("png")
