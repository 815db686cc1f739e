"""CSV/JSON tables and per-question SVG bar charts for a metric report."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable
from xml.sax.saxutils import escape, quoteattr

from .metrics import MetricReport
from .orchestrator import ExperimentResult

REPORT_FORMATS = ("csv", "json", "svg")
EXPECTED_SERIES = "Expected"

# Colour-blind friendly palette; "Expected" always takes the last grey.
_PALETTE = ("#0072B2", "#E69F00", "#009E73", "#CC79A7", "#56B4E9", "#D55E00", "#F0E442")
_EXPECTED_COLOUR = "#7F7F7F"

_WIDTH = 760
_HEIGHT = 400
_MARGIN_LEFT = 60
_MARGIN_RIGHT = 20
_MARGIN_TOP = 50
_MARGIN_BOTTOM = 90


class ReportError(OSError):
    pass


def parse_formats(spec: str | Iterable[str] | None) -> tuple[str, ...]:
    """Accept "csv,json" or an iterable; unknown names are rejected."""
    if spec is None:
        return REPORT_FORMATS
    items = spec.split(",") if isinstance(spec, str) else list(spec)
    formats = tuple(dict.fromkeys(s.strip().lower() for s in items if s.strip()))
    bad = [f for f in formats if f not in REPORT_FORMATS]
    if bad:
        raise ValueError(f"unknown report formats {bad}; choose from {list(REPORT_FORMATS)}")
    return formats


def _num(value: float) -> str:
    return f"{value:.2f}".rstrip("0").rstrip(".")


def render_chart(
    question_id: str,
    series: dict[str, list[float]],
    labels: list[str],
    title: str = "",
) -> str:
    """Grouped bars: one group per option, one bar per series (in order).

    Values are proportions in [0, 1] and drawn as percentages.
    """
    names = list(series)
    n_options = len(labels)
    if not names or any(len(v) != n_options for v in series.values()):
        raise ValueError(f"{question_id}: every series needs {n_options} values")
    top = max(max(v) for v in series.values()) * 100
    y_max = max(10, int(-(-top // 10)) * 10)
    plot_w = _WIDTH - _MARGIN_LEFT - _MARGIN_RIGHT
    plot_h = _HEIGHT - _MARGIN_TOP - _MARGIN_BOTTOM
    group_w = plot_w / n_options
    bar_w = group_w * 0.8 / len(names)
    base_y = _MARGIN_TOP + plot_h

    def colour(i: int, name: str) -> str:
        return _EXPECTED_COLOUR if name == EXPECTED_SERIES else _PALETTE[i % len(_PALETTE)]

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}" '
        f'viewBox="0 0 {_WIDTH} {_HEIGHT}" font-family="sans-serif" font-size="11">',
        f"<title>{escape(title or question_id)}</title>",
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
        f'<text x="{_WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="14">'
        f"{escape(title or question_id)}</text>",
    ]
    for tick in range(0, y_max + 1, 10):
        y = base_y - plot_h * tick / y_max
        out.append(
            f'<line x1="{_MARGIN_LEFT}" y1="{y:.2f}" x2="{_WIDTH - _MARGIN_RIGHT}" y2="{y:.2f}" '
            f'stroke="#DDDDDD"/>'
        )
        out.append(f'<text x="{_MARGIN_LEFT - 6}" y="{y + 4:.2f}" text-anchor="end">{tick}%</text>')
    for j, label in enumerate(labels):
        gx = _MARGIN_LEFT + j * group_w + group_w * 0.1
        for i, name in enumerate(names):
            pct = series[name][j] * 100
            h = plot_h * pct / y_max
            out.append(
                f'<rect class="bar" data-series={quoteattr(name)} data-option="{j + 1}" '
                f'x="{gx + i * bar_w:.2f}" y="{base_y - h:.2f}" width="{bar_w:.2f}" '
                f'height="{h:.2f}" fill="{colour(i, name)}"><title>{escape(name)}: '
                f"{_num(pct)}%</title></rect>"
            )
        cx = _MARGIN_LEFT + (j + 0.5) * group_w
        out.append(f'<text x="{cx:.2f}" y="{base_y + 16:.2f}" text-anchor="middle">{escape(label)}</text>')
    out.append(
        f'<line x1="{_MARGIN_LEFT}" y1="{base_y:.2f}" x2="{_WIDTH - _MARGIN_RIGHT}" '
        f'y2="{base_y:.2f}" stroke="black"/>'
    )
    lx = _MARGIN_LEFT
    ly = _HEIGHT - 30
    for i, name in enumerate(names):
        out.append(f'<rect x="{lx}" y="{ly}" width="12" height="12" fill="{colour(i, name)}"/>')
        out.append(f'<text x="{lx + 16}" y="{ly + 10}">{escape(name)}</text>')
        lx += 24 + 7 * len(name)
    out.append("</svg>")
    return "\n".join(out) + "\n"


def chart_series(report: MetricReport, question_id: str) -> dict[str, list[float]]:
    series = {
        model: by_q[question_id]
        for model, by_q in report.synthetic.items()
        if question_id in by_q
    }
    series[EXPECTED_SERIES] = report.reference[question_id]
    return series


def emit_report(
    report: MetricReport,
    result: ExperimentResult | None,
    formats: Iterable[str],
    out_dir: str | Path,
) -> list[Path]:
    """Write the requested formats under ``out_dir`` and return the paths.

    An empty ``formats`` writes nothing and touches nothing.
    """
    formats = parse_formats(formats)
    if not formats:
        return []
    out = Path(out_dir)
    written: list[Path] = []

    def put(path: Path, text: str) -> None:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise ReportError(f"cannot write {path}: {exc}") from exc
        written.append(path)

    if "csv" in formats:
        put(out / "metrics.csv", report.rows_csv())
        put(out / "model_means.csv", report.aggregates_csv())
        if result is not None:
            put(out / "distributions.csv", result.distributions_csv())
    if "json" in formats:
        payload = report.to_dict()
        if result is not None:
            payload["experiment"] = {k: v for k, v in result.to_dict().items() if k != "distributions"}
        put(out / "report.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
    if "svg" in formats:
        labels = report.metadata.get("option_labels", {})
        titles = report.metadata.get("question_titles", {})
        for qid in report.reference:
            series = chart_series(report, qid)
            n = len(report.reference[qid])
            put(
                out / "charts" / f"{qid}.svg",
                render_chart(qid, series, labels.get(qid) or [str(i) for i in range(1, n + 1)], titles.get(qid, qid)),
            )
    return written
