"""Alignment metrics between synthetic and reference response distributions.

Conventions (recorded in every MetricReport's metadata):

* chi-square is computed on vectors rescaled to sum 100 unless another
  scale is asked for; expected cells are floored at ``EPSILON`` of the
  total mass and renormalised so 0% cells cannot divide by zero;
* KL divergence uses the natural log, with both inputs floored at
  ``EPSILON`` and renormalised;
* Jaccard defaults to the weighted (Ruzicka) form sum(min)/sum(max);
* the chi-square p-value uses df = option count - 1.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

EPSILON = 1e-9
CHI_SQUARE_SCALES = ("percent", "fraction", "counts")
JACCARD_MODES = ("weighted", "support_threshold")
METRIC_NAMES = ("chi_square", "p_value", "cosine", "jaccard", "kl_divergence")


def _as_vector(values: Any) -> np.ndarray:
    if hasattr(values, "proportions"):
        values = values.proportions
    vec = np.asarray(values, dtype=float)
    if vec.ndim != 1:
        raise ValueError("distributions must be one-dimensional")
    if np.any(vec < 0) or not np.all(np.isfinite(vec)):
        raise ValueError("distribution entries must be finite and non-negative")
    return vec


def _pair(a: Any, b: Any) -> tuple[np.ndarray, np.ndarray]:
    x, y = _as_vector(a), _as_vector(b)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    return x, y


def _floor_and_normalize(vec: np.ndarray, epsilon: float) -> np.ndarray:
    total = vec.sum()
    if total <= 0:
        raise ValueError("cannot normalise an all-zero distribution")
    p = np.maximum(vec / total, epsilon)
    return p / p.sum()


def chi_square_statistic(
    observed: Any, expected: Any, scale: str = "percent", epsilon: float = EPSILON
) -> float:
    """Pearson's sum of (O - E)^2 / E on the chosen scale.

    Both vectors are epsilon-floored and renormalised first, so zero cells
    in ``expected`` stay finite and identical inputs give exactly 0.
    ``percent`` and ``fraction`` compare vectors summing to 100 or 1;
    ``counts`` rescales both to the observed total.
    """
    if scale not in CHI_SQUARE_SCALES:
        raise ValueError(f"unknown chi-square scale {scale!r}")
    o, e = _pair(observed, expected)
    if e.sum() <= 0:
        raise ValueError("expected distribution is all zero")
    if o.sum() <= 0:
        raise ValueError("observed distribution is all zero")
    total = {"percent": 100.0, "fraction": 1.0, "counts": float(o.sum())}[scale]
    o = _floor_and_normalize(o, epsilon) * total
    e = _floor_and_normalize(e, epsilon) * total
    return float(np.sum((o - e) ** 2 / e))


# ---------------------------------------------------------------------------
# Regularised incomplete gamma, Q(a, x) = Gamma(a, x) / Gamma(a).

_MAX_ITER = 10_000
_TINY = 1e-300


def _lower_series(a: float, x: float) -> float:
    """P(a, x) by its power series; converges quickly for x < a + 1."""
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-17:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _upper_continued_fraction(a: float, x: float) -> float:
    """Q(a, x) by modified Lentz evaluation; converges for x >= a + 1."""
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def regularized_upper_gamma(a: float, x: float) -> float:
    if a <= 0:
        raise ValueError("shape parameter must be positive")
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return min(1.0, max(0.0, 1.0 - _lower_series(a, x)))
    return min(1.0, max(0.0, _upper_continued_fraction(a, x)))


def chi_square_pvalue(statistic: float, degrees_of_freedom: int) -> float:
    """Upper-tail probability of the chi-square distribution."""
    if degrees_of_freedom < 1:
        raise ValueError("degrees of freedom must be >= 1")
    if statistic < 0 or math.isnan(statistic):
        raise ValueError("chi-square statistic must be non-negative")
    if math.isinf(statistic):
        return 0.0
    return regularized_upper_gamma(degrees_of_freedom / 2.0, statistic / 2.0)


# ---------------------------------------------------------------------------


def cosine_similarity(a: Any, b: Any) -> float:
    x, y = _pair(a, b)
    nx, ny = float(np.linalg.norm(x)), float(np.linalg.norm(y))
    if nx == 0 or ny == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(min(1.0, float(np.dot(x, y)) / (nx * ny)))


def jaccard_index(a: Any, b: Any, mode: str = "weighted", threshold: float | None = None) -> float:
    """Weighted: sum(min)/sum(max). Support threshold: |A & B| / |A | B| where
    each set holds the options whose proportion is at least ``threshold``."""
    x, y = _pair(a, b)
    if mode == "weighted":
        denom = float(np.maximum(x, y).sum())
        if denom == 0:
            raise ValueError("weighted Jaccard is undefined for two all-zero vectors")
        return float(np.minimum(x, y).sum()) / denom
    if mode == "support_threshold":
        if threshold is None or not 0 < threshold < 1:
            raise ValueError("support_threshold mode needs a threshold in (0, 1)")
        if x.sum() <= 0 or y.sum() <= 0:
            raise ValueError("support_threshold mode needs non-zero distributions")
        sa = x / x.sum() >= threshold
        sb = y / y.sum() >= threshold
        union = int(np.sum(sa | sb))
        if union == 0:
            raise ValueError("no option reaches the support threshold in either distribution")
        return int(np.sum(sa & sb)) / union
    raise ValueError(f"unknown Jaccard mode {mode!r}")


def kl_divergence(p: Any, q: Any, epsilon: float = EPSILON) -> float:
    """D_KL(p || q) in nats after epsilon-flooring both inputs."""
    x, y = _pair(p, q)
    ps = _floor_and_normalize(x, epsilon)
    qs = _floor_and_normalize(y, epsilon)
    return max(0.0, float(np.sum(ps * np.log(ps / qs))))


# ---------------------------------------------------------------------------
# Reports


@dataclass(frozen=True)
class MetricRow:
    question_id: str
    model: str
    n_options: int
    chi_square: float
    p_value: float
    cosine: float
    jaccard: float
    kl_divergence: float
    jaccard_mode: str = "weighted"
    chi_square_scale: str = "percent"

    def __post_init__(self) -> None:
        if self.chi_square < 0 or self.kl_divergence < 0:
            raise ValueError("chi-square and KL must be non-negative")
        for name in ("p_value", "jaccard"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} outside [0, 1]")


@dataclass(frozen=True)
class ModelAggregate:
    model: str
    n_questions: int
    chi_square: float
    p_value: float
    cosine: float
    jaccard: float
    kl_divergence: float


def evaluate_question(
    synthetic: Any,
    reference: Any,
    question_id: str = "",
    model: str = "",
    chi_square_scale: str = "percent",
    jaccard_mode: str = "weighted",
    jaccard_threshold: float | None = None,
    epsilon: float = EPSILON,
) -> MetricRow:
    x, y = _pair(synthetic, reference)
    # Inputs may arrive on different scales (fractions vs printed percents);
    # compare them as distributions.
    if x.sum() <= 0 or y.sum() <= 0:
        raise ValueError("cannot evaluate an all-zero distribution")
    x, y = x / x.sum(), y / y.sum()
    stat = chi_square_statistic(x, y, scale=chi_square_scale, epsilon=epsilon)
    return MetricRow(
        question_id=question_id,
        model=model,
        n_options=int(x.size),
        chi_square=stat,
        p_value=chi_square_pvalue(stat, int(x.size) - 1),
        cosine=cosine_similarity(x, y),
        jaccard=jaccard_index(x, y, mode=jaccard_mode, threshold=jaccard_threshold),
        kl_divergence=kl_divergence(x, y, epsilon=epsilon),
        jaccard_mode=jaccard_mode,
        chi_square_scale=chi_square_scale,
    )


def aggregate_model_scores(rows: Sequence[MetricRow]) -> ModelAggregate:
    """Unweighted mean of each metric across questions."""
    if not rows:
        raise ValueError("cannot aggregate an empty set of rows")
    models = {r.model for r in rows}
    if len(models) > 1:
        raise ValueError(f"rows span several models: {sorted(models)}")

    def mean(name: str) -> float:
        return math.fsum(getattr(r, name) for r in rows) / len(rows)

    return ModelAggregate(
        model=rows[0].model,
        n_questions=len(rows),
        **{name: mean(name) for name in METRIC_NAMES},
    )


def column_mean(values: Iterable[float]) -> float:
    values = list(values)
    if not values:
        raise ValueError("cannot average an empty column")
    return math.fsum(values) / len(values)


@dataclass
class MetricReport:
    rows: list[MetricRow]
    aggregates: list[ModelAggregate] = field(default_factory=list)
    reference: dict[str, list[float]] = field(default_factory=dict)
    synthetic: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows: Sequence[MetricRow], **kwargs: Any) -> MetricReport:
        by_model: dict[str, list[MetricRow]] = {}
        for r in rows:
            by_model.setdefault(r.model, []).append(r)
        aggregates = [aggregate_model_scores(rs) for rs in by_model.values()]
        report = cls(list(rows), aggregates, **kwargs)
        report.metadata = {**default_metadata(rows), **report.metadata}
        return report

    def to_dict(self) -> dict[str, Any]:
        return {
            "metadata": self.metadata,
            "rows": [asdict(r) for r in self.rows],
            "aggregates": [asdict(a) for a in self.aggregates],
            "reference": self.reference,
            "synthetic": self.synthetic,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> MetricReport:
        return cls(
            rows=[MetricRow(**r) for r in data["rows"]],
            aggregates=[ModelAggregate(**a) for a in data.get("aggregates", [])],
            reference={k: list(v) for k, v in data.get("reference", {}).items()},
            synthetic={m: {q: list(v) for q, v in d.items()} for m, d in data.get("synthetic", {}).items()},
            metadata=dict(data.get("metadata", {})),
        )

    def rows_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["question_id", "model", "n_options", *METRIC_NAMES, "jaccard_mode", "chi_square_scale"])
        for r in self.rows:
            writer.writerow(
                [r.question_id, r.model, r.n_options]
                + [_fmt(getattr(r, m)) for m in METRIC_NAMES]
                + [r.jaccard_mode, r.chi_square_scale]
            )
        return buf.getvalue()

    def aggregates_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model", "n_questions", *METRIC_NAMES])
        for a in self.aggregates:
            writer.writerow([a.model, a.n_questions] + [_fmt(getattr(a, m)) for m in METRIC_NAMES])
        return buf.getvalue()


def _fmt(value: float) -> str:
    return f"{value:.10g}"


def default_metadata(rows: Sequence[MetricRow]) -> dict[str, Any]:
    return {
        "chi_square_scale": sorted({r.chi_square_scale for r in rows}),
        "jaccard_mode": sorted({r.jaccard_mode for r in rows}),
        "epsilon": EPSILON,
        "kl_log_base": "e",
        "p_value_df": "n_options - 1",
    }
