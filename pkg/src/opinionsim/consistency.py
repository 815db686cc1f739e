"""Internal consistency of the bundled published result tables.

Per-question metric rows are averaged per model and compared with the
published model means, and binary-question Jaccard means are recomputed
from the per-question rows.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from importlib import resources
from typing import Any, Mapping

from .orchestrator import ExperimentResult
from .survey_data import ResponseDistribution, normalize_distribution

PASS_TOLERANCE = 0.005
FLAG_TOLERANCE = 0.02
VARIANTS = ("fine_tuned", "pre_trained")
STRICT_METRICS = ("cosine", "jaccard", "kl_divergence")


class ConsistencyDataError(RuntimeError):
    pass


@dataclass(frozen=True)
class Check:
    name: str
    computed: float
    reported: float
    residual: float
    status: str  # "pass" | "flag" | "fail"
    tolerance: float

    def line(self) -> str:
        return (
            f"{self.status.upper():4s}  {self.name}: computed {self.computed:.4f} "
            f"vs reported {self.reported:.4f} (residual {self.residual:.4f}, tol {self.tolerance})"
        )


@dataclass
class ConsistencyReport:
    checks: list[Check]

    @property
    def hard_failures(self) -> list[Check]:
        return [c for c in self.checks if c.status == "fail"]

    @property
    def flagged(self) -> list[Check]:
        return [c for c in self.checks if c.status == "flag"]

    @property
    def ok(self) -> bool:
        return not self.hard_failures

    def by_name(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict[str, Any]:
        return {
            "ok": self.ok,
            "n_pass": sum(c.status == "pass" for c in self.checks),
            "n_flag": len(self.flagged),
            "n_fail": len(self.hard_failures),
            "checks": [asdict(c) for c in self.checks],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


@lru_cache(maxsize=1)
def _bundled_text() -> str:
    try:
        return resources.files("opinionsim.data").joinpath("published_tables.json").read_text("utf-8")
    except (FileNotFoundError, ModuleNotFoundError) as exc:
        raise ConsistencyDataError("bundled result tables are missing") from exc


def load_published_tables() -> dict[str, Any]:
    return json.loads(_bundled_text())


def _strict(name: str, computed: float, reported: float) -> Check:
    residual = abs(computed - reported)
    # The tiny slack absorbs binary float noise at exactly the tolerance.
    status = "pass" if residual <= PASS_TOLERANCE + 1e-12 else "fail"
    return Check(name, computed, reported, residual, status, PASS_TOLERANCE)


def _flaggable(name: str, computed: float, reported: float) -> Check:
    residual = abs(computed - reported)
    if residual <= PASS_TOLERANCE + 1e-12:
        status = "pass"
    elif residual <= FLAG_TOLERANCE + 1e-12:
        status = "flag"
    else:
        status = "fail"
    return Check(name, computed, reported, residual, status, FLAG_TOLERANCE)


def _mean(values: list[float]) -> float:
    return math.fsum(values) / len(values)


def consistency_check(tables: Mapping[str, Any] | None = None) -> ConsistencyReport:
    """Recompute published means from published per-question rows.

    Cosine, Jaccard and KL must agree within 0.005 or the check fails;
    chi-square passes within 0.005, is flagged up to 0.02 and fails beyond.
    """
    if tables is None:
        tables = load_published_tables()
    try:
        per_question = tables["per_question_metrics"]
        means = tables["model_means"]
        binary = tables["binary_jaccard_means"]["values"]
        models = tables["models"]
    except KeyError as exc:
        raise ConsistencyDataError(f"result tables lack section {exc}") from exc

    checks: list[Check] = []
    for variant in VARIANTS:
        rows = per_question[variant]["rows"]
        reported = means[variant]["values"]
        for model in models:
            model_rows = [r for r in rows if r["model"] == model]
            if not model_rows:
                raise ConsistencyDataError(f"no per-question rows for {variant} {model}")
            for metric in ("chi_square", *STRICT_METRICS):
                computed = _mean([r[metric] for r in model_rows])
                name = f"{variant}/{model}/{metric}"
                rule = _flaggable if metric == "chi_square" else _strict
                checks.append(rule(name, computed, reported[model][metric]))
        if "Average" in reported:
            for metric in ("chi_square", *STRICT_METRICS):
                computed = _mean([reported[m][metric] for m in models])
                rule = _flaggable if metric == "chi_square" else _strict
                checks.append(rule(f"{variant}/Average/{metric}", computed, reported["Average"][metric]))

    for item in binary:
        variant, qid = item["variant"], item["question_id"]
        values = [r["jaccard"] for r in per_question[variant]["rows"] if r["question_id"] == qid]
        if not values:
            raise ConsistencyDataError(f"no {variant} rows for binary question {qid}")
        checks.append(_strict(f"{variant}/{qid}/binary_jaccard_mean", _mean(values), item["value"]))
    return ConsistencyReport(checks)


def published_result(variant: str, tables: Mapping[str, Any] | None = None) -> ExperimentResult:
    """The published synthetic distributions wrapped as an experiment result.

    Percentages are normalised to proportions; n_samples is 0 because the
    panel sizes behind the published columns are not known.
    """
    if tables is None:
        tables = load_published_tables()
    block = tables["synthetic_distributions"][variant]["questions"]
    distributions: dict[str, dict[str, ResponseDistribution]] = {}
    for model in tables["models"]:
        distributions[model] = {
            qid: ResponseDistribution(qid, tuple(normalize_distribution(entry[model])), n_samples=0)
            for qid, entry in block.items()
        }
    return ExperimentResult(
        distributions=distributions,
        panel_size=0,
        config={"source": tables["synthetic_distributions"][variant]["source"]},
    )
