"""Survey records -> clean, imputed, deduplicated, balanced, shuffled profiles.

Stages run in a fixed order (clean, impute, dedupe, balance, shuffle,
derive) and every random choice is drawn from a ``random.Random`` seeded
by the caller, so a fixed (input, seed, config) reproduces the panel
exactly. Balancing is a categorical SMOTE analogue: a minority row is
duplicated and its other attributes are re-drawn from the minority
subgroup's empirical marginals.
"""
from __future__ import annotations

import json
import math
import random
import unicodedata
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .survey_data import Profile, SurveyRecord, SurveySchema
from .vocabulary import (
    CATEGORICAL_ATTRIBUTES,
    NUMERIC_ATTRIBUTES,
    PROFILE_ATTRIBUTES,
    VocabularyError,
    canonicalize,
)

IMPUTATION_STRATEGIES = ("sample", "mode")
SYNTHETIC_ORIGIN = "synthetic-oversample"


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True)
class DroppedRecord:
    record: SurveyRecord
    reason: str
    field: str | None = None


@dataclass
class PanelBuildReport:
    seed: int
    loaded: int = 0
    dropped_invalid: int = 0
    imputed_fields: int = 0
    duplicates_removed: int = 0
    oversampled_added: int = 0
    final_size: int = 0
    imputed_by_field: dict[str, int] = field(default_factory=dict)
    drop_reasons: dict[str, int] = field(default_factory=dict)
    histograms_before: dict[str, dict[str, int]] = field(default_factory=dict)
    histograms_after: dict[str, dict[str, int]] = field(default_factory=dict)
    config: dict[str, Any] = field(default_factory=dict)

    def identity_holds(self) -> bool:
        return self.loaded == (
            self.final_size - self.oversampled_added + self.dropped_invalid + self.duplicates_removed
        )

    def histogram_totals_hold(self) -> bool:
        before = self.loaded - self.dropped_invalid - self.duplicates_removed
        return all(sum(h.values()) == before for h in self.histograms_before.values()) and all(
            sum(h.values()) == self.final_size for h in self.histograms_after.values()
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


@dataclass(frozen=True)
class PreprocessConfig:
    seed: int = 0
    imputation: str = "sample"
    balance_attributes: tuple[str, ...] = ()
    balance_floor: float | None = None

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> PreprocessConfig:
        return cls(
            seed=int(data.get("seed", 0)),
            imputation=data.get("imputation", "sample"),
            balance_attributes=tuple(data.get("balance_attributes", ())),
            balance_floor=data.get("balance_floor"),
        )


def _has_control_chars(text: str) -> bool:
    return any(unicodedata.category(ch) == "Cc" for ch in text)


def _parse_count(raw: str) -> int:
    value = int(raw.strip())
    if value < 0:
        raise ValueError("negative count")
    return value


def _parse_income(raw: str) -> float:
    value = float(raw.strip().lstrip("£").replace(",", ""))
    if math.isnan(value) or math.isinf(value) or value < 0:
        raise ValueError("income must be a finite non-negative number")
    return value


def canonical_value(record: SurveyRecord, attribute: str, schema: SurveySchema) -> Any:
    """The normalised value of one profile attribute (no sentinel handling)."""
    raw = schema.decode(attribute, record[schema.attribute_columns[attribute]])
    if attribute == "num_children":
        return _parse_count(raw)
    if attribute == "monthly_income_gbp":
        return _parse_income(raw)
    return canonicalize(attribute, raw)


def clean_records(
    records: Sequence[SurveyRecord], schema: SurveySchema | None = None
) -> tuple[list[SurveyRecord], list[DroppedRecord]]:
    """Split records into kept and dropped; never raises on bad data."""
    schema = schema or SurveySchema.default()
    kept: list[SurveyRecord] = []
    dropped: list[DroppedRecord] = []
    for rec in records:
        problem = _first_problem(rec, schema)
        if problem is None:
            kept.append(rec)
        else:
            dropped.append(DroppedRecord(rec, *problem))
    return kept, dropped


def _first_problem(rec: SurveyRecord, schema: SurveySchema) -> tuple[str, str | None] | None:
    for name in schema.fields:
        if _has_control_chars(rec[name]):
            return "stray control characters", name
    if rec.is_sentinel(schema.id_column) or not rec[schema.id_column].strip():
        return "missing profile id", schema.id_column
    for attr, column in schema.attribute_columns.items():
        if rec.is_sentinel(column):
            continue
        try:
            canonical_value(rec, attr, schema)
        except VocabularyError:
            return "unparseable category", column
        except ValueError:
            return "unparseable number", column
    return None


def impute_invalid(
    records: Sequence[SurveyRecord],
    strategy: str = "sample",
    seed: int = 0,
    schema: SurveySchema | None = None,
) -> list[SurveyRecord]:
    """Replace every sentinel-tagged field with a concrete value.

    ``sample`` draws from the empirical distribution of the field's valid
    values (seeded); ``mode`` uses the most frequent valid value, ties
    broken by first appearance.
    """
    schema = schema or SurveySchema.default()
    if strategy not in IMPUTATION_STRATEGIES:
        raise ValueError(f"unknown imputation strategy {strategy!r}")
    rng = random.Random(seed)
    updates: list[dict[str, str]] = [{} for _ in records]
    for name in schema.fields:
        if name == schema.id_column:
            continue
        missing = [i for i, r in enumerate(records) if r.is_sentinel(name)]
        if not missing:
            continue
        valid = [r[name] for r in records if not r.is_sentinel(name)]
        if not valid:
            raise PreprocessError(f"field {name!r} has no valid values to impute from")
        if strategy == "mode":
            counts = Counter(valid)
            best = max(counts.values())
            fill = next(v for v in valid if counts[v] == best)
            for i in missing:
                updates[i][name] = fill
        else:
            for i in missing:
                updates[i][name] = rng.choice(valid)
    out = []
    for rec, upd in zip(records, updates):
        if upd:
            rec = rec.replace_values(upd, imputed=rec.imputed | frozenset(upd))
        out.append(rec)
    return out


def attribute_key(record: SurveyRecord, schema: SurveySchema) -> tuple[Any, ...]:
    return tuple(
        canonical_value(record, a, schema) if a in schema.attribute_columns else None
        for a in PROFILE_ATTRIBUTES
    )


def dedupe_profiles(
    records: Sequence[SurveyRecord], schema: SurveySchema | None = None
) -> list[SurveyRecord]:
    """Drop exact duplicates on the canonical 11-attribute tuple, keeping the first."""
    schema = schema or SurveySchema.default()
    seen: set[tuple[Any, ...]] = set()
    out = []
    for rec in records:
        key = attribute_key(rec, schema)
        if key in seen:
            continue
        seen.add(key)
        out.append(rec)
    return out


def category_histogram(
    records: Iterable[SurveyRecord], attribute: str, schema: SurveySchema
) -> dict[str, int]:
    counts = Counter(str(canonical_value(r, attribute, schema)) for r in records)
    return dict(sorted(counts.items()))


def balance_panel(
    records: Sequence[SurveyRecord],
    attributes: Sequence[str],
    target_floor: float,
    seed: int = 0,
    schema: SurveySchema | None = None,
    max_passes: int = 50,
) -> list[SurveyRecord]:
    """Oversample categories whose share is below ``target_floor``.

    Attributes are balanced independently (marginals, not joint cells).
    Originals are never removed; synthetic rows are appended and carry
    ``origin="synthetic-oversample"``. Only categories present in the
    input can be raised.
    """
    schema = schema or SurveySchema.default()
    if not records:
        raise PreprocessError("cannot balance an empty panel")
    for attr in attributes:
        if attr not in schema.attribute_columns or attr not in CATEGORICAL_ATTRIBUTES:
            raise PreprocessError(f"unknown balancing attribute {attr!r}")
    if not attributes:
        return list(records)
    for attr in attributes:
        k = len(category_histogram(records, attr, schema))
        if not 0 < target_floor <= 1 / k:
            raise PreprocessError(
                f"floor {target_floor} infeasible for {attr!r} with {k} categories "
                f"(must lie in (0, 1/{k}])"
            )

    rng = random.Random(seed)
    panel = list(records)
    counter = 0
    for _ in range(max_passes):
        changed = False
        for attr in attributes:
            added = _raise_minorities(panel, attr, target_floor, rng, schema, counter)
            counter += len(added)
            if added:
                panel.extend(added)
                changed = True
        if not changed:
            return panel
    raise PreprocessError(f"balancing did not converge within {max_passes} passes")


def _raise_minorities(
    panel: list[SurveyRecord],
    attr: str,
    floor: float,
    rng: random.Random,
    schema: SurveySchema,
    counter: int,
) -> list[SurveyRecord]:
    hist = category_histogram(panel, attr, schema)
    added: list[SurveyRecord] = []
    total = len(panel)
    for category in sorted(hist):
        n = hist[category]
        size = total + len(added)
        if n / size >= floor:
            continue
        need = max(0, math.ceil((floor * size - n) / (1 - floor)) - 1)
        while (n + need) / (size + need) < floor:
            need += 1
        subgroup = [r for r in panel if str(canonical_value(r, attr, schema)) == category]
        for _ in range(need):
            added.append(_synthesize(subgroup, attr, rng, schema, counter + len(added)))
    return added


def _synthesize(
    subgroup: Sequence[SurveyRecord],
    attr: str,
    rng: random.Random,
    schema: SurveySchema,
    serial: int,
) -> SurveyRecord:
    base = rng.choice(subgroup)
    updates = {}
    for other, column in schema.attribute_columns.items():
        if other == attr:
            continue
        updates[column] = rng.choice(subgroup)[column]
    updates[schema.id_column] = f"{base[schema.id_column]}~os{serial}"
    return base.replace_values(updates, origin=SYNTHETIC_ORIGIN, row_number=-1)


def shuffle_panel(records: Sequence[Any], seed: int = 0) -> list[Any]:
    """Seeded Fisher-Yates permutation of ``records``."""
    out = list(records)
    random.Random(seed).shuffle(out)
    return out


def derive_profiles(
    records: Sequence[SurveyRecord], schema: SurveySchema | None = None
) -> list[Profile]:
    schema = schema or SurveySchema.default()
    profiles = []
    for position, rec in enumerate(records):
        row = rec.row_number if rec.row_number >= 0 else f"synthetic #{position}"
        values: dict[str, Any] = {"profile_id": rec[schema.id_column]}
        for attr in PROFILE_ATTRIBUTES:
            column = schema.attribute_columns.get(attr)
            if column is None or column not in rec.values:
                if attr == "monthly_income_gbp":
                    values[attr] = None
                    continue
                raise PreprocessError(f"row {row}: missing attribute {attr!r}")
            if rec.is_sentinel(column):
                raise PreprocessError(f"row {row}: {column!r} is still a sentinel code")
            try:
                values[attr] = canonical_value(rec, attr, schema)
            except VocabularyError as exc:
                raise VocabularyError(attr, exc.value, row=row) from None
            except ValueError:
                raise PreprocessError(f"row {row}: unparseable number in {column!r}") from None
        profiles.append(Profile(**values))
    return profiles


def build_panel(
    records: Sequence[SurveyRecord],
    config: PreprocessConfig | None = None,
    schema: SurveySchema | None = None,
) -> tuple[list[Profile], PanelBuildReport]:
    """Run the full clean -> impute -> dedupe -> balance -> shuffle -> derive chain."""
    config = config or PreprocessConfig()
    schema = schema or SurveySchema.default()
    report = PanelBuildReport(seed=config.seed, loaded=len(records))
    report.config = {
        "imputation": config.imputation,
        "balance_attributes": list(config.balance_attributes),
        "balance_floor": config.balance_floor,
    }

    kept, dropped = clean_records(records, schema)
    report.dropped_invalid = len(dropped)
    report.drop_reasons = dict(sorted(Counter(d.reason for d in dropped).items()))

    # Sub-seeds keep each stage's stream independent of the others.
    stage_rng = random.Random(config.seed)
    impute_seed, balance_seed, shuffle_seed = (stage_rng.getrandbits(64) for _ in range(3))

    imputed = impute_invalid(kept, config.imputation, impute_seed, schema)
    by_field = Counter(name for r in imputed for name in r.imputed)
    report.imputed_by_field = dict(sorted(by_field.items()))
    report.imputed_fields = sum(by_field.values())

    unique = dedupe_profiles(imputed, schema)
    report.duplicates_removed = len(imputed) - len(unique)

    hist_attrs = [a for a in CATEGORICAL_ATTRIBUTES if a in schema.attribute_columns]
    report.histograms_before = {a: category_histogram(unique, a, schema) for a in hist_attrs}
    if config.balance_attributes and unique:
        if config.balance_floor is None:
            raise PreprocessError("balance_attributes given without balance_floor")
        balanced = balance_panel(
            unique, config.balance_attributes, config.balance_floor, balance_seed, schema
        )
    else:
        balanced = unique
    report.oversampled_added = len(balanced) - len(unique)
    report.histograms_after = {a: category_histogram(balanced, a, schema) for a in hist_attrs}

    shuffled = shuffle_panel(balanced, shuffle_seed)
    profiles = derive_profiles(shuffled, schema)
    report.final_size = len(profiles)
    return profiles, report
