"""Domain types, survey-microdata ingestion and reference distributions."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .vocabulary import (
    CATEGORICAL_ATTRIBUTES,
    PROFILE_ATTRIBUTES,
    VocabularyError,
    canonicalize,
)

logger = logging.getLogger(__name__)

DEFAULT_SENTINELS: Mapping[int, str] = {
    -8: "inapplicable",
    -9: "missing",
    -1: "dont_know",
    -2: "refused",
}

QUESTION_KINDS = ("likert5", "categorical", "binary")

# Raw reference rows whose percentages miss 100 by more than this are
# renormalised with a warning.
RENORMALIZE_TOLERANCE = 0.5


class SchemaError(ValueError):
    pass


class SurveyFormatError(ValueError):
    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(message if row is None else f"row {row}: {message}")


def normalize_distribution(raw: Iterable[float]) -> tuple[float, ...]:
    """Scale a non-negative vector so it sums to one."""
    values = [float(v) for v in raw]
    if any(v < 0 or math.isnan(v) for v in values):
        raise ValueError(f"distribution entries must be non-negative: {values}")
    total = math.fsum(values)
    if total <= 0:
        raise ValueError("cannot normalise an all-zero vector")
    return tuple(v / total for v in values)


# ---------------------------------------------------------------------------
# Questions


@dataclass(frozen=True)
class Option:
    index: int
    label: str
    short_label: str | None = None
    aliases: tuple[str, ...] = ()

    @property
    def names(self) -> tuple[str, ...]:
        """Every spelling that identifies this option, label first."""
        extra = [self.short_label] if self.short_label else []
        seen: list[str] = []
        for name in (self.label, *extra, *self.aliases):
            if name not in seen:
                seen.append(name)
        return tuple(seen)


@dataclass(frozen=True)
class QuestionSpec:
    question_id: str
    ukhls_code: str
    prompt_text: str
    options: tuple[Option, ...]
    kind: str
    title: str = ""

    def __post_init__(self) -> None:
        if self.kind not in QUESTION_KINDS:
            raise ValueError(f"{self.question_id}: unknown question kind {self.kind!r}")
        n = len(self.options)
        if n < 2:
            raise ValueError(f"{self.question_id}: a question needs at least two options")
        if [o.index for o in self.options] != list(range(1, n + 1)):
            raise ValueError(f"{self.question_id}: option indices must run 1..{n}")
        labels = [o.label for o in self.options]
        if len(set(labels)) != n:
            raise ValueError(f"{self.question_id}: option labels must be unique")
        if (self.kind == "binary") != (n == 2):
            raise ValueError(f"{self.question_id}: binary kind requires exactly two options")
        if (self.kind == "likert5") != (n == 5):
            raise ValueError(f"{self.question_id}: likert5 kind requires exactly five options")

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(o.label for o in self.options)

    @property
    def table_labels(self) -> tuple[str, ...]:
        return tuple(o.short_label or o.label for o in self.options)

    def option(self, index: int) -> Option:
        if not 1 <= index <= len(self.options):
            raise IndexError(f"{self.question_id} has no option {index}")
        return self.options[index - 1]

    def index_of(self, label: str) -> int:
        for o in self.options:
            if label in o.names:
                return o.index
        raise KeyError(f"{label!r} is not an option of {self.question_id}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> QuestionSpec:
        options = []
        for i, opt in enumerate(data["options"], start=1):
            if isinstance(opt, str):
                options.append(Option(i, opt))
            else:
                options.append(
                    Option(
                        i,
                        opt["label"],
                        opt.get("short_label"),
                        tuple(opt.get("aliases", ())),
                    )
                )
        return cls(
            question_id=data["question_id"],
            ukhls_code=data["ukhls_code"],
            prompt_text=data["prompt_text"],
            options=tuple(options),
            kind=data["kind"],
            title=data.get("title", ""),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "question_id": self.question_id,
            "ukhls_code": self.ukhls_code,
            "title": self.title,
            "prompt_text": self.prompt_text,
            "kind": self.kind,
            "options": [
                {"label": o.label, "short_label": o.short_label, "aliases": list(o.aliases)}
                for o in self.options
            ],
        }


def load_questions(path: str | Path) -> dict[str, QuestionSpec]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return _questions_from_payload(payload)


def _questions_from_payload(payload: Mapping[str, Any]) -> dict[str, QuestionSpec]:
    questions = [QuestionSpec.from_dict(q) for q in payload["questions"]]
    registry = {q.question_id: q for q in questions}
    if len(registry) != len(questions):
        raise ValueError("duplicate question ids in question file")
    return registry


@lru_cache(maxsize=1)
def _bundled_questions() -> tuple[QuestionSpec, ...]:
    text = resources.files("opinionsim.data").joinpath("questions.json").read_text("utf-8")
    return tuple(_questions_from_payload(json.loads(text)).values())


def bundled_questions() -> dict[str, QuestionSpec]:
    """The ten environmental-attitude questions shipped with the package."""
    return {q.question_id: q for q in _bundled_questions()}


# ---------------------------------------------------------------------------
# Profiles


@dataclass(frozen=True)
class Profile:
    profile_id: str
    voting_intention: str
    ethnic_group: str
    gender: str
    marital_status: str
    highest_qualification: str
    num_children: int
    region: str
    living_area: str
    age_group: str
    profession: str
    monthly_income_gbp: float | None = None
    seed_attitude: tuple[str, str] | None = None

    def __post_init__(self) -> None:
        for attr in CATEGORICAL_ATTRIBUTES:
            value = getattr(self, attr)
            if not isinstance(value, str) or canonicalize(attr, value) != value:
                raise VocabularyError(attr, value)
        if isinstance(self.num_children, bool) or not isinstance(self.num_children, int):
            raise TypeError("num_children must be an integer")
        if self.num_children < 0:
            raise ValueError("num_children must be >= 0")
        if self.monthly_income_gbp is not None:
            income = float(self.monthly_income_gbp)
            if math.isnan(income) or income < 0:
                raise ValueError("monthly_income_gbp must be a non-negative number")
        if self.seed_attitude is not None:
            qid, label = self.seed_attitude
            question = bundled_questions().get(qid)
            if question is None:
                raise ValueError(f"seed attitude references unregistered question {qid!r}")
            if label not in question.labels:
                raise ValueError(f"seed attitude {label!r} is not an option of {qid}")

    def attribute_tuple(self) -> tuple[Any, ...]:
        return tuple(getattr(self, a) for a in PROFILE_ATTRIBUTES)

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {"profile_id": self.profile_id}
        for attr in PROFILE_ATTRIBUTES:
            data[attr] = getattr(self, attr)
        data["seed_attitude"] = list(self.seed_attitude) if self.seed_attitude else None
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Profile:
        seed = data.get("seed_attitude")
        income = data.get("monthly_income_gbp")
        return cls(
            profile_id=str(data["profile_id"]),
            voting_intention=data["voting_intention"],
            ethnic_group=data["ethnic_group"],
            gender=data["gender"],
            marital_status=data["marital_status"],
            highest_qualification=data["highest_qualification"],
            num_children=int(data["num_children"]),
            region=data["region"],
            living_area=data["living_area"],
            age_group=data["age_group"],
            profession=data["profession"],
            monthly_income_gbp=None if income is None else float(income),
            seed_attitude=tuple(seed) if seed else None,
        )


def write_profiles(profiles: Iterable[Profile], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in profiles:
            fh.write(json.dumps(p.to_dict(), sort_keys=True) + "\n")


def read_profiles(path: str | Path) -> list[Profile]:
    profiles = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                profiles.append(Profile.from_dict(json.loads(line)))
    return profiles


# ---------------------------------------------------------------------------
# Survey microdata


@dataclass(frozen=True)
class SurveySchema:
    """Column layout of a survey extract and how it maps onto profiles.

    ``attribute_columns`` maps each profile attribute to the column holding
    it (e.g. ``highest_qualification -> qfhigh``); ``codebook`` optionally
    translates coded column values into vocabulary labels.
    """

    fields: tuple[str, ...]
    attribute_columns: Mapping[str, str]
    id_column: str = "profile_id"
    sentinels: Mapping[int, str] = field(default_factory=lambda: dict(DEFAULT_SENTINELS))
    codebook: Mapping[str, Mapping[str, str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(set(self.fields)) != len(self.fields):
            raise SchemaError("duplicate field names in schema")
        if self.id_column not in self.fields:
            raise SchemaError(f"id column {self.id_column!r} is not a schema field")
        unknown = set(self.attribute_columns) - set(PROFILE_ATTRIBUTES)
        if unknown:
            raise SchemaError(f"unknown profile attributes in schema: {sorted(unknown)}")
        for attr, column in self.attribute_columns.items():
            if column not in self.fields:
                raise SchemaError(f"attribute {attr!r} maps to missing column {column!r}")

    @classmethod
    def default(cls) -> SurveySchema:
        return cls(
            fields=("profile_id", *PROFILE_ATTRIBUTES),
            attribute_columns={a: a for a in PROFILE_ATTRIBUTES},
        )

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SurveySchema:
        sentinels = data.get("sentinels")
        return cls(
            fields=tuple(data["fields"]),
            attribute_columns=dict(data.get("attribute_columns") or {a: a for a in PROFILE_ATTRIBUTES}),
            id_column=data.get("id_column", "profile_id"),
            sentinels=(
                {int(k): v for k, v in sentinels.items()} if sentinels else dict(DEFAULT_SENTINELS)
            ),
            codebook={k: dict(v) for k, v in (data.get("codebook") or {}).items()},
        )

    @classmethod
    def from_file(cls, path: str | Path) -> SurveySchema:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict[str, Any]:
        return {
            "fields": list(self.fields),
            "attribute_columns": dict(self.attribute_columns),
            "id_column": self.id_column,
            "sentinels": {str(k): v for k, v in self.sentinels.items()},
            "codebook": {k: dict(v) for k, v in self.codebook.items()},
        }

    def sentinel_kind(self, raw: str) -> str | None:
        text = raw.strip()
        try:
            code = int(text)
        except ValueError:
            return None
        return self.sentinels.get(code)

    def decode(self, attribute: str, raw: str) -> str:
        """Apply the codebook (if any) for ``attribute``'s column."""
        column = self.attribute_columns[attribute]
        return self.codebook.get(column, {}).get(raw.strip(), raw)


@dataclass(frozen=True)
class SurveyRecord:
    """One survey row with its raw string values untouched.

    ``sentinels`` maps column name to sentinel meaning for every field that
    carried a reserved negative code. ``origin`` is ``"source"`` for loaded
    rows and ``"synthetic-oversample"`` for rows added by balancing.
    """

    row_number: int
    values: Mapping[str, str]
    sentinels: Mapping[str, str] = field(default_factory=dict)
    imputed: frozenset[str] = frozenset()
    origin: str = "source"

    def __getitem__(self, name: str) -> str:
        return self.values[name]

    def is_sentinel(self, name: str) -> bool:
        return name in self.sentinels

    def to_row(self, fields: Sequence[str]) -> list[str]:
        return [self.values[f] for f in fields]

    def replace_values(self, updates: Mapping[str, str], **changes: Any) -> SurveyRecord:
        values = dict(self.values)
        values.update(updates)
        sentinels = {k: v for k, v in self.sentinels.items() if k not in updates}
        return SurveyRecord(
            row_number=changes.get("row_number", self.row_number),
            values=values,
            sentinels=sentinels,
            imputed=changes.get("imputed", self.imputed),
            origin=changes.get("origin", self.origin),
        )


def _sniff_delimiter(header_line: str) -> str:
    return "\t" if "\t" in header_line else ","


def load_survey_records(path: str | Path, schema: SurveySchema | None = None) -> list[SurveyRecord]:
    """Read a comma- or tab-delimited survey extract.

    Values are kept as the exact strings found in the file; reserved
    negative codes are tagged in ``SurveyRecord.sentinels`` rather than
    coerced. Row numbers count the header as row 1.
    """
    schema = schema or SurveySchema.default()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"survey file not found: {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        first = fh.readline()
        if not first:
            raise SurveyFormatError("file is empty; a header row is required")
        fh.seek(0)
        reader = csv.reader(fh, delimiter=_sniff_delimiter(first))
        header = next(reader)
        if sorted(header) != sorted(schema.fields) or len(header) != len(set(header)):
            missing = sorted(set(schema.fields) - set(header))
            extra = sorted(set(header) - set(schema.fields))
            raise SchemaError(f"header does not match schema (missing={missing}, unexpected={extra})")
        records = []
        for row in reader:
            row_number = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise SurveyFormatError(
                    f"expected {len(header)} columns, found {len(row)}", row=row_number
                )
            values = dict(zip(header, row))
            sentinels = {}
            for name, raw in values.items():
                kind = schema.sentinel_kind(raw)
                if kind is not None:
                    sentinels[name] = kind
            records.append(SurveyRecord(row_number, values, sentinels))
    logger.info("loaded %d survey records from %s", len(records), path)
    return records


def write_survey_records(
    records: Iterable[SurveyRecord], path: str | Path, schema: SurveySchema, delimiter: str = ","
) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow(schema.fields)
        for rec in records:
            writer.writerow(rec.to_row(schema.fields))


# ---------------------------------------------------------------------------
# Distributions


@dataclass(frozen=True)
class ResponseDistribution:
    question_id: str
    proportions: tuple[float, ...]
    n_samples: int
    excluded_count: int = 0

    def __post_init__(self) -> None:
        props = tuple(float(p) for p in self.proportions)
        object.__setattr__(self, "proportions", props)
        if any(not 0.0 <= p <= 1.0 for p in props):
            raise ValueError(f"{self.question_id}: proportions must lie in [0, 1]")
        if abs(math.fsum(props) - 1.0) > 1e-9:
            raise ValueError(f"{self.question_id}: proportions must sum to 1")
        if self.n_samples < 0 or self.excluded_count < 0:
            raise ValueError(f"{self.question_id}: counts must be non-negative")

    def check_question(self, question: QuestionSpec) -> None:
        if len(self.proportions) != len(question.options):
            raise ValueError(
                f"{self.question_id}: {len(self.proportions)} proportions for "
                f"{len(question.options)} options"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "question_id": self.question_id,
            "proportions": list(self.proportions),
            "n_samples": self.n_samples,
            "excluded_count": self.excluded_count,
        }


@dataclass(frozen=True)
class ReferenceEntry:
    distribution: ResponseDistribution
    labels: tuple[str, ...]
    raw_percentages: tuple[float, ...]
    renormalized: bool
    warning: str | None = None
    source: str = ""


@dataclass(frozen=True)
class ReferenceDataset:
    entries: Mapping[str, ReferenceEntry]
    provenance: str = ""

    def __contains__(self, question_id: str) -> bool:
        return question_id in self.entries

    def __getitem__(self, question_id: str) -> ReferenceEntry:
        return self.entries[question_id]

    def distribution(self, question_id: str) -> ResponseDistribution:
        return self.entries[question_id].distribution

    @property
    def warnings(self) -> list[str]:
        return [e.warning for e in self.entries.values() if e.warning]


def build_reference_dataset(
    source: Mapping[str, Any],
    questions: Mapping[str, QuestionSpec] | None = None,
    provenance: str = "",
) -> ReferenceDataset:
    """Turn question -> raw percentages into normalised reference entries.

    Each source value is either a bare list of percentages (in option
    order) or a mapping with ``percentages`` and optionally ``options``
    (labels, checked against the question) and ``source``.
    """
    questions = questions if questions is not None else bundled_questions()
    entries: dict[str, ReferenceEntry] = {}
    for qid, spec in source.items():
        if qid not in questions:
            raise KeyError(f"reference row for unregistered question {qid!r}")
        question = questions[qid]
        if isinstance(spec, Mapping):
            raw = [float(x) for x in spec["percentages"]]
            labels = tuple(spec.get("options") or question.table_labels)
            note = spec.get("source", "")
        else:
            raw = [float(x) for x in spec]
            labels = question.table_labels
            note = ""
        if len(raw) != len(question.options):
            raise ValueError(f"{qid}: {len(raw)} percentages for {len(question.options)} options")
        if len(labels) != len(question.options):
            raise ValueError(f"{qid}: {len(labels)} option labels for {len(question.options)} options")
        if any(x < 0 for x in raw):
            raise ValueError(f"{qid}: negative percentage in {raw}")
        total = math.fsum(raw)
        if total == 0:
            raise ValueError(f"{qid}: all-zero reference row")
        proportions = normalize_distribution(raw)
        renormalized = abs(total - 100.0) > RENORMALIZE_TOLERANCE
        warning = None
        if renormalized:
            warning = f"{qid}: raw percentages sum to {total:g}, renormalised to 100"
            logger.warning(warning)
        entries[qid] = ReferenceEntry(
            distribution=ResponseDistribution(qid, proportions, n_samples=0),
            labels=labels,
            raw_percentages=tuple(raw),
            renormalized=renormalized,
            warning=warning,
            source=note,
        )
    return ReferenceDataset(entries, provenance)


def load_reference_dataset(
    path: str | Path | None = None, questions: Mapping[str, QuestionSpec] | None = None
) -> ReferenceDataset:
    """Load a reference JSON file; ``None`` loads the bundled expected column."""
    if path is None:
        text = resources.files("opinionsim.data").joinpath("reference_expected.json").read_text("utf-8")
        payload = json.loads(text)
    else:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    return build_reference_dataset(
        payload["questions"], questions=questions, provenance=payload.get("provenance", "")
    )
