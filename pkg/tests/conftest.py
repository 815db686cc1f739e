from __future__ import annotations

import csv
import random
from pathlib import Path

import pytest

from opinionsim.survey_data import Profile, SurveyRecord, SurveySchema
from opinionsim.vocabulary import (
    ETHNIC_GROUPS,
    GENDERS,
    LIVING_AREAS,
    MARITAL_STATUSES,
    PROFESSIONS,
    PROFILE_ATTRIBUTES,
    QUALIFICATIONS,
    REGIONS,
    VOTING_INTENTIONS,
)

FIXTURES = Path(__file__).parent / "fixtures"

# Table-style profile rows as they might appear in a raw extract.
PROFILE_1_ROW = {
    "profile_id": "P1",
    "voting_intention": "Green Party",
    "ethnic_group": "British",
    "gender": "Male",
    "marital_status": "Married",
    "highest_qualification": "No qualifications",
    "num_children": "1",
    "region": "South East",
    "living_area": "urban",
    "age_group": "40 - 49",
    "profession": "Semi-Routine Occupations",
    "monthly_income_gbp": "3213",
}

PROFILE_2_ROW = {
    "profile_id": "P2",
    "voting_intention": "Labour Party",
    "ethnic_group": "British",
    "gender": "Female",
    "marital_status": "Divorced",
    "highest_qualification": "foundation",
    "num_children": "0",
    "region": "West Midlands",
    "living_area": "rural",
    "age_group": "40 - 49",
    "profession": "Higher Professional",
    "monthly_income_gbp": "9007",
}

AGE_BANDS = ("18-24", "25-29", "30-39", "40-49", "50-59", "60-69", "70+")


def make_profile(profile_id: str = "p1", **overrides) -> Profile:
    values = dict(
        profile_id=profile_id,
        voting_intention="Green Party",
        ethnic_group="British",
        gender="Female",
        marital_status="Single",
        highest_qualification="University",
        num_children=0,
        region="London",
        living_area="urban",
        age_group="25-29",
        profession="Creative Occupations",
        monthly_income_gbp=2500.0,
    )
    values.update(overrides)
    return Profile(**values)


def random_row(rng: random.Random, profile_id: str) -> dict[str, str]:
    return {
        "profile_id": profile_id,
        "voting_intention": rng.choice(VOTING_INTENTIONS),
        "ethnic_group": rng.choice(ETHNIC_GROUPS[:4]),
        "gender": rng.choice(GENDERS),
        "marital_status": rng.choice(MARITAL_STATUSES[:3]),
        "highest_qualification": rng.choice(QUALIFICATIONS),
        "num_children": str(rng.randint(0, 3)),
        "region": rng.choice(REGIONS[:5]),
        "living_area": rng.choice(LIVING_AREAS),
        "age_group": rng.choice(AGE_BANDS),
        "profession": rng.choice(PROFESSIONS[:4]),
        "monthly_income_gbp": str(rng.choice((1500, 2200, 3213, 4000))),
    }


def random_records(
    seed: int, n: int, sentinel_rate: float = 0.0, duplicate_rate: float = 0.0
) -> list[SurveyRecord]:
    """Valid records with optional -8/-9 sentinels and exact duplicates."""
    rng = random.Random(seed)
    rows: list[dict[str, str]] = []
    for i in range(n):
        if rows and rng.random() < duplicate_rate:
            row = dict(rng.choice(rows))
            row["profile_id"] = f"r{i}"
        else:
            row = random_row(rng, f"r{i}")
        rows.append(row)
    records = []
    for i, row in enumerate(rows):
        sentinels = {}
        for attr in PROFILE_ATTRIBUTES:
            if rng.random() < sentinel_rate:
                code = rng.choice(("-8", "-9"))
                row[attr] = code
                sentinels[attr] = "inapplicable" if code == "-8" else "missing"
        records.append(SurveyRecord(row_number=i + 2, values=row, sentinels=sentinels))
    return records


def write_survey(path: Path, rows: list[dict[str, str]], delimiter: str = ",") -> Path:
    fields = SurveySchema.default().fields
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow([row[f] for f in fields])
    return path


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


# The conditioning profile shown in the worked system-prompt example.
EXAMPLE_PROFILE = make_profile(
    "example",
    voting_intention="Liberal Democrat",
    ethnic_group="British",
    gender="Male",
    marital_status="Single",
    highest_qualification="Secondary education",
    num_children=5,
    region="South East",
    living_area="rural",
    age_group="60-69",
    profession="Semi-Routine Occupations",
    monthly_income_gbp=None,
    seed_attitude=("lifestyle", "I do quite a few things that are environmentally friendly"),
)
