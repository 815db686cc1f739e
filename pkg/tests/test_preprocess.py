from __future__ import annotations

import json
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import PROFILE_1_ROW, PROFILE_2_ROW, random_records
from opinionsim.preprocess import (
    SYNTHETIC_ORIGIN,
    PreprocessConfig,
    PreprocessError,
    balance_panel,
    build_panel,
    category_histogram,
    clean_records,
    dedupe_profiles,
    derive_profiles,
    impute_invalid,
    shuffle_panel,
)
from opinionsim.survey_data import SurveyRecord, SurveySchema
from opinionsim.vocabulary import VocabularyError

SCHEMA = SurveySchema.default()


def rec(row: dict, n: int = 2, **sentinels) -> SurveyRecord:
    return SurveyRecord(n, dict(row), dict(sentinels))


# --- cleaning -------------------------------------------------------------------


def test_clean_keeps_valid_and_reports_reasons():
    good = rec(PROFILE_1_ROW)
    garbled_age = rec(dict(PROFILE_1_ROW, age_group="4Q-49"), 3)
    bad_income = rec(dict(PROFILE_1_ROW, monthly_income_gbp="lots"), 4)
    control = rec(dict(PROFILE_1_ROW, region="London\x07"), 5)
    kept, dropped = clean_records([good, garbled_age, bad_income, control])
    assert kept == [good]
    assert [(d.record.row_number, d.reason) for d in dropped] == [
        (3, "unparseable category"),
        (4, "unparseable number"),
        (5, "stray control characters"),
    ]
    assert dropped[0].field == "age_group"


def test_clean_income_with_currency_is_kept_and_empty_input():
    assert clean_records([rec(dict(PROFILE_1_ROW, monthly_income_gbp="£3,213"))])[1] == []
    assert clean_records([]) == ([], [])


def test_clean_leaves_sentinels_for_imputation():
    r = rec(dict(PROFILE_1_ROW, highest_qualification="-8"), highest_qualification="inapplicable")
    kept, dropped = clean_records([r])
    assert kept == [r] and dropped == []


# --- imputation -------------------------------------------------------------------


def test_impute_mostly_missing_field_draws_from_valid_values():
    # 97 of 100 rows carry -8 for qualification; only three valid values exist.
    rows = []
    for i in range(100):
        row = dict(PROFILE_1_ROW, profile_id=f"r{i}")
        if i < 3:
            row["highest_qualification"] = ("University", "GCSE", "A-level")[i]
            rows.append(rec(row, i))
        else:
            row["highest_qualification"] = "-8"
            rows.append(rec(row, i, highest_qualification="inapplicable"))
    out = impute_invalid(rows, "sample", seed=11)
    assert all(not r.sentinels for r in out)
    values = Counter(r["highest_qualification"] for r in out)
    assert set(values) <= {"University", "GCSE", "A-level"}
    assert len(values) == 3  # sampling keeps diversity
    assert sum(1 for r in out if "highest_qualification" in r.imputed) == 97
    assert impute_invalid(rows, "sample", seed=11) == out
    mode = impute_invalid(rows, "mode", seed=11)
    assert Counter(r["highest_qualification"] for r in mode)["University"] == 98


def test_impute_no_sentinels_is_identity():
    rows = random_records(1, 20)
    assert impute_invalid(rows, seed=5) == rows


def test_impute_field_without_valid_values_errors():
    rows = [rec(dict(PROFILE_1_ROW, region="-9"), region="missing") for _ in range(3)]
    with pytest.raises(PreprocessError, match="region"):
        impute_invalid(rows)
    with pytest.raises(ValueError):
        impute_invalid(rows, strategy="median")


# --- dedupe -------------------------------------------------------------------------


def test_dedupe_identical_profile_rows():
    a = rec(PROFILE_1_ROW, 2)
    b = rec(dict(PROFILE_1_ROW, profile_id="copy", gender="male", age_group="40-49"), 3)
    c = rec(dict(PROFILE_1_ROW, monthly_income_gbp="3214"), 4)
    assert dedupe_profiles([a, b, c]) == [a, c]
    assert dedupe_profiles([]) == []


# --- balancing ------------------------------------------------------------------------


def skewed_panel(n_major: int, n_minor: int) -> list[SurveyRecord]:
    rows = []
    for i in range(n_major + n_minor):
        gender = "Male" if i < n_major else "Female"
        rows.append(rec(dict(PROFILE_1_ROW, profile_id=f"r{i}", gender=gender, num_children=str(i % 4)), i))
    return rows


def test_balance_raises_minority_to_floor():
    panel = skewed_panel(95, 5)
    out = balance_panel(panel, ["gender"], 0.10, seed=3)
    counts = Counter(r["gender"] for r in out)
    assert counts["Female"] / len(out) >= 0.10
    # Minimal: one fewer synthetic row would miss the floor.
    assert (counts["Female"] - 1) / (len(out) - 1) < 0.10
    assert out[: len(panel)] == panel
    added = out[len(panel):]
    assert added and all(r.origin == SYNTHETIC_ORIGIN and r["gender"] == "Female" for r in added)
    assert len({r["profile_id"] for r in out}) == len(out)
    assert balance_panel(panel, ["gender"], 0.10, seed=3) == out


def test_balance_noop_and_errors():
    panel = skewed_panel(50, 50)
    assert balance_panel(panel, ["gender"], 0.5) == panel
    with pytest.raises(PreprocessError):
        balance_panel(panel, ["gender"], 0.6)
    with pytest.raises(PreprocessError):
        balance_panel(panel, ["shoe_size"], 0.1)
    with pytest.raises(PreprocessError):
        balance_panel(panel, ["num_children"], 0.1)
    with pytest.raises(PreprocessError):
        balance_panel([], ["gender"], 0.1)


# --- shuffle ----------------------------------------------------------------------------


def test_shuffle_is_seeded_permutation():
    rows = list(range(100))
    a, b = shuffle_panel(rows, 1), shuffle_panel(rows, 2)
    assert sorted(a) == rows and sorted(b) == rows
    assert a != b
    assert shuffle_panel(rows, 1) == a
    assert shuffle_panel(["only"], 9) == ["only"]


# --- deriving profiles ----------------------------------------------------------------------


def test_derive_table_profiles():
    p1, p2 = derive_profiles([rec(PROFILE_1_ROW), rec(PROFILE_2_ROW, 3)])
    assert (p1.age_group, p1.gender, p1.monthly_income_gbp, p1.num_children, p1.voting_intention) == (
        "40-49", "Male", 3213.0, 1, "Green Party"
    )
    assert p1.highest_qualification == "No qualifications"
    assert p2.num_children == 0
    assert p2.highest_qualification == "Foundation"


def test_derive_errors_name_field_and_row():
    with pytest.raises(VocabularyError) as err:
        derive_profiles([rec(dict(PROFILE_1_ROW, region="Atlantis"), 7)])
    assert err.value.attribute == "region" and err.value.row == 7
    schema = SurveySchema(fields=("profile_id", "gender"), attribute_columns={"gender": "gender"})
    with pytest.raises(PreprocessError, match="missing attribute"):
        derive_profiles([SurveyRecord(2, {"profile_id": "x", "gender": "Male"})], schema)


# --- full chain -------------------------------------------------------------------------------


def test_build_panel_report_and_determinism(tmp_path):
    records = random_records(4, 200, sentinel_rate=0.05, duplicate_rate=0.1)
    records.append(rec(dict(PROFILE_1_ROW, age_group="??"), 999))
    config = PreprocessConfig(seed=42, balance_attributes=("gender", "living_area"), balance_floor=0.3)
    profiles, report = build_panel(records, config)
    assert report.loaded == len(records)
    assert report.dropped_invalid == 1
    assert report.duplicates_removed > 0
    assert report.imputed_fields > 0
    assert report.final_size == len(profiles)
    assert report.identity_holds() and report.histogram_totals_hold()
    again, report2 = build_panel(records, config)
    assert again == profiles
    assert report2.to_json() == report.to_json()
    report.write(tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["seed"] == 42


def test_build_panel_requires_floor_with_attributes():
    with pytest.raises(PreprocessError):
        build_panel(random_records(1, 10), PreprocessConfig(balance_attributes=("gender",)))


# --- property suite ----------------------------------------------------------------------------

panel_params = st.tuples(
    st.integers(0, 2**32),
    st.integers(1, 60),
    st.floats(0, 0.3),
    st.floats(0, 0.5),
)


@settings(max_examples=40, deadline=None)
@given(panel_params)
def test_pipeline_invariants(params):
    seed, n, sentinel_rate, duplicate_rate = params
    records = random_records(seed, n, sentinel_rate, duplicate_rate)

    shuffled = shuffle_panel(records, seed)
    assert sorted(r.row_number for r in shuffled) == sorted(r.row_number for r in records)

    try:
        imputed = impute_invalid(records, seed=seed)
    except PreprocessError:
        return  # a field with no valid values at all; covered elsewhere
    assert not any(r.sentinels for r in imputed)

    once = dedupe_profiles(imputed)
    assert dedupe_profiles(once) == once

    k = len(category_histogram(once, "gender", SCHEMA))
    floor = 0.4 / k
    balanced = balance_panel(once, ["gender", "living_area"], floor if k else 0.1, seed=seed)
    assert balanced[: len(once)] == once
    for attr in ("gender", "living_area"):
        hist = category_histogram(balanced, attr, SCHEMA)
        assert all(c / len(balanced) >= floor for c in hist.values())

    config = PreprocessConfig(seed=seed, balance_attributes=("gender",), balance_floor=0.3)
    profiles, report = build_panel(records, config)
    assert report.identity_holds() and report.histogram_totals_hold()
    assert report.final_size == len(profiles)
