"""Declared vocabularies for profile attributes and their canonicalisation.

Raw survey values go through :func:`canonicalize`: case-folding, whitespace
collapse and a synonym table map free-form spellings onto the canonical
labels listed here. Anything that does not land on a declared label is
rejected with :class:`VocabularyError`.
"""
from __future__ import annotations

import re

VOTING_INTENTIONS = (
    "Green Party",
    "Labour Party",
    "Conservative Party",
    "Liberal Democrat",
    "Reform UK",
    "Scottish National Party",
    "Plaid Cymru",
    "Other Party",
)

ETHNIC_GROUPS = (
    "British",
    "White British",
    "Irish",
    "Other White",
    "Mixed-race",
    "Indian",
    "Pakistani",
    "Bangladeshi",
    "Chinese",
    "Other Asian",
    "Black African",
    "Black Caribbean",
    "Arab",
    "Other Ethnic Group",
)

GENDERS = ("Male", "Female")

MARITAL_STATUSES = (
    "Single",
    "Married",
    "Civil Partnership",
    "Cohabiting",
    "Separated",
    "Divorced",
    "Widowed",
)

NO_QUALIFICATIONS = "No qualifications"

QUALIFICATIONS = (
    NO_QUALIFICATIONS,
    "Secondary education",
    "GCSE",
    "A-level",
    "Foundation",
    "University",
    "Bachelor's degree",
    "Postgraduate degree",
    "Other qualification",
)

REGIONS = (
    "North East",
    "North West",
    "Yorkshire and the Humber",
    "East Midlands",
    "West Midlands",
    "East of England",
    "London",
    "South East",
    "South West",
    "Wales",
    "Scotland",
    "Northern Ireland",
)

LIVING_AREAS = ("urban", "suburban", "rural")

PROFESSIONS = (
    "Higher Managerial",
    "Higher Professional",
    "Lower Managerial and Professional",
    "Intermediate Occupations",
    "Small Employers and Own Account Workers",
    "Lower Supervisory and Technical",
    "Semi-Routine Occupations",
    "Routine Occupations",
    "Skilled Trades",
    "Creative Occupations",
    "Never Worked and Long-term Unemployed",
    "Full-time Students",
)

# Age bands are open-ended ("40-49", "45-49", "80+"), so they are declared by
# pattern rather than by list.
_AGE_BAND = re.compile(r"^(\d{2})-(\d{2,3})$|^(\d{2})\+$")

CATEGORICAL_VOCABULARIES: dict[str, tuple[str, ...]] = {
    "voting_intention": VOTING_INTENTIONS,
    "ethnic_group": ETHNIC_GROUPS,
    "gender": GENDERS,
    "marital_status": MARITAL_STATUSES,
    "highest_qualification": QUALIFICATIONS,
    "region": REGIONS,
    "living_area": LIVING_AREAS,
    "profession": PROFESSIONS,
}

# Canonical attribute order; doubles as the dedupe key layout.
PROFILE_ATTRIBUTES = (
    "voting_intention",
    "ethnic_group",
    "gender",
    "marital_status",
    "highest_qualification",
    "num_children",
    "region",
    "living_area",
    "age_group",
    "profession",
    "monthly_income_gbp",
)

CATEGORICAL_ATTRIBUTES = (
    "voting_intention",
    "ethnic_group",
    "gender",
    "marital_status",
    "highest_qualification",
    "region",
    "living_area",
    "age_group",
    "profession",
)

NUMERIC_ATTRIBUTES = ("num_children", "monthly_income_gbp")

# Keys are already in folded form (see _fold).
SYNONYMS: dict[str, dict[str, str]] = {
    "voting_intention": {
        "green": "Green Party",
        "greens": "Green Party",
        "labour": "Labour Party",
        "conservative": "Conservative Party",
        "conservatives": "Conservative Party",
        "tory": "Conservative Party",
        "liberal democrats": "Liberal Democrat",
        "lib dem": "Liberal Democrat",
        "libdem": "Liberal Democrat",
        "reform": "Reform UK",
        "snp": "Scottish National Party",
        "other": "Other Party",
    },
    "ethnic_group": {
        "mixed": "Mixed-race",
        "mixed race": "Mixed-race",
        "white": "White British",
        "other": "Other Ethnic Group",
    },
    "gender": {"m": "Male", "man": "Male", "f": "Female", "woman": "Female"},
    "marital_status": {"never married": "Single", "civil partner": "Civil Partnership"},
    "highest_qualification": {
        "none": NO_QUALIFICATIONS,
        "no qualification": NO_QUALIFICATIONS,
        "no qualifications": NO_QUALIFICATIONS,
        "secondary": "Secondary education",
        "a level": "A-level",
        "degree": "University",
        "bachelors degree": "Bachelor's degree",
        "bachelor degree": "Bachelor's degree",
        "postgraduate": "Postgraduate degree",
    },
    "region": {
        "northeast": "North East",
        "north east region": "North East",
        "northwest": "North West",
        "north west region": "North West",
        "southeast": "South East",
        "south east region": "South East",
        "southwest": "South West",
        "south west region": "South West",
        "west midlands region": "West Midlands",
        "east midlands region": "East Midlands",
        "east of england region": "East of England",
        "yorkshire": "Yorkshire and the Humber",
    },
    "living_area": {"urban area": "urban", "suburban area": "suburban", "rural area": "rural"},
    "profession": {
        "semi routine": "Semi-Routine Occupations",
        "routine": "Routine Occupations",
        "student": "Full-time Students",
    },
}


class VocabularyError(ValueError):
    """A value that does not map onto its attribute's declared vocabulary."""

    def __init__(self, attribute: str, value: object, row: int | None = None):
        self.attribute = attribute
        self.value = value
        self.row = row
        where = f" (row {row})" if row is not None else ""
        super().__init__(f"unparseable category for {attribute!r}: {value!r}{where}")


def _fold(text: str) -> str:
    text = " ".join(text.split()).casefold()
    return text.replace("-", " ").replace("'", "").replace("’", "")


_FOLDED = {
    attr: {_fold(label): label for label in labels}
    for attr, labels in CATEGORICAL_VOCABULARIES.items()
}


def canonical_age_group(value: str) -> str:
    compact = re.sub(r"\s+", "", value)
    compact = re.sub(r"(?i)(yearsold|years)$", "", compact)
    m = _AGE_BAND.match(compact)
    if not m:
        raise VocabularyError("age_group", value)
    if m.group(3) is not None:
        return f"{int(m.group(3))}+"
    lo, hi = int(m.group(1)), int(m.group(2))
    if lo > hi:
        raise VocabularyError("age_group", value)
    return f"{lo}-{hi}"


def canonicalize(attribute: str, value: str) -> str:
    """Map a raw categorical value onto the declared label for ``attribute``."""
    if attribute == "age_group":
        return canonical_age_group(value)
    try:
        folded_vocab = _FOLDED[attribute]
    except KeyError:
        raise KeyError(f"{attribute!r} is not a categorical profile attribute") from None
    key = _fold(value)
    if key in folded_vocab:
        return folded_vocab[key]
    synonym = SYNONYMS.get(attribute, {}).get(key)
    if synonym is not None:
        return synonym
    raise VocabularyError(attribute, value)


def is_valid(attribute: str, value: str) -> bool:
    try:
        canonicalize(attribute, value)
    except VocabularyError:
        return False
    return True
