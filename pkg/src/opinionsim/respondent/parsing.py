"""Map raw model replies onto question options.

The cascade is tried in order and the first rule that fires wins:

1. exact match against an option's label, table label or alias;
2. the same match after case-folding and stripping punctuation/whitespace;
3. a leading ordinal ("2", "2.", "Option 2", "Answer: 2", "2) Tend to Agree");
4. a unique label or alias occurring as a whole-word substring.

Rule 4 ignores matches nested inside a longer matching label, so
"strongly disagree" is not also read as "disagree". Short table labels
("Few", "All") only take part in rules 1-2; they are too generic for
substring search.
"""
from __future__ import annotations

import re
import unicodedata

from ..survey_data import QuestionSpec


class ParseError(ValueError):
    kind = "parse_error"


class NoMatch(ParseError):
    kind = "no_match"


class Ambiguous(ParseError):
    kind = "ambiguous"

    def __init__(self, message: str, candidates: tuple[int, ...]):
        self.candidates = candidates
        super().__init__(message)


_ORDINAL = re.compile(r"^(?:option|answer|choice)?\s*[:#]?\s*(\d+)(?=$|[\s.):,\-])", re.IGNORECASE)


def normalize_text(text: str) -> str:
    """Case-fold, drop punctuation and collapse whitespace."""
    out = []
    for ch in unicodedata.normalize("NFKC", text).casefold():
        cat = unicodedata.category(ch)
        if cat.startswith("P") or cat.startswith("S"):
            # Apostrophes vanish ("don't" -> "dont"); other marks split words.
            out.append("" if ch in "'’`" else " ")
        else:
            out.append(ch)
    return " ".join("".join(out).split())


def parse_response(raw: str, question: QuestionSpec) -> int:
    """Return the 1-based option index for ``raw`` or raise NoMatch/Ambiguous."""
    for opt in question.options:
        if raw in opt.names:
            return opt.index

    norm = normalize_text(raw)
    for opt in question.options:
        if norm and norm in (normalize_text(n) for n in opt.names):
            return opt.index

    m = _ORDINAL.match(raw.strip())
    if m:
        n = int(m.group(1))
        if 1 <= n <= len(question.options):
            return n

    return _substring_match(raw, norm, question)


def _substring_match(raw: str, norm: str, question: QuestionSpec) -> int:
    padded = f" {norm} "
    spans: list[tuple[int, int, int]] = []
    for opt in question.options:
        for name in (opt.label, *opt.aliases):
            needle = normalize_text(name)
            if not needle:
                continue
            start = padded.find(f" {needle} ")
            while start != -1:
                spans.append((start, start + len(needle) + 2, opt.index))
                start = padded.find(f" {needle} ", start + 1)
    maximal = {
        idx
        for (s, e, idx) in spans
        if not any(s2 <= s and e <= e2 and (e2 - s2) > (e - s) for (s2, e2, _) in spans)
    }
    if len(maximal) == 1:
        return maximal.pop()
    if len(maximal) > 1:
        raise Ambiguous(
            f"{raw!r} matches several options of {question.question_id}: {sorted(maximal)}",
            tuple(sorted(maximal)),
        )
    raise NoMatch(f"{raw!r} matches no option of {question.question_id}")
