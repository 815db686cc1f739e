"""System/user prompt rendering and fine-tuning dataset export.

Rendering is a pure function of (profile, question, TEMPLATE_VERSION):
the sentence templates below are frozen, and any wording change must bump
the version so recorded transcripts stay attributable.
"""
from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .survey_data import Profile, QuestionSpec, bundled_questions
from .vocabulary import NO_QUALIFICATIONS

TEMPLATE_VERSION = "1"

ASSISTANT_FORMAT = "label"  # assistant turns carry the option label, not its index

REGION_PHRASES = {
    "North East": "the Northeast",
    "North West": "the Northwest",
    "Yorkshire and the Humber": "Yorkshire and the Humber",
    "East Midlands": "the East Midlands",
    "West Midlands": "the West Midlands",
    "East of England": "the East of England",
    "London": "London",
    "South East": "the Southeast",
    "South West": "the Southwest",
    "Wales": "Wales",
    "Scotland": "Scotland",
    "Northern Ireland": "Northern Ireland",
}

REASK_SUFFIX = "\nReply with only the option label."


@dataclass(frozen=True)
class PromptPair:
    system_text: str
    user_text: str
    profile_id: str
    question_id: str


@dataclass(frozen=True)
class FinetuneRecord:
    system_text: str
    user_text: str
    assistant_text: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "messages": [
                    {"role": "system", "content": self.system_text},
                    {"role": "user", "content": self.user_text},
                    {"role": "assistant", "content": self.assistant_text},
                ]
            },
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, line: str) -> FinetuneRecord:
        messages = json.loads(line)["messages"]
        roles = [m["role"] for m in messages]
        if roles != ["system", "user", "assistant"]:
            raise ValueError(f"unexpected message roles {roles}")
        return cls(*(m["content"] for m in messages))


def _article(word: str) -> str:
    return "an" if word[:1].lower() in "aeiou" else "a"


def _income(value: float) -> str:
    return f"£{value:.0f}" if float(value).is_integer() else f"£{value:.2f}"


def system_prompt_sentences(
    profile: Profile, questions: Mapping[str, QuestionSpec] | None = None
) -> list[str]:
    """One sentence per populated attribute, in rendering order."""
    p = profile
    sentences = [
        f"Ideologically, I describe myself as {_article(p.voting_intention)} "
        f"{p.voting_intention} supporter.",
        f"Racially, I am {p.ethnic_group}.",
        f"I am {p.gender.lower()}.",
        f"My marital status is {p.marital_status}.",
    ]
    if p.highest_qualification == NO_QUALIFICATIONS:
        sentences.append("In terms of my qualifications, I do not have any qualifications.")
    else:
        sentences.append(
            "In terms of my qualifications, My highest qualification is "
            f"{p.highest_qualification}."
        )
    if p.num_children == 0:
        sentences.append("I do not have any children.")
    elif p.num_children == 1:
        sentences.append("I have 1 child.")
    else:
        sentences.append(f"I have {p.num_children} children.")
    sentences += [
        f"I live in {REGION_PHRASES[p.region]}.",
        f"I live in {_article(p.living_area)} {p.living_area} area.",
        f"In terms of my age, my age group is {p.age_group} years old.",
        f"My profession is {p.profession}.",
    ]
    if p.monthly_income_gbp is not None:
        sentences.append(f"Financially, my monthly income is {_income(p.monthly_income_gbp)}.")
    if p.seed_attitude is not None:
        qid, label = p.seed_attitude
        question = (questions or bundled_questions())[qid]
        sentences.append(
            "When I asked to write my response to the question, "
            f'"{question.prompt_text}", I respond with {label}.'
        )
    return sentences


def render_system_prompt(
    profile: Profile, questions: Mapping[str, QuestionSpec] | None = None
) -> str:
    return " ".join(system_prompt_sentences(profile, questions))


def render_user_prompt(question: QuestionSpec) -> str:
    lines = [
        f'Please answer this question "{question.prompt_text}" with one of the options '
        "without any additional explanation. Options:"
    ]
    lines += [f"{o.index}. {o.label}" for o in question.options]
    return "\n".join(lines)


def build_prompt_pair(
    profile: Profile, question: QuestionSpec, questions: Mapping[str, QuestionSpec] | None = None
) -> PromptPair:
    return PromptPair(
        system_text=render_system_prompt(profile, questions),
        user_text=render_user_prompt(question),
        profile_id=profile.profile_id,
        question_id=question.question_id,
    )


# ---------------------------------------------------------------------------
# Fine-tuning export


@dataclass(frozen=True)
class ExportResult:
    train_path: Path
    validation_path: Path
    n_train: int
    n_validation: int
    metadata_path: Path

    @property
    def paths(self) -> tuple[Path, Path]:
        return self.train_path, self.validation_path


def _resolve_answer(question: QuestionSpec, answer: str | int) -> str:
    if isinstance(answer, int) and not isinstance(answer, bool):
        return question.option(answer).label
    try:
        return question.option(question.index_of(str(answer))).label
    except KeyError:
        raise ValueError(f"{answer!r} is not a valid option of {question.question_id}") from None


def build_finetune_records(
    panel: Sequence[Profile],
    answers: Mapping[tuple[str, str], str | int],
    questions: Mapping[str, QuestionSpec] | None = None,
) -> list[FinetuneRecord]:
    """One record per answered (profile, question) pair, in panel then question order."""
    questions = questions if questions is not None else bundled_questions()
    if not panel:
        raise ValueError("cannot export an empty panel")
    by_id = {p.profile_id: p for p in panel}
    for pid, qid in answers:
        if qid not in questions:
            raise KeyError(f"answer to unregistered question {qid!r}")
        if pid not in by_id:
            raise KeyError(f"answer for unknown profile {pid!r}")
    records = []
    for profile in panel:
        for qid, question in questions.items():
            key = (profile.profile_id, qid)
            if key not in answers:
                continue
            records.append(
                FinetuneRecord(
                    system_text=render_system_prompt(profile, questions),
                    user_text=render_user_prompt(question),
                    assistant_text=_resolve_answer(question, answers[key]),
                )
            )
    return records


def write_jsonl(records: Iterable[FinetuneRecord], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
            n += 1
    return n


def read_jsonl(path: str | Path) -> list[FinetuneRecord]:
    with open(path, encoding="utf-8") as fh:
        return [FinetuneRecord.from_json(line) for line in fh if line.strip()]


def export_finetune_dataset(
    panel: Sequence[Profile],
    answers: Mapping[tuple[str, str], str | int],
    out_dir: str | Path,
    split: float = 0.8,
    seed: int = 0,
    questions: Mapping[str, QuestionSpec] | None = None,
) -> ExportResult:
    """Write train.jsonl / validation.jsonl in chat ``messages`` format."""
    if not 0 < split < 1:
        raise ValueError("split must lie strictly between 0 and 1")
    records = build_finetune_records(panel, answers, questions)
    order = list(range(len(records)))
    random.Random(seed).shuffle(order)
    n_train = round(split * len(records))
    train_idx = sorted(order[:n_train])
    valid_idx = sorted(order[n_train:])

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_path = out / "train.jsonl"
    valid_path = out / "validation.jsonl"
    write_jsonl((records[i] for i in train_idx), train_path)
    write_jsonl((records[i] for i in valid_idx), valid_path)
    meta_path = out / "export_metadata.json"
    meta = {
        "template_version": TEMPLATE_VERSION,
        "assistant_format": ASSISTANT_FORMAT,
        "split": split,
        "seed": seed,
        "n_train": len(train_idx),
        "n_validation": len(valid_idx),
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return ExportResult(train_path, valid_path, len(train_idx), len(valid_idx), meta_path)


# ---------------------------------------------------------------------------
# Cost estimation

# USD per 1K training tokens.
DEFAULT_PRICE_TABLE = {
    "gpt-3.5-turbo": 0.008,
    "gpt-4o-mini": 0.003,
    "gpt-4o": 0.025,
}
DEFAULT_EPOCHS = 3


def approx_token_count(text: str) -> float:
    """Characters / 4, the usual rule of thumb for English BPE tokenizers."""
    return len(text) / 4


@dataclass(frozen=True)
class CostEstimate:
    tokens: float
    epochs: int
    price_per_1k_tokens: float
    dollars: float
    method: str


def estimate_finetune_cost(
    paths: Sequence[str | Path],
    price_per_1k_tokens: float | None = None,
    tokenizer: Callable[[str], float] | None = None,
    epochs: int = DEFAULT_EPOCHS,
    model: str = "gpt-3.5-turbo",
) -> CostEstimate:
    """Estimate training cost as tokens x epochs x price.

    ``price_per_1k_tokens`` defaults to the price table entry for ``model``.
    """
    if price_per_1k_tokens is None:
        price_per_1k_tokens = DEFAULT_PRICE_TABLE.get(model)
    if price_per_1k_tokens is None:
        raise ValueError(f"no price configured for model {model!r}")
    if not math.isfinite(price_per_1k_tokens) or price_per_1k_tokens <= 0:
        raise ValueError("price per 1K tokens must be positive")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    count = tokenizer or approx_token_count
    method = "chars/4" if tokenizer is None else getattr(tokenizer, "__name__", "custom tokenizer")
    tokens = 0.0
    n_records = 0
    for path in paths:
        for rec in read_jsonl(path):
            n_records += 1
            tokens += count(rec.system_text) + count(rec.user_text) + count(rec.assistant_text)
    if n_records == 0:
        raise ValueError("dataset is empty")
    dollars = tokens * epochs * price_per_1k_tokens / 1000
    return CostEstimate(tokens, epochs, price_per_1k_tokens, dollars, method)
