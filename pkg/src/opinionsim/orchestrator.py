"""Experiment configuration, concurrent simulation runs and tallying."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import random
import sys
from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

from .metrics import MetricReport, evaluate_question
from .promptgen import REASK_SUFFIX, TEMPLATE_VERSION, PromptPair, build_prompt_pair
from .respondent import (
    Backend,
    BackendConfig,
    ParseError,
    Transcript,
    TranscriptWriter,
    make_backend,
    parse_response,
)
from .survey_data import (
    Profile,
    QuestionSpec,
    ReferenceDataset,
    ResponseDistribution,
    bundled_questions,
    load_questions,
    load_reference_dataset,
    read_profiles,
)
from .vocabulary import (
    ETHNIC_GROUPS,
    GENDERS,
    LIVING_AREAS,
    MARITAL_STATUSES,
    PROFESSIONS,
    QUALIFICATIONS,
    REGIONS,
    VOTING_INTENTIONS,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

DEFAULT_PARSE_FAILURE_THRESHOLD = 0.5


class ConfigError(ValueError):
    pass


class ReferenceMismatchError(ValueError):
    pass


class TallyError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    backends: tuple[BackendConfig, ...]
    experiment_seed: int
    questions: tuple[str, ...] = ()
    panel: str | None = None
    generate_panel: int | None = None
    output_dir: str = "out"
    reference: str | None = None
    questions_file: str | None = None
    max_workers: int | None = None
    parse_failure_threshold: float = DEFAULT_PARSE_FAILURE_THRESHOLD
    reask_on_parse_failure: bool = False

    def __post_init__(self) -> None:
        if not self.backends:
            raise ConfigError("at least one backend is required")
        labels = [b.backend_id for b in self.backends]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"model labels must be unique: {labels}")
        if (self.panel is None) == (self.generate_panel is None):
            raise ConfigError("give exactly one of 'panel' (file) or 'generate_panel' (size)")
        if self.generate_panel is not None and self.generate_panel < 1:
            raise ConfigError("generate_panel must be positive")
        if not 0 < self.parse_failure_threshold <= 1:
            raise ConfigError("parse_failure_threshold must lie in (0, 1]")
        if self.max_workers is not None and self.max_workers < 1:
            raise ConfigError("max_workers must be >= 1")
        registry = self.question_registry()
        unknown = [q for q in self.questions if q not in registry]
        if unknown:
            raise ConfigError(f"unregistered questions: {unknown}")

    def question_registry(self) -> dict[str, QuestionSpec]:
        if self.questions_file:
            return load_questions(self.questions_file)
        return bundled_questions()

    def selected_questions(self) -> list[QuestionSpec]:
        registry = self.question_registry()
        ids = self.questions or tuple(registry)
        return [registry[q] for q in ids]

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ExperimentConfig:
        data = dict(data)
        seed = data.get("experiment_seed", data.get("seed"))
        if seed is None:
            raise ConfigError("experiment_seed is required")
        seed = int(seed)
        backends = []
        for raw in data.get("backends", []):
            raw = dict(raw)
            if raw.get("kind") == "mock":
                raw.setdefault("seed", seed)
                raw.setdefault("weight_table", "default")
            try:
                backends.append(BackendConfig.from_dict(raw))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid backend config {raw}: {exc}") from exc
        known = set(cls.__dataclass_fields__) | {"seed"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(
            backends=tuple(backends),
            experiment_seed=seed,
            questions=tuple(data.get("questions", ())),
            panel=data.get("panel"),
            generate_panel=data.get("generate_panel"),
            output_dir=data.get("output_dir", "out"),
            reference=data.get("reference"),
            questions_file=data.get("questions_file"),
            max_workers=data.get("max_workers"),
            parse_failure_threshold=float(
                data.get("parse_failure_threshold", DEFAULT_PARSE_FAILURE_THRESHOLD)
            ),
            reask_on_parse_failure=bool(data.get("reask_on_parse_failure", False)),
        )

    @classmethod
    def from_file(cls, path: str | Path, **overrides: Any) -> ExperimentConfig:
        """Load a TOML or JSON config; relative paths resolve against the file.

        ``overrides`` replace top-level keys after path resolution.
        """
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if path.suffix.lower() == ".toml":
            data = tomllib.loads(text)
        else:
            try:
                data = json.loads(text)
            except json.JSONDecodeError:
                data = tomllib.loads(text)
        base = path.parent
        for key in ("panel", "reference", "questions_file"):
            if data.get(key):
                data[key] = str((base / data[key]).resolve())
        if data.get("output_dir"):
            data["output_dir"] = str((base / data["output_dir"]).resolve())
        for b in data.get("backends", []):
            for key in ("transcript", "weight_table"):
                value = b.get(key)
                if isinstance(value, str) and value not in ("default", "uniform"):
                    b[key] = str((base / value).resolve())
        data.update(overrides)
        return cls.from_dict(data)

    def snapshot(self) -> dict[str, Any]:
        """Everything needed to re-run; the output directory is left out."""
        return {
            "experiment_seed": self.experiment_seed,
            "questions": [q.question_id for q in self.selected_questions()],
            "panel": self.panel,
            "generate_panel": self.generate_panel,
            "reference": self.reference,
            "questions_file": self.questions_file,
            "parse_failure_threshold": self.parse_failure_threshold,
            "reask_on_parse_failure": self.reask_on_parse_failure,
            "backends": [_backend_snapshot(b) for b in self.backends],
        }


def _backend_snapshot(config: BackendConfig) -> dict[str, Any]:
    data = config.to_dict()
    # Concurrency settings cannot change results, so they stay out of the
    # snapshot; serial and parallel runs then serialise identically.
    data.pop("max_in_flight", None)
    return data


@dataclass
class ExperimentResult:
    distributions: dict[str, dict[str, ResponseDistribution]]
    panel_size: int
    config: dict[str, Any]
    template_version: str = TEMPLATE_VERSION
    aborted: dict[str, dict[str, str]] = field(default_factory=dict)
    transcripts_path: str | None = None
    transcript_counts: dict[str, int] = field(default_factory=dict)
    panel_digest: str = ""
    report: MetricReport | None = None

    @property
    def models(self) -> list[str]:
        return list(self.distributions)

    def to_dict(self) -> dict[str, Any]:
        return {
            "template_version": self.template_version,
            "panel_size": self.panel_size,
            "panel_digest": self.panel_digest,
            "config": self.config,
            "transcripts_path": self.transcripts_path,
            "transcript_counts": self.transcript_counts,
            "aborted": self.aborted,
            "distributions": {
                model: {qid: d.to_dict() for qid, d in by_q.items()}
                for model, by_q in self.distributions.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ExperimentResult:
        return cls(
            distributions={
                model: {
                    qid: ResponseDistribution(
                        d["question_id"], tuple(d["proportions"]), d["n_samples"], d["excluded_count"]
                    )
                    for qid, d in by_q.items()
                }
                for model, by_q in data["distributions"].items()
            },
            panel_size=data["panel_size"],
            config=data.get("config", {}),
            template_version=data.get("template_version", TEMPLATE_VERSION),
            aborted=data.get("aborted", {}),
            transcripts_path=data.get("transcripts_path"),
            transcript_counts=data.get("transcript_counts", {}),
            panel_digest=data.get("panel_digest", ""),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> ExperimentResult:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def distributions_csv(self, questions: Mapping[str, QuestionSpec] | None = None) -> str:
        questions = questions if questions is not None else bundled_questions()
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model", "question_id", "option_index", "option", "proportion", "n_samples", "excluded"])
        for model, by_q in self.distributions.items():
            for qid, dist in by_q.items():
                labels = questions[qid].table_labels if qid in questions else ()
                for i, p in enumerate(dist.proportions, start=1):
                    label = labels[i - 1] if labels else ""
                    writer.writerow([model, qid, i, label, f"{p:.10g}", dist.n_samples, dist.excluded_count])
        return buf.getvalue()


# ---------------------------------------------------------------------------


def generate_panel(n: int, seed: int) -> list[Profile]:
    """Random profiles drawn uniformly from the declared vocabularies."""
    rng = random.Random(seed)
    age_bands = ("18-24", "25-29", "30-39", "40-49", "50-59", "60-69", "70-79", "80+")
    width = len(str(n))
    profiles = []
    for i in range(n):
        profiles.append(
            Profile(
                profile_id=f"p{i + 1:0{width}d}",
                voting_intention=rng.choice(VOTING_INTENTIONS),
                ethnic_group=rng.choice(ETHNIC_GROUPS),
                gender=rng.choice(GENDERS),
                marital_status=rng.choice(MARITAL_STATUSES),
                highest_qualification=rng.choice(QUALIFICATIONS),
                num_children=rng.choice((0, 0, 1, 1, 2, 2, 3, 4)),
                region=rng.choice(REGIONS),
                living_area=rng.choice(LIVING_AREAS),
                age_group=rng.choice(age_bands),
                profession=rng.choice(PROFESSIONS),
                monthly_income_gbp=float(round(rng.lognormvariate(7.8, 0.5))),
            )
        )
    return profiles


def panel_digest(profiles: Sequence[Profile]) -> str:
    h = hashlib.sha256()
    for p in profiles:
        h.update(json.dumps(p.to_dict(), sort_keys=True).encode())
        h.update(b"\n")
    return h.hexdigest()


def load_panel(config: ExperimentConfig) -> list[Profile]:
    if config.panel is not None:
        return read_profiles(config.panel)
    return generate_panel(config.generate_panel, config.experiment_seed)


def tally_distribution(answers: Sequence[Any], question: QuestionSpec) -> ResponseDistribution:
    """Proportions over successful answers; anything that is not an option
    index (a ParseError, None, a failure string) counts as excluded."""
    n_options = len(question.options)
    counts = [0] * n_options
    excluded = 0
    for a in answers:
        if isinstance(a, int) and not isinstance(a, bool) and 1 <= a <= n_options:
            counts[a - 1] += 1
        else:
            excluded += 1
    n = sum(counts)
    if n == 0:
        raise TallyError(f"{question.question_id}: no successful answers to tally")
    return ResponseDistribution(
        question.question_id, tuple(c / n for c in counts), n_samples=n, excluded_count=excluded
    )


def _ask_one(
    backend: Backend, pair: PromptPair, question: QuestionSpec, reask: bool
) -> Transcript:
    reply = backend.ask_detailed(pair)
    attempts, latency, user_text = reply.attempts, reply.latency_ms, pair.user_text
    parsed, failure = None, None
    try:
        parsed = parse_response(reply.text, question)
    except ParseError as exc:
        failure = exc.kind
        if reask:
            retry_pair = replace(pair, user_text=pair.user_text + REASK_SUFFIX)
            reply = backend.ask_detailed(retry_pair)
            attempts += reply.attempts
            latency += reply.latency_ms
            user_text = retry_pair.user_text
            try:
                parsed, failure = parse_response(reply.text, question), None
            except ParseError as exc2:
                failure = exc2.kind
    return Transcript(
        profile_id=pair.profile_id,
        question_id=pair.question_id,
        system_text=pair.system_text,
        user_text=user_text,
        raw_reply=reply.text,
        parsed_option=parsed,
        failure=failure,
        attempts=attempts,
        latency_ms=latency,
        backend_id=backend.backend_id,
        model=backend.model,
        temperature=backend.temperature,
    )


def _collect(
    backend: Backend,
    work: Sequence[tuple[PromptPair, QuestionSpec]],
    workers: int,
    reask: bool,
) -> dict[tuple[str, str], Transcript]:
    results: dict[tuple[str, str], Transcript] = {}
    if workers == 1:
        for pair, question in work:
            results[(pair.profile_id, pair.question_id)] = _ask_one(backend, pair, question, reask)
        return results
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {
            pool.submit(_ask_one, backend, pair, question, reask): (pair.profile_id, pair.question_id)
            for pair, question in work
        }
        done, pending = wait(futures, return_when=FIRST_EXCEPTION)
        for fut in pending:
            fut.cancel()
        for fut in done:
            exc = fut.exception()
            if exc is not None:
                raise exc
        for fut, key in futures.items():
            results[key] = fut.result()
    return results


def run_experiment(
    config: ExperimentConfig,
    write: bool = True,
    backends: Mapping[str, Backend] | None = None,
) -> ExperimentResult:
    """Ask every (profile, question) pair of every backend and tally the answers.

    ``backends`` lets callers inject ready-made backends by label (tests,
    custom clients); otherwise they are built from the config. Files are
    written only after all work has finished.
    """
    questions = config.selected_questions()
    registry = config.question_registry()
    profiles = load_panel(config)
    if not profiles:
        raise ConfigError("panel is empty")
    by_id = {p.profile_id: p for p in profiles}
    if len(by_id) != len(profiles):
        raise ConfigError("profile ids in the panel must be unique")
    work = [
        (build_prompt_pair(p, q, registry), q) for p in profiles for q in questions
    ]

    distributions: dict[str, dict[str, ResponseDistribution]] = {}
    aborted: dict[str, dict[str, str]] = {}
    counts: dict[str, int] = {}
    all_transcripts: list[Transcript] = []
    for bconf in config.backends:
        label = bconf.backend_id
        if backends and label in backends:
            backend = backends[label]
        else:
            backend = make_backend(bconf, profiles=by_id, questions=registry)
        try:
            workers = config.max_workers or backend.max_in_flight
            results = _collect(backend, work, workers, config.reask_on_parse_failure)
        finally:
            backend.close()

        ordered = [results[(pair.profile_id, pair.question_id)] for pair, _ in work]
        all_transcripts.extend(ordered)
        counts[label] = len(ordered)
        distributions[label] = {}
        for q in questions:
            answers = [
                t.parsed_option if t.parsed_option is not None else t.failure
                for t in ordered
                if t.question_id == q.question_id
            ]
            failures = sum(1 for a in answers if not isinstance(a, int))
            share = failures / len(answers)
            if share > config.parse_failure_threshold:
                msg = (
                    f"{failures}/{len(answers)} replies unparseable ({share:.0%} > "
                    f"{config.parse_failure_threshold:.0%} threshold); question aborted"
                )
                logger.error("%s / %s: %s", label, q.question_id, msg)
                aborted.setdefault(label, {})[q.question_id] = msg
                continue
            distributions[label][q.question_id] = tally_distribution(answers, q)

    result = ExperimentResult(
        distributions=distributions,
        panel_size=len(profiles),
        config=config.snapshot(),
        aborted=aborted,
        transcripts_path="transcripts.jsonl",
        transcript_counts=counts,
        panel_digest=panel_digest(profiles),
    )
    if any(distributions.values()):
        reference = load_reference_dataset(config.reference, registry)
        result.report = compare_to_reference(result, reference, registry)
    if write:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        transcripts = out / "transcripts.jsonl"
        transcripts.unlink(missing_ok=True)
        TranscriptWriter(transcripts).extend(all_transcripts)
        (out / "result.json").write_text(result.to_json(), encoding="utf-8")
        (out / "distributions.csv").write_text(result.distributions_csv(registry), encoding="utf-8")
        if result.report is not None:
            (out / "report.json").write_text(result.report.to_json(), encoding="utf-8")
    return result


def check_reference_labels(question: QuestionSpec, labels: Sequence[str]) -> None:
    labels = tuple(labels)
    if labels in (question.table_labels, question.labels):
        return
    for candidates in (question.table_labels, question.labels):
        if sorted(labels) == sorted(candidates):
            raise ReferenceMismatchError(
                f"{question.question_id}: reference option order {list(labels)} differs from "
                f"question order {list(candidates)}"
            )
    raise ReferenceMismatchError(
        f"{question.question_id}: reference options {list(labels)} do not match "
        f"question options {list(question.table_labels)}"
    )


def compare_to_reference(
    result: ExperimentResult,
    reference: ReferenceDataset,
    questions: Mapping[str, QuestionSpec] | None = None,
    **metric_options: Any,
) -> MetricReport:
    """Score every (model, question) distribution against the reference."""
    questions = questions if questions is not None else bundled_questions()
    rows = []
    synthetic: dict[str, dict[str, list[float]]] = {}
    used_refs: dict[str, list[float]] = {}
    for model, by_q in result.distributions.items():
        synthetic[model] = {}
        for qid, dist in by_q.items():
            if qid not in reference:
                raise ReferenceMismatchError(f"reference dataset has no entry for question {qid!r}")
            if qid not in questions:
                raise ReferenceMismatchError(f"question {qid!r} is not registered")
            question = questions[qid]
            entry = reference[qid]
            check_reference_labels(question, entry.labels)
            dist.check_question(question)
            ref = entry.distribution.proportions
            rows.append(evaluate_question(dist, ref, question_id=qid, model=model, **metric_options))
            synthetic[model][qid] = list(dist.proportions)
            used_refs[qid] = list(ref)
    report = MetricReport.from_rows(rows, reference=used_refs, synthetic=synthetic)
    report.metadata["option_labels"] = {qid: list(questions[qid].table_labels) for qid in used_refs}
    report.metadata["question_titles"] = {
        qid: questions[qid].title or qid for qid in used_refs
    }
    report.metadata["renormalized_reference"] = sorted(
        qid for qid in used_refs if reference[qid].renormalized
    )
    if result.aborted:
        report.metadata["aborted"] = result.aborted
    return report
