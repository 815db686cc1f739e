"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 backend/network failure,
3 consistency-check hard failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from .consistency import consistency_check
from .metrics import MetricReport
from .orchestrator import ExperimentConfig, ExperimentResult, compare_to_reference, run_experiment, tomllib
from .preprocess import PreprocessConfig, build_panel
from .promptgen import estimate_finetune_cost, export_finetune_dataset
from .report import emit_report, parse_formats
from .respondent import BackendError, read_transcripts
from .survey_data import (
    SurveySchema,
    bundled_questions,
    load_reference_dataset,
    load_survey_records,
    read_profiles,
    write_profiles,
    write_survey_records,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_BACKEND = 2
EXIT_CONSISTENCY = 3

logger = logging.getLogger("opinionsim")


def _read_structured(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".toml":
        return tomllib.loads(text)
    return json.loads(text)


def _schema(args: argparse.Namespace) -> SurveySchema:
    return SurveySchema.from_file(args.schema) if args.schema else SurveySchema.default()


def _out(args: argparse.Namespace, default: str = ".") -> Path:
    out = Path(getattr(args, "out", None) or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_ingest(args: argparse.Namespace) -> int:
    schema = _schema(args)
    records = load_survey_records(args.survey, schema)
    out = _out(args)
    write_survey_records(records, out / "records.csv", schema)
    sentinel_counts: dict[str, int] = {}
    for rec in records:
        for kind in rec.sentinels.values():
            sentinel_counts[kind] = sentinel_counts.get(kind, 0) + 1
    summary = {
        "source": str(args.survey),
        "rows": len(records),
        "sentinels": dict(sorted(sentinel_counts.items())),
        "schema": schema.to_dict(),
    }
    (out / "ingest_summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(f"ingested {len(records)} rows -> {out / 'records.csv'}")
    return EXIT_OK


def cmd_preprocess(args: argparse.Namespace) -> int:
    schema = _schema(args)
    data = _read_structured(args.config) if args.config else {}
    if args.seed is not None:
        data["seed"] = args.seed
    config = PreprocessConfig.from_dict(data)
    records = load_survey_records(args.records, schema)
    profiles, report = build_panel(records, config, schema)
    out = _out(args)
    write_profiles(profiles, out / "panel.jsonl")
    report.write(out / "panel_report.json")
    print(
        f"loaded {report.loaded}, dropped {report.dropped_invalid}, imputed {report.imputed_fields} fields, "
        f"removed {report.duplicates_removed} duplicates, added {report.oversampled_added} -> "
        f"{report.final_size} profiles"
    )
    return EXIT_OK


def _read_answers(path: str | Path) -> dict[tuple[str, str], str | int]:
    """Answers from a transcript store (.jsonl) or a profile_id,question_id,answer CSV."""
    path = Path(path)
    if path.suffix.lower() == ".jsonl":
        return {
            (t.profile_id, t.question_id): t.parsed_option
            for t in read_transcripts(path)
            if t.parsed_option is not None
        }
    answers: dict[tuple[str, str], str | int] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"profile_id", "question_id", "answer"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: answers file lacks columns {sorted(missing)}")
        for row in reader:
            raw = row["answer"].strip()
            answers[(row["profile_id"], row["question_id"])] = int(raw) if raw.isdigit() else raw
    return answers


def cmd_export_finetune(args: argparse.Namespace) -> int:
    panel = read_profiles(args.panel)
    answers = _read_answers(args.answers)
    out = _out(args)
    result = export_finetune_dataset(
        panel, answers, out, split=args.split, seed=args.seed or 0, questions=bundled_questions()
    )
    cost = estimate_finetune_cost(
        result.paths, price_per_1k_tokens=args.price, epochs=args.epochs, model=args.model
    )
    print(f"train {result.n_train} -> {result.train_path}")
    print(f"validation {result.n_validation} -> {result.validation_path}")
    print(
        f"estimated cost: {cost.tokens:.0f} tokens x {cost.epochs} epochs x "
        f"${cost.price_per_1k_tokens}/1K = ${cost.dollars:.2f} ({cost.method})"
    )
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    if not args.config:
        raise ValueError("simulate needs --config")
    overrides: dict[str, Any] = {}
    if args.seed is not None:
        overrides["experiment_seed"] = args.seed
    if args.out:
        overrides["output_dir"] = str(Path(args.out).resolve())
    if args.max_workers is not None:
        overrides["max_workers"] = args.max_workers
    config = ExperimentConfig.from_file(args.config, **overrides)
    result = run_experiment(config)
    out = Path(config.output_dir)
    formats = parse_formats(args.format) if args.format else ()
    if result.report is not None and formats:
        emit_report(result.report, result, formats, out)
    for model, by_q in result.aborted.items():
        for qid, msg in by_q.items():
            print(f"aborted {model} / {qid}: {msg}", file=sys.stderr)
    print(f"simulated {result.panel_size} profiles x {len(config.selected_questions())} questions "
          f"x {len(config.backends)} models -> {out / 'result.json'}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    result = ExperimentResult.from_file(args.result)
    reference = load_reference_dataset(args.reference)
    report = compare_to_reference(result, reference)
    out = _out(args)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    if args.format:
        emit_report(report, result, parse_formats(args.format), out)
    for agg in report.aggregates:
        print(
            f"{agg.model}: chi2 {agg.chi_square:.4f} p {agg.p_value:.4f} cos {agg.cosine:.4f} "
            f"jaccard {agg.jaccard:.4f} kl {agg.kl_divergence:.4f}"
        )
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    report = MetricReport.from_dict(json.loads(Path(args.report).read_text(encoding="utf-8")))
    written = emit_report(report, None, parse_formats(args.format), _out(args))
    for path in written:
        print(path)
    return EXIT_OK


def cmd_consistency_check(args: argparse.Namespace) -> int:
    result = consistency_check()
    for check in result.checks:
        print(check.line())
    if args.out:
        (_out(args) / "consistency.json").write_text(result.to_json(), encoding="utf-8")
    print(f"{len(result.checks)} checks: {len(result.hard_failures)} failed, {len(result.flagged)} flagged")
    return EXIT_OK if result.ok else EXIT_CONSISTENCY


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS lets the flags appear before or after the subcommand.
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="RNG seed (u64)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="TOML or JSON config file")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--format", default=argparse.SUPPRESS, help="report formats, e.g. csv,json,svg")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="opinionsim", parents=[common], description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="survey file -> validated records")
    p.add_argument("survey")
    p.add_argument("--schema", help="schema JSON (defaults to the profile attribute layout)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("preprocess", parents=[common], help="records -> panel + build report")
    p.add_argument("records")
    p.add_argument("--schema")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("export-finetune", parents=[common], help="panel + answers -> train/val JSONL")
    p.add_argument("--panel", required=True)
    p.add_argument("--answers", required=True, help="answers CSV or transcript JSONL")
    p.add_argument("--split", type=float, default=0.8)
    p.add_argument("--price", type=float, default=None, help="USD per 1K training tokens")
    p.add_argument("--model", default="gpt-3.5-turbo", help="price table entry")
    p.add_argument("--epochs", type=int, default=3)
    p.set_defaults(func=cmd_export_finetune)

    p = sub.add_parser("simulate", parents=[common], help="experiment config -> result")
    p.add_argument("--max-workers", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", parents=[common], help="result + reference -> metric report")
    p.add_argument("--result", required=True)
    p.add_argument("--reference", default=None, help="reference JSON (bundled expected column if omitted)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="metric report -> csv/json/svg")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("consistency-check", parents=[common], help="check bundled result tables")
    p.set_defaults(func=cmd_consistency_check)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("seed", "config", "out", "format", "verbose"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
