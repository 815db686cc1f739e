from __future__ import annotations

import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_profile
from opinionsim.consistency import published_result
from opinionsim.orchestrator import (
    ConfigError,
    ExperimentConfig,
    ExperimentResult,
    ReferenceMismatchError,
    TallyError,
    compare_to_reference,
    generate_panel,
    run_experiment,
    tally_distribution,
)
from opinionsim.promptgen import REASK_SUFFIX
from opinionsim.respondent import (
    Ambiguous,
    MockBackend,
    NoMatch,
    Reply,
    Transcript,
    TranscriptWriter,
    read_transcripts,
    uniform_weight_table,
)
from opinionsim.survey_data import (
    ResponseDistribution,
    build_reference_dataset,
    bundled_questions,
    load_reference_dataset,
    write_profiles,
)

QUESTIONS = bundled_questions()


def mock_config(tmp_path, n=20, **kw):
    data = {
        "experiment_seed": 11,
        "generate_panel": n,
        "output_dir": str(tmp_path / "out"),
        "backends": [{"kind": "mock", "label": "mock-a"}, {"kind": "mock", "label": "mock-b", "seed": 99}],
    }
    data.update(kw)
    return ExperimentConfig.from_dict(data)


# --- config -----------------------------------------------------------------------


@pytest.mark.parametrize(
    "patch",
    [
        {"backends": []},
        {"backends": [{"kind": "mock", "label": "a"}, {"kind": "mock", "label": "a"}]},
        {"questions": ["pollution", "mystery"]},
        {"panel": "p.jsonl"},
        {"generate_panel": None},
        {"generate_panel": 0},
        {"parse_failure_threshold": 0},
        {"parse_failure_threshold": 1.5},
        {"max_workers": 0},
        {"colour": "blue"},
        {"backends": [{"kind": "http", "label": "h"}]},
    ],
)
def test_config_validation(tmp_path, patch):
    with pytest.raises(ConfigError):
        mock_config(tmp_path, **patch)


def test_config_requires_seed():
    with pytest.raises(ConfigError, match="seed"):
        ExperimentConfig.from_dict({"generate_panel": 3, "backends": [{"kind": "mock"}]})


def test_mock_backend_defaults_to_experiment_seed(tmp_path):
    config = mock_config(tmp_path)
    a, b = config.backends
    assert (a.seed, a.weight_table) == (11, "default")
    assert b.seed == 99
    assert [q.question_id for q in config.selected_questions()] == list(QUESTIONS)


def test_config_files_toml_and_json_agree(tmp_path):
    (tmp_path / "exp.toml").write_text(
        'experiment_seed = 5\ngenerate_panel = 4\noutput_dir = "results"\nquestions = ["pollution"]\n'
        '[[backends]]\nkind = "mock"\nlabel = "m"\n'
    )
    (tmp_path / "exp.json").write_text(
        json.dumps(
            {
                "experiment_seed": 5,
                "generate_panel": 4,
                "output_dir": "results",
                "questions": ["pollution"],
                "backends": [{"kind": "mock", "label": "m"}],
            }
        )
    )
    toml = ExperimentConfig.from_file(tmp_path / "exp.toml")
    js = ExperimentConfig.from_file(tmp_path / "exp.json")
    assert toml == js
    assert toml.output_dir == str((tmp_path / "results").resolve())
    assert ExperimentConfig.from_file(tmp_path / "exp.toml", experiment_seed=6).experiment_seed == 6


# --- tally --------------------------------------------------------------------------


def test_tally_examples():
    pollution = QUESTIONS["pollution"]
    d = tally_distribution([1, 2, 2, 2], pollution)
    assert d.proportions == (0.25, 0.75) and d.n_samples == 4 and d.excluded_count == 0
    d = tally_distribution([1, NoMatch("x", "no rule"), 1], pollution)
    assert d.proportions == (1.0, 0.0) and d.n_samples == 2 and d.excluded_count == 1
    with pytest.raises(TallyError):
        tally_distribution(["no_match", Ambiguous("x", (1, 2)), None], pollution)


@given(st.lists(st.one_of(st.integers(1, 5), st.sampled_from(["no_match", "ambiguous"])), min_size=1, max_size=60))
def test_tally_conservation(answers):
    question = QUESTIONS["lifestyle"]
    try:
        d = tally_distribution(answers, question)
    except TallyError:
        assert all(isinstance(a, str) for a in answers)
        return
    assert d.n_samples + d.excluded_count == len(answers)
    assert math.isclose(sum(d.proportions), 1.0, abs_tol=1e-12)


@settings(max_examples=30)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=40), st.randoms())
def test_tally_ignores_arrival_order(answers, rnd):
    shuffled = list(answers)
    rnd.shuffle(shuffled)
    question = QUESTIONS["lifestyle"]
    assert tally_distribution(shuffled, question) == tally_distribution(answers, question)


# --- run_experiment -------------------------------------------------------------------


def test_replay_three_profiles_matches_hand_tally(tmp_path):
    panel = [make_profile(f"p{i}") for i in range(3)]
    write_profiles(panel, tmp_path / "panel.jsonl")
    replies = ["Yes", "No", "no."]
    store = tmp_path / "t.jsonl"
    TranscriptWriter(store).extend(
        Transcript(p.profile_id, "pollution", "s", "u", r, 1, None, 1, 0.0, "rec") for p, r in zip(panel, replies)
    )
    config = ExperimentConfig.from_dict(
        {
            "experiment_seed": 1,
            "panel": str(tmp_path / "panel.jsonl"),
            "questions": ["pollution"],
            "output_dir": str(tmp_path / "out"),
            "backends": [{"kind": "replay", "label": "rp", "transcript": str(store)}],
        }
    )
    result = run_experiment(config)
    d = result.distributions["rp"]["pollution"]
    assert d.proportions == pytest.approx((1 / 3, 2 / 3)) and d.n_samples == 3
    written = read_transcripts(tmp_path / "out" / "transcripts.jsonl")
    assert [t.raw_reply for t in written] == replies


def test_mock_run_twice_is_byte_identical(tmp_path):
    names = ("result.json", "distributions.csv", "report.json", "transcripts.jsonl")
    run_experiment(mock_config(tmp_path, output_dir=str(tmp_path / "a")))
    run_experiment(mock_config(tmp_path, output_dir=str(tmp_path / "b")))
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_mock_parallelism_does_not_change_results(tmp_path):
    serial = run_experiment(mock_config(tmp_path, n=40, max_workers=1), write=False)
    parallel = run_experiment(mock_config(tmp_path, n=40, max_workers=16), write=False)
    assert serial.distributions == parallel.distributions
    assert serial.to_json() == parallel.to_json()


def test_conservation_and_audit_completeness(tmp_path):
    result = run_experiment(mock_config(tmp_path, n=25))
    transcripts = read_transcripts(tmp_path / "out" / "transcripts.jsonl")
    for model, by_q in result.distributions.items():
        total = 0
        for d in by_q.values():
            assert d.n_samples + d.excluded_count == result.panel_size
            total += d.n_samples + d.excluded_count
        assert total == result.transcript_counts[model]
        assert sum(1 for t in transcripts if t.backend_id == model) == total
    assert result.report is not None and len(result.report.rows) == 20


def test_result_file_round_trip(tmp_path):
    result = run_experiment(mock_config(tmp_path, n=10))
    loaded = ExperimentResult.from_file(tmp_path / "out" / "result.json")
    assert loaded.distributions == result.distributions
    assert loaded.to_json() == result.to_json()
    assert loaded.config == result.config


class Babbler(MockBackend):
    """Mock that waffles for some profiles unless re-asked."""

    def __init__(self, bad_ids, **kw):
        super().__init__(**kw)
        self.bad_ids = bad_ids

    def ask_detailed(self, pair):
        if pair.profile_id in self.bad_ids and not pair.user_text.endswith(REASK_SUFFIX):
            return Reply("Hard to say, really")
        return super().ask_detailed(pair)


def babbler(panel, bad):
    return Babbler(
        {p.profile_id for p in panel[:bad]},
        seed=1,
        weight_tables={"pollution": uniform_weight_table(QUESTIONS["pollution"])},
        profiles={p.profile_id: p for p in panel},
        backend_id="m",
    )


def parse_config(tmp_path, **kw):
    data = {
        "experiment_seed": 3,
        "generate_panel": 10,
        "questions": ["pollution"],
        "output_dir": str(tmp_path / "out"),
        "backends": [{"kind": "mock", "label": "m"}],
    }
    data.update(kw)
    return ExperimentConfig.from_dict(data)


def test_parse_failures_over_threshold_abort_question(tmp_path):
    panel = generate_panel(10, seed=3)
    result = run_experiment(parse_config(tmp_path), write=False, backends={"m": babbler(panel, 6)})
    assert "pollution" not in result.distributions["m"]
    assert "6/10" in result.aborted["m"]["pollution"]
    result = run_experiment(parse_config(tmp_path), write=False, backends={"m": babbler(panel, 4)})
    d = result.distributions["m"]["pollution"]
    assert (d.n_samples, d.excluded_count) == (6, 4)
    strict = parse_config(tmp_path, parse_failure_threshold=0.3)
    assert run_experiment(strict, write=False, backends={"m": babbler(panel, 4)}).aborted


def test_optional_reask_recovers(tmp_path):
    panel = generate_panel(10, seed=3)
    config = parse_config(tmp_path, reask_on_parse_failure=True)
    result = run_experiment(config, write=False, backends={"m": babbler(panel, 6)})
    d = result.distributions["m"]["pollution"]
    assert (d.n_samples, d.excluded_count) == (10, 0)


# --- compare_to_reference -----------------------------------------------------------------


def result_from(dists):
    return ExperimentResult(
        distributions={"m": dists}, panel_size=100, config={}, template_version="t", aborted={},
        transcripts_path="", transcript_counts={}, panel_digest="",
    )


def test_identical_distributions_score_perfectly():
    reference = load_reference_dataset()
    dists = {
        qid: ResponseDistribution(qid, entry.distribution.proportions, 100)
        for qid, entry in reference.entries.items()
    }
    report = compare_to_reference(result_from(dists), reference)
    assert len(report.rows) == 10
    for row in report.rows:
        assert row.chi_square == pytest.approx(0, abs=1e-9)
        assert row.cosine == pytest.approx(1, abs=1e-12)
        assert row.jaccard == pytest.approx(1, abs=1e-12)
        assert row.kl_divergence == pytest.approx(0, abs=1e-12)
        assert row.p_value == pytest.approx(1, abs=1e-9)
    assert report.metadata["renormalized_reference"] == ["env_group"]


def test_missing_reference_entry_names_question():
    reference = build_reference_dataset({"lifestyle": [5.74, 35.66, 40.45, 16.23, 1.91]})
    dists = {"pollution": ResponseDistribution("pollution", (0.5, 0.5), 10)}
    with pytest.raises(ReferenceMismatchError, match="pollution"):
        compare_to_reference(result_from(dists), reference)


def test_reordered_reference_options_are_rejected():
    from opinionsim.orchestrator import check_reference_labels

    question = QUESTIONS["pollution"]
    with pytest.raises(ReferenceMismatchError, match="order"):
        check_reference_labels(question, tuple(reversed(question.table_labels)))
    with pytest.raises(ReferenceMismatchError, match="do not match"):
        check_reference_labels(question, ("Aye", "Nay"))
    check_reference_labels(question, question.table_labels)


def test_published_model_columns_full_report():
    result = published_result("fine_tuned")
    report = compare_to_reference(result, load_reference_dataset())
    assert sorted(result.distributions) == ["GPT-4o", "GPT-4o mini", "GPT-4o1-preview"]
    assert len(report.rows) == 30
    assert len(report.aggregates) == 3
    for row in report.rows:
        assert row.chi_square >= 0 and row.kl_divergence >= 0
        assert 0 <= row.p_value <= 1
        assert -1e-12 <= row.cosine <= 1 + 1e-12
        assert 0 <= row.jaccard <= 1
