"""Pluggable answer sources and reply parsing."""
from .backends import (
    Backend,
    BackendConfig,
    BackendConstructionError,
    BackendError,
    BackendHTTPError,
    BackendTimeout,
    HttpBackend,
    MockBackend,
    RecordingBackend,
    ReplayBackend,
    ReplayMiss,
    Reply,
    RetriesExhausted,
    WeightTable,
    default_weight_tables,
    load_weight_tables,
    make_backend,
    mock_answer,
    record_and_replay,
    uniform_weight_table,
)
from .parsing import Ambiguous, NoMatch, ParseError, normalize_text, parse_response
from .transcripts import Transcript, TranscriptCorruptError, TranscriptWriter, read_transcripts

__all__ = [
    "Ambiguous",
    "Backend",
    "BackendConfig",
    "BackendConstructionError",
    "BackendError",
    "BackendHTTPError",
    "BackendTimeout",
    "HttpBackend",
    "MockBackend",
    "NoMatch",
    "ParseError",
    "RecordingBackend",
    "ReplayBackend",
    "ReplayMiss",
    "Reply",
    "RetriesExhausted",
    "Transcript",
    "TranscriptCorruptError",
    "TranscriptWriter",
    "WeightTable",
    "default_weight_tables",
    "load_weight_tables",
    "make_backend",
    "mock_answer",
    "normalize_text",
    "parse_response",
    "read_transcripts",
    "record_and_replay",
    "uniform_weight_table",
]
