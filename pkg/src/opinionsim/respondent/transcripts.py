"""Append-only JSONL transcript store."""
from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Iterable


class TranscriptCorruptError(ValueError):
    """A store line that is not a valid transcript.

    ``entries`` holds everything read before the bad line so callers can
    keep using it.
    """

    def __init__(self, path: Path, line_number: int, detail: str, entries: list[Transcript]):
        self.path = path
        self.line_number = line_number
        self.entries = entries
        super().__init__(f"{path}: corrupt transcript at line {line_number}: {detail}")


@dataclass(frozen=True)
class Transcript:
    profile_id: str
    question_id: str
    system_text: str
    user_text: str
    raw_reply: str
    parsed_option: int | None
    failure: str | None
    attempts: int
    latency_ms: float
    backend_id: str
    model: str | None = None
    temperature: float | None = None

    def __post_init__(self) -> None:
        if (self.parsed_option is None) == (self.failure is None):
            raise ValueError("a transcript carries either a parsed option or a failure reason")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Transcript:
        return cls(**data)


class TranscriptWriter:
    """Serialises appends from concurrent workers through one lock."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def append(self, transcript: Transcript) -> None:
        line = transcript.to_json() + "\n"
        with self._lock, open(self.path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(line)

    def extend(self, transcripts: Iterable[Transcript]) -> None:
        with self._lock, open(self.path, "a", encoding="utf-8", newline="\n") as fh:
            for t in transcripts:
                fh.write(t.to_json() + "\n")


def read_transcripts(path: str | Path) -> list[Transcript]:
    path = Path(path)
    entries: list[Transcript] = []
    with open(path, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                entries.append(Transcript.from_dict(json.loads(line)))
            except (ValueError, TypeError) as exc:
                raise TranscriptCorruptError(path, line_number, str(exc), list(entries)) from exc
    return entries
