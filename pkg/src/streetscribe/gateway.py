"""Uniform transcription front end: prompt conditions, caching, matrix runs.

The cache is an append-only JSONL store keyed by (recording, model, prompt
fingerprint). Entries are never overwritten; a code change that should
invalidate old transcripts gets a new cache namespace in the run config.
"""

from __future__ import annotations

import enum
import hashlib
import json
import threading
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from .backends import AsrBackend
from .corpus import CorpusManifest, Recording
from .errors import TransientBackendError, UnsupportedPromptError, ValidationError

_VOCABULARY_PROMPT = "The user is going to give you their location via one of the following addresses: "


class PromptVariant(str, enum.Enum):
    NONE = "NONE"
    SITUATIONAL = "SITUATIONAL"
    FULL_VOCABULARY = "FULL_VOCABULARY"


@dataclass(frozen=True)
class PromptCondition:
    variant: PromptVariant = PromptVariant.NONE
    text: str | None = None
    vocabulary: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.variant == PromptVariant.SITUATIONAL and not self.text:
            raise ValidationError("SITUATIONAL condition requires non-empty text")
        if self.variant == PromptVariant.FULL_VOCABULARY and not self.vocabulary:
            raise ValidationError("FULL_VOCABULARY condition requires a vocabulary")

    def prompt_text(self) -> str | None:
        if self.variant == PromptVariant.NONE:
            return None
        if self.variant == PromptVariant.SITUATIONAL:
            return self.text
        return _VOCABULARY_PROMPT + ", ".join(self.vocabulary) + "."

    def fingerprint(self) -> str:
        # Vocabulary order is part of the identity: prompt wording matters.
        blob = json.dumps(
            [self.variant.value, self.text, list(self.vocabulary)],
            ensure_ascii=False,
            separators=(",", ":"),
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class TranscriptRecord:
    recording_id: str
    model_id: str
    variant: str
    prompt_fingerprint: str
    transcript: str
    latency_ms: float
    from_cache: bool
    created_at: str

    def cache_key(self) -> tuple[str, str, str]:
        return (self.recording_id, self.model_id, self.prompt_fingerprint)


class TranscriptCache:
    """Append-only transcript store; safe to concatenate across runs."""

    FIELDS = ("recording_id", "model_id", "prompt_fingerprint", "variant",
              "transcript", "latency_ms", "created_at")

    def __init__(self, directory: str | Path, namespace: str = "v1") -> None:
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.namespace = namespace
        self.path = self.directory / f"transcripts-{namespace}.jsonl"
        self._lock = threading.Lock()
        self._entries: dict[tuple[str, str, str], dict] = {}
        if self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    row = json.loads(line)
                    key = (row["recording_id"], row["model_id"], row["prompt_fingerprint"])
                    # first entry wins across concatenated runs
                    self._entries.setdefault(key, row)

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: tuple[str, str, str]) -> TranscriptRecord | None:
        row = self._entries.get(key)
        if row is None:
            return None
        return TranscriptRecord(
            recording_id=row["recording_id"],
            model_id=row["model_id"],
            variant=row["variant"],
            prompt_fingerprint=row["prompt_fingerprint"],
            transcript=row["transcript"],
            latency_ms=row["latency_ms"],
            from_cache=True,
            created_at=row["created_at"],
        )

    def put(self, record: TranscriptRecord) -> None:
        key = record.cache_key()
        with self._lock:
            if key in self._entries:
                raise RuntimeError(f"cache entry {key} would be overwritten")
            row = {name: getattr(record, name) for name in self.FIELDS}
            self._entries[key] = row
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")
                fh.flush()


@dataclass(frozen=True)
class MatrixError:
    recording_id: str
    model_id: str
    variant: str
    message: str


@dataclass(frozen=True)
class MatrixResult:
    records: tuple[TranscriptRecord, ...]
    errors: tuple[MatrixError, ...]


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


class Gateway:
    """Caching, retrying front end over registered ASR backends."""

    def __init__(
        self,
        cache: TranscriptCache,
        max_attempts: int = 3,
        backoff_base_s: float = 0.2,
        sleeper: Callable[[float], None] = time.sleep,
        clock: Callable[[], str] = _utc_now,
    ) -> None:
        self.cache = cache
        self.max_attempts = max_attempts
        self.backoff_base_s = backoff_base_s
        self._sleeper = sleeper
        self._clock = clock
        self._key_locks: dict[tuple[str, str, str], threading.Lock] = {}
        self._registry_lock = threading.Lock()
        self._semaphores: dict[str, threading.BoundedSemaphore] = {}

    def _key_lock(self, key: tuple[str, str, str]) -> threading.Lock:
        with self._registry_lock:
            return self._key_locks.setdefault(key, threading.Lock())

    def _semaphore(self, backend: AsrBackend) -> threading.BoundedSemaphore:
        with self._registry_lock:
            if backend.descriptor.model_id not in self._semaphores:
                self._semaphores[backend.descriptor.model_id] = threading.BoundedSemaphore(
                    max(1, backend.concurrency)
                )
            return self._semaphores[backend.descriptor.model_id]

    def transcribe(
        self,
        recording: Recording,
        backend: AsrBackend,
        condition: PromptCondition,
        audio_root: Path | None = None,
    ) -> TranscriptRecord:
        """Serve from cache or invoke the backend exactly once for this key."""
        if condition.variant != PromptVariant.NONE and not backend.descriptor.supports_prompt:
            raise UnsupportedPromptError(
                f"backend {backend.descriptor.model_id} does not accept prompts"
            )
        key = (recording.id, backend.descriptor.model_id, condition.fingerprint())
        cached = self.cache.get(key)
        if cached is not None:
            return cached
        with self._key_lock(key):
            cached = self.cache.get(key)
            if cached is not None:
                return cached
            transcript, latency_ms = self._invoke(recording, backend, condition, audio_root)
            record = TranscriptRecord(
                recording_id=recording.id,
                model_id=backend.descriptor.model_id,
                variant=condition.variant.value,
                prompt_fingerprint=key[2],
                transcript=transcript,
                latency_ms=latency_ms,
                from_cache=False,
                created_at=self._clock(),
            )
            self.cache.put(record)
            return record

    def _invoke(
        self,
        recording: Recording,
        backend: AsrBackend,
        condition: PromptCondition,
        audio_root: Path | None,
    ) -> tuple[str, float]:
        audio = Path(recording.audio_ref)
        if audio_root is not None and not audio.is_absolute():
            audio = audio_root / audio
        last: TransientBackendError | None = None
        for attempt in range(self.max_attempts):
            if attempt:
                self._sleeper(self.backoff_base_s * 2 ** (attempt - 1))
            try:
                with self._semaphore(backend):
                    return backend.transcribe(
                        audio,
                        condition.prompt_text(),
                        recording_id=recording.id,
                    )
            except TransientBackendError as exc:
                last = exc
        assert last is not None
        raise last

    def run_matrix(
        self,
        manifest: CorpusManifest,
        backends: Sequence[AsrBackend],
        conditions: Sequence[PromptCondition],
    ) -> MatrixResult:
        """One record per (recording, backend, condition); failures collected.

        Partial failures do not stop the run; every failed triple becomes a
        MatrixError so records + errors always cover the full product.
        """
        records: list[TranscriptRecord] = []
        errors: list[MatrixError] = []
        for recording in manifest.recordings:
            for backend in backends:
                for condition in conditions:
                    try:
                        records.append(
                            self.transcribe(recording, backend, condition, audio_root=manifest.root)
                        )
                    except Exception as exc:
                        errors.append(
                            MatrixError(
                                recording_id=recording.id,
                                model_id=backend.descriptor.model_id,
                                variant=condition.variant.value,
                                message=str(exc),
                            )
                        )
        return MatrixResult(records=tuple(records), errors=tuple(errors))


def write_transcripts(records: Sequence[TranscriptRecord], path: str | Path) -> None:
    """Persist matrix output rows in documented field order."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(
                json.dumps(
                    {name: getattr(record, name) for name in TranscriptCache.FIELDS},
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_transcripts(path: str | Path) -> list[TranscriptRecord]:
    records = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            records.append(
                TranscriptRecord(
                    recording_id=row["recording_id"],
                    model_id=row["model_id"],
                    variant=row["variant"],
                    prompt_fingerprint=row["prompt_fingerprint"],
                    transcript=row["transcript"],
                    latency_ms=row["latency_ms"],
                    from_cache=True,
                    created_at=row["created_at"],
                )
            )
    return records
