"""Synthetic entity pronunciations via carrier-sentence injection.

A foreign-language carrier sentence with one slot gets the English entity
name spliced in, a voice-cloning TTS engine renders it, and the entity's
audio span is cut out using word timings. Extracted clips wait for human
review; only accepted clips enter training manifests.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import logging
import random
import re
import threading
from collections.abc import Sequence
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Protocol

from . import audio
from .corpus import EntitySpec
from .errors import StateTransitionError, ValidationError
from .metrics import normalize_text

log = logging.getLogger(__name__)

SLOT = "{entity}"

# Frequent English function words; a carrier containing any of these is not
# "predominantly non-English" and would degrade clone quality.
_ENGLISH_MARKERS = {"the", "is", "am", "are", "i'm", "im", "my", "name", "on", "at", "street"}

DEFAULT_CLIP_BOUNDS_S = (0.2, 3.0)
DEFAULT_PADDING_S = 0.05


@dataclass(frozen=True)
class CarrierTemplate:
    language: str
    text: str

    def __post_init__(self) -> None:
        if self.text.count(SLOT) != 1:
            raise ValidationError(f"carrier {self.text!r}: expected exactly one {SLOT} slot")
        stripped = self.text.replace(SLOT, " ")
        words = {w.strip(".,!?…").lower() for w in stripped.split()}
        leaked = sorted(words & _ENGLISH_MARKERS)
        if leaked:
            raise ValidationError(
                f"carrier {self.text!r} contains English words {leaked}; "
                "only the injected entity may be English"
            )


@dataclass(frozen=True)
class VoiceSample:
    speaker_ref: str
    language: str
    audio_ref: str
    duration_s: float


class SampleStatus(str, enum.Enum):
    GENERATED = "GENERATED"
    EXTRACTED = "EXTRACTED"
    PENDING_REVIEW = "PENDING_REVIEW"
    ACCEPTED = "ACCEPTED"
    REJECTED = "REJECTED"
    FAILED = "FAILED"


_ALLOWED_TRANSITIONS: dict[SampleStatus, set[SampleStatus]] = {
    SampleStatus.GENERATED: {SampleStatus.EXTRACTED, SampleStatus.FAILED},
    SampleStatus.EXTRACTED: {SampleStatus.PENDING_REVIEW, SampleStatus.FAILED},
    SampleStatus.PENDING_REVIEW: {SampleStatus.ACCEPTED, SampleStatus.REJECTED},
    SampleStatus.ACCEPTED: {SampleStatus.ACCEPTED, SampleStatus.REJECTED},
    SampleStatus.REJECTED: {SampleStatus.ACCEPTED, SampleStatus.REJECTED},
    SampleStatus.FAILED: set(),
}


@dataclass(frozen=True)
class SynthSample:
    id: str
    language: str
    entity_id: str
    target_text: str
    carrier_text: str
    speaker_ref: str
    full_audio_ref: str
    duration_s: float
    status: SampleStatus
    engine_version: str
    seed: int
    segment_start_s: float | None = None
    segment_end_s: float | None = None
    clip_audio_ref: str | None = None
    failure_reason: str | None = None
    word_timings: tuple[tuple[str, float, float], ...] = ()

    def __post_init__(self) -> None:
        if self.status == SampleStatus.GENERATED and self.clip_audio_ref is not None:
            raise ValidationError(f"sample {self.id}: GENERATED samples have no clip")
        if self.segment_start_s is not None and self.segment_end_s is not None:
            if not 0 <= self.segment_start_s < self.segment_end_s <= self.duration_s + 1e-9:
                raise ValidationError(
                    f"sample {self.id}: segment [{self.segment_start_s}, {self.segment_end_s}] "
                    f"outside audio of {self.duration_s}s"
                )

    def advanced(self, status: SampleStatus, **changes) -> "SynthSample":
        if status not in _ALLOWED_TRANSITIONS[self.status]:
            raise StateTransitionError(
                f"sample {self.id}: cannot move {self.status.value} -> {status.value}"
            )
        return replace(self, status=status, **changes)


@dataclass(frozen=True)
class WordSpan:
    word: str
    start_s: float
    end_s: float


class TtsEngine(Protocol):
    version: str
    supported_languages: frozenset[str]

    def synthesize(
        self, reference_audio: Path | None, language: str, text: str, seed: int
    ) -> tuple[bytes, int, tuple[WordSpan, ...] | None]:
        """Return (wav bytes, sample rate, optional word timings)."""
        ...


class Aligner(Protocol):
    def align(self, sample: SynthSample, audio_path: Path) -> tuple[WordSpan, ...]:
        ...


# 16 cloning languages, English deliberately absent; overridable in config.
DEFAULT_LANGUAGES = (
    "es", "fr", "de", "it", "pt", "pl", "tr", "ru",
    "nl", "cs", "ar", "zh", "hu", "ko", "ja", "hi",
)


class MockTtsEngine:
    """Deterministic offline engine: seeded noise audio plus word timings.

    Word durations are a stable hash of (word, language, seed), so the same
    inputs always produce byte-identical audio and identical timings.
    """

    version = "mock-tts/1"

    def __init__(self, languages: Sequence[str] = DEFAULT_LANGUAGES, sample_rate_hz: int = 16000) -> None:
        self.supported_languages = frozenset(languages)
        self.sample_rate_hz = sample_rate_hz
        self.invocations = 0

    def synthesize(
        self, reference_audio: Path | None, language: str, text: str, seed: int
    ) -> tuple[bytes, int, tuple[WordSpan, ...] | None]:
        if language not in self.supported_languages:
            raise ValidationError(f"language {language!r} not supported by {self.version}")
        self.invocations += 1
        words = text.split()
        spans: list[WordSpan] = []
        cursor = 0.15
        for word in words:
            digest = hashlib.sha256(f"{word}|{language}|{seed}".encode("utf-8")).digest()
            duration = 0.18 + (digest[0] / 255.0) * 0.5
            spans.append(WordSpan(word=word, start_s=round(cursor, 4), end_s=round(cursor + duration, 4)))
            cursor += duration + 0.08
        total = cursor + 0.15
        tone_seed = int.from_bytes(
            hashlib.sha256(f"{text}|{language}|{seed}".encode("utf-8")).digest()[:4], "big"
        )
        samples = audio.deterministic_tone(total, self.sample_rate_hz, tone_seed)
        return audio.wav_bytes(samples, self.sample_rate_hz), self.sample_rate_hz, tuple(spans)


class RecordedTimingsAligner:
    """Word timings captured from the engine at synthesis time."""

    def align(self, sample: SynthSample, audio_path: Path) -> tuple[WordSpan, ...]:
        return tuple(WordSpan(w, s, e) for w, s, e in sample.word_timings)


class UniformAligner:
    """External-alignment stand-in: splits the audio evenly across words."""

    def align(self, sample: SynthSample, audio_path: Path) -> tuple[WordSpan, ...]:
        words = sample.carrier_text.split()
        duration = audio.wav_duration_s(audio_path)
        step = duration / max(1, len(words))
        return tuple(
            WordSpan(word=w, start_s=round(i * step, 4), end_s=round((i + 1) * step, 4))
            for i, w in enumerate(words)
        )


class SampleStore:
    """Directory of audio renders, clips, and an append-only metadata log.

    The log holds the full history of every sample; the latest record per
    id is the current state. Writes are serialized per store.
    """

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        (self.root / "audio").mkdir(parents=True, exist_ok=True)
        (self.root / "clips").mkdir(parents=True, exist_ok=True)
        self.log_path = self.root / "samples.jsonl"
        self._lock = threading.Lock()
        self._samples: dict[str, SynthSample] = {}
        self._order: list[str] = []
        if self.log_path.exists():
            with self.log_path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        sample = _sample_from_json(json.loads(line))
                        if sample.id not in self._samples:
                            self._order.append(sample.id)
                        self._samples[sample.id] = sample

    def put(self, sample: SynthSample) -> None:
        with self._lock:
            if sample.id not in self._samples:
                self._order.append(sample.id)
            self._samples[sample.id] = sample
            with self.log_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(_sample_to_json(sample), ensure_ascii=False) + "\n")
                fh.flush()

    def get(self, sample_id: str) -> SynthSample:
        return self._samples[sample_id]

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._samples

    def all(self) -> list[SynthSample]:
        return [self._samples[sid] for sid in self._order]

    def with_status(self, *statuses: SampleStatus) -> list[SynthSample]:
        wanted = set(statuses)
        return [s for s in self.all() if s.status in wanted]

    def audio_path(self, sample: SynthSample) -> Path:
        return self.root / sample.full_audio_ref

    def clip_path(self, sample: SynthSample) -> Path | None:
        if sample.clip_audio_ref is None:
            return None
        return self.root / sample.clip_audio_ref


def _sample_to_json(sample: SynthSample) -> dict:
    return {
        "id": sample.id,
        "language": sample.language,
        "entity_id": sample.entity_id,
        "target_text": sample.target_text,
        "carrier_text": sample.carrier_text,
        "speaker_ref": sample.speaker_ref,
        "full_audio_ref": sample.full_audio_ref,
        "duration_s": sample.duration_s,
        "status": sample.status.value,
        "engine_version": sample.engine_version,
        "seed": sample.seed,
        "segment_start_s": sample.segment_start_s,
        "segment_end_s": sample.segment_end_s,
        "clip_audio_ref": sample.clip_audio_ref,
        "failure_reason": sample.failure_reason,
        "word_timings": [list(t) for t in sample.word_timings],
    }


def _sample_from_json(row: dict) -> SynthSample:
    return SynthSample(
        id=row["id"],
        language=row["language"],
        entity_id=row["entity_id"],
        target_text=row["target_text"],
        carrier_text=row["carrier_text"],
        speaker_ref=row["speaker_ref"],
        full_audio_ref=row["full_audio_ref"],
        duration_s=row["duration_s"],
        status=SampleStatus(row["status"]),
        engine_version=row["engine_version"],
        seed=row["seed"],
        segment_start_s=row["segment_start_s"],
        segment_end_s=row["segment_end_s"],
        clip_audio_ref=row["clip_audio_ref"],
        failure_reason=row["failure_reason"],
        word_timings=tuple((w, s, e) for w, s, e in row.get("word_timings", ())),
    )


# --- operations ---

def load_carriers(path: str | Path) -> list[CarrierTemplate]:
    """Read a `language,text` CSV of carrier templates (header required)."""
    carriers = []
    with Path(path).open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames[:2]] != ["language", "text"]:
            raise ValidationError(f"{path}: expected header 'language,text'")
        for row in reader:
            carriers.append(CarrierTemplate(language=row["language"].strip(), text=row["text"]))
    return carriers


def load_voice_index(path: str | Path) -> list[VoiceSample]:
    """Read a `speaker_ref,language,audio_path,duration_s` CSV index."""
    voices = []
    with Path(path).open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["speaker_ref", "language", "audio_path", "duration_s"]
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames[:4]] != expected:
            raise ValidationError(f"{path}: expected header '{','.join(expected)}'")
        for row in reader:
            voices.append(
                VoiceSample(
                    speaker_ref=row["speaker_ref"],
                    language=row["language"].strip(),
                    audio_ref=row["audio_path"],
                    duration_s=float(row["duration_s"]),
                )
            )
    return voices


def select_speakers(
    index: Sequence[VoiceSample],
    language: str,
    k: int,
    seed: int,
    min_duration_s: float = 3.0,
    max_duration_s: float = 30.0,
) -> list[VoiceSample]:
    """Seeded sample of k distinct speakers of a language.

    Reference clips outside [min_duration_s, max_duration_s] are filtered
    out first; too-short references clone poorly and very long ones waste
    compute. One voice row per speaker (first by path) is considered.
    """
    by_speaker: dict[str, VoiceSample] = {}
    for voice in sorted(index, key=lambda v: (v.speaker_ref, v.audio_ref)):
        if voice.language != language:
            continue
        if not min_duration_s <= voice.duration_s <= max_duration_s:
            continue
        by_speaker.setdefault(voice.speaker_ref, voice)
    if len(by_speaker) < k:
        raise ValidationError(
            f"language {language!r}: need {k} speakers, index has {len(by_speaker)} after filtering"
        )
    chosen = random.Random(seed).sample(sorted(by_speaker), k)
    return [by_speaker[ref] for ref in chosen]


def build_carrier(template: CarrierTemplate, entity: EntitySpec, casing: str = "canonical") -> str:
    """Inject the entity into the carrier slot, with no English framing added.

    casing: "canonical" keeps the catalog's uppercase; "title" renders
    Washington-style title case.
    """
    name = entity.canonical_name if casing == "canonical" else entity.canonical_name.title()
    carrier = template.text.replace(SLOT, name, 1)
    occurrences = len(re.findall(re.escape(name), carrier))
    if occurrences != 1:
        raise ValidationError(
            f"carrier {carrier!r} contains entity {name!r} {occurrences} times; template must not repeat it"
        )
    if "i'm on" in carrier.lower():
        raise ValidationError(f"carrier {carrier!r} leaks the English framing phrase")
    return carrier


def _sample_id(language: str, entity_id: str, speaker_ref: str, carrier: str, seed: int) -> str:
    blob = "|".join([language, entity_id, speaker_ref, carrier, str(seed)])
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def synthesize(
    engine: TtsEngine,
    voice: VoiceSample,
    carrier: str,
    language: str,
    seed: int,
    store: SampleStore,
    entity: EntitySpec,
    voices_root: Path | None = None,
) -> SynthSample:
    """Render one carrier with a cloned voice and record the sample.

    Engine failures mark the sample FAILED (with the reason) instead of
    raising, so batch generation keeps going.
    """
    if language not in engine.supported_languages:
        raise ValidationError(f"language {language!r} not supported by engine {engine.version}")
    if voice.language != language:
        raise ValidationError(
            f"voice {voice.speaker_ref} speaks {voice.language!r}, carrier is {language!r}"
        )
    sample_id = _sample_id(language, entity.id, voice.speaker_ref, carrier, seed)
    audio_ref = f"audio/{sample_id}.wav"
    reference = None
    if voices_root is not None:
        reference = voices_root / voice.audio_ref
    try:
        wav, rate, timings = engine.synthesize(reference, language, carrier, seed)
    except Exception as exc:
        sample = SynthSample(
            id=sample_id,
            language=language,
            entity_id=entity.id,
            target_text=entity.canonical_name,
            carrier_text=carrier,
            speaker_ref=voice.speaker_ref,
            full_audio_ref=audio_ref,
            duration_s=0.001,
            status=SampleStatus.FAILED,
            engine_version=engine.version,
            seed=seed,
            failure_reason=f"ENGINE_FAILURE: {exc}",
        )
        store.put(sample)
        return sample
    path = store.root / audio_ref
    path.write_bytes(wav)
    sample = SynthSample(
        id=sample_id,
        language=language,
        entity_id=entity.id,
        target_text=entity.canonical_name,
        carrier_text=carrier,
        speaker_ref=voice.speaker_ref,
        full_audio_ref=audio_ref,
        duration_s=audio.wav_duration_s(path),
        status=SampleStatus.GENERATED,
        engine_version=engine.version,
        seed=seed,
        word_timings=tuple((t.word, t.start_s, t.end_s) for t in (timings or ())),
    )
    store.put(sample)
    return sample


def _find_entity_span(
    spans: Sequence[WordSpan], target_text: str
) -> tuple[WordSpan, WordSpan] | None:
    target = tuple(normalize_text(target_text).split())
    words = [normalize_text(s.word) for s in spans]
    n = len(target)
    for i in range(len(words) - n + 1):
        if tuple(words[i : i + n]) == target:
            return spans[i], spans[i + n - 1]
    return None


def extract_entity_segment(
    sample: SynthSample,
    aligner: Aligner,
    store: SampleStore,
    padding_s: float = DEFAULT_PADDING_S,
    bounds_s: tuple[float, float] = DEFAULT_CLIP_BOUNDS_S,
) -> SynthSample:
    """Cut the injected entity's audio span out of a GENERATED render.

    Multi-word entities span first word start to last word end; the clip is
    padded on both sides and clamped to the file. Misses and out-of-bounds
    clips leave the sample FAILED but reviewable.
    """
    if sample.status != SampleStatus.GENERATED:
        raise StateTransitionError(f"sample {sample.id} is {sample.status.value}, expected GENERATED")
    audio_path = store.audio_path(sample)
    spans = aligner.align(sample, audio_path)
    located = _find_entity_span(spans, sample.target_text)
    if located is None:
        failed = sample.advanced(SampleStatus.FAILED, failure_reason="ALIGNMENT_MISS")
        store.put(failed)
        return failed
    first, last = located
    start = max(0.0, first.start_s - padding_s)
    end = min(sample.duration_s, last.end_s + padding_s)
    min_s, max_s = bounds_s
    if not min_s <= end - start <= max_s:
        failed = sample.advanced(
            SampleStatus.FAILED,
            failure_reason=f"SEGMENT_OUT_OF_BOUNDS: {end - start:.3f}s not in [{min_s}, {max_s}]",
        )
        store.put(failed)
        return failed
    clip_ref = f"clips/{sample.id}.wav"
    audio.slice_wav(audio_path, store.root / clip_ref, start, end)
    extracted = sample.advanced(
        SampleStatus.EXTRACTED,
        segment_start_s=round(start, 4),
        segment_end_s=round(end, 4),
        clip_audio_ref=clip_ref,
    )
    store.put(extracted)
    return extracted


# --- dataset assembly ---

@dataclass(frozen=True)
class SynthManifestEntry:
    sample_id: str
    language: str
    entity_id: str
    clip_audio_ref: str
    target_text: str


@dataclass(frozen=True)
class SynthDatasetManifest:
    entries: tuple[SynthManifestEntry, ...]
    per_language: dict[str, int]
    per_entity: dict[str, int]
    truncated: bool


def assemble_dataset(samples: Sequence[SynthSample], target_size: int) -> SynthDatasetManifest:
    """Round-robin a balanced training manifest from ACCEPTED samples.

    Walks (language, entity) pairs in sorted order taking one sample per
    pair per round, so pair counts never differ by more than one while
    stock lasts. The training target for every entry is the entity's
    canonical name alone.
    """
    accepted = [s for s in samples if s.status == SampleStatus.ACCEPTED]
    if not accepted:
        raise ValidationError("no ACCEPTED samples to assemble")
    pools: dict[tuple[str, str], list[SynthSample]] = {}
    for sample in accepted:
        if sample.clip_audio_ref is None:
            raise ValidationError(f"accepted sample {sample.id} has no clip")
        pools.setdefault((sample.language, sample.entity_id), []).append(sample)
    for pool in pools.values():
        pool.sort(key=lambda s: s.id)
    if target_size > len(accepted):
        log.warning(
            "target_size %d exceeds %d accepted samples; using all of them",
            target_size,
            len(accepted),
        )
    entries: list[SynthManifestEntry] = []
    keys = sorted(pools)
    round_no = 0
    while len(entries) < target_size:
        took_any = False
        for key in keys:
            pool = pools[key]
            if round_no < len(pool) and len(entries) < target_size:
                sample = pool[round_no]
                entries.append(
                    SynthManifestEntry(
                        sample_id=sample.id,
                        language=sample.language,
                        entity_id=sample.entity_id,
                        clip_audio_ref=sample.clip_audio_ref,  # type: ignore[arg-type]
                        target_text=sample.target_text,
                    )
                )
                took_any = True
        if not took_any:
            break
        round_no += 1
    per_language: dict[str, int] = {}
    per_entity: dict[str, int] = {}
    for entry in entries:
        per_language[entry.language] = per_language.get(entry.language, 0) + 1
        per_entity[entry.entity_id] = per_entity.get(entry.entity_id, 0) + 1
    return SynthDatasetManifest(
        entries=tuple(entries),
        per_language=per_language,
        per_entity=per_entity,
        truncated=target_size > len(entries),
    )


def write_dataset_manifest(manifest: SynthDatasetManifest, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for entry in manifest.entries:
            fh.write(
                json.dumps(
                    {
                        "sample_id": entry.sample_id,
                        "language": entry.language,
                        "entity_id": entry.entity_id,
                        "clip_audio_ref": entry.clip_audio_ref,
                        "target_text": entry.target_text,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_dataset_manifest(path: str | Path) -> SynthDatasetManifest:
    entries = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                entries.append(
                    SynthManifestEntry(
                        sample_id=row["sample_id"],
                        language=row["language"],
                        entity_id=row["entity_id"],
                        clip_audio_ref=row["clip_audio_ref"],
                        target_text=row["target_text"],
                    )
                )
    per_language: dict[str, int] = {}
    per_entity: dict[str, int] = {}
    for entry in entries:
        per_language[entry.language] = per_language.get(entry.language, 0) + 1
        per_entity[entry.entity_id] = per_entity.get(entry.entity_id, 0) + 1
    return SynthDatasetManifest(
        entries=tuple(entries), per_language=per_language, per_entity=per_entity, truncated=False
    )
