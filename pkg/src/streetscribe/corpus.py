"""Entity catalog and utterance corpus: types, manifest IO, queries.

Manifests are UTF-8 line-delimited records, one JSON object per line, each
carrying a "kind" field (entity / template / speaker / recording) so large
corpora stream without a whole-file parse. Audio paths are relative to the
manifest's directory.
"""

from __future__ import annotations

import csv
import enum
import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import IntegrityError, ManifestParseError, ValidationError
from .metrics import normalize_text

# One bracketed token, e.g. "[STREET NAME]" or "[X]".
_PLACEHOLDER_RE = re.compile(r"\[[^\[\]]+\]")


class LanguageGroup(str, enum.Enum):
    ENGLISH_ONLY = "ENGLISH_ONLY"
    MULTILINGUAL_WITH_ENGLISH = "MULTILINGUAL_WITH_ENGLISH"
    NON_ENGLISH = "NON_ENGLISH"


class Gender(str, enum.Enum):
    MALE = "male"
    FEMALE = "female"
    UNSPECIFIED = "unspecified"


def derive_language_group(primary_languages: list[str]) -> LanguageGroup:
    """Map a speaker's primary languages to their language group.

    Comparison is case-insensitive after trimming; "English" is the only
    distinguished language name.
    """
    if not primary_languages:
        raise ValidationError("primary_languages must be non-empty")
    names = {lang.strip().lower() for lang in primary_languages}
    if "english" not in names:
        return LanguageGroup.NON_ENGLISH
    if names == {"english"}:
        return LanguageGroup.ENGLISH_ONLY
    return LanguageGroup.MULTILINGUAL_WITH_ENGLISH


@dataclass(frozen=True)
class EntitySpec:
    """A canonical street name plus the alias spellings accepted as matches."""

    id: str
    canonical_name: str
    city: str
    suffix_class: str = ""
    aliases: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.canonical_name or self.canonical_name != self.canonical_name.strip():
            raise ValidationError(f"entity {self.id!r}: canonical_name must be non-empty and trimmed")
        if not normalize_text(self.canonical_name):
            raise ValidationError(f"entity {self.id!r}: canonical_name normalizes to nothing")
        seen: set[str] = set()
        for alias in self.aliases:
            if alias == self.canonical_name:
                raise ValidationError(f"entity {self.id!r}: alias {alias!r} equals canonical_name")
            norm = normalize_text(alias)
            if not norm:
                raise ValidationError(f"entity {self.id!r}: alias {alias!r} normalizes to nothing")
            if norm in seen:
                raise ValidationError(f"entity {self.id!r}: duplicate alias {alias!r} after normalization")
            seen.add(norm)

    def accepted_forms(self) -> tuple[str, ...]:
        return (self.canonical_name, *self.aliases)


@dataclass(frozen=True)
class UtteranceTemplate:
    """Carrier phrase with exactly one bracketed entity placeholder."""

    id: str
    text: str

    def __post_init__(self) -> None:
        count = len(_PLACEHOLDER_RE.findall(self.text))
        if count != 1:
            raise ValidationError(
                f"template {self.id!r}: expected exactly one [PLACEHOLDER], found {count}"
            )


@dataclass(frozen=True)
class Speaker:
    id: str
    gender: Gender
    age: int
    primary_languages: tuple[str, ...]
    language_group: LanguageGroup = field(init=False)

    def __post_init__(self) -> None:
        group = derive_language_group(list(self.primary_languages))
        object.__setattr__(self, "language_group", group)


@dataclass(frozen=True)
class Recording:
    id: str
    speaker_id: str
    entity_id: str
    template_id: str
    audio_ref: str
    duration_s: float
    sample_rate_hz: int

    def __post_init__(self) -> None:
        if self.duration_s <= 0:
            raise ValidationError(f"recording {self.id!r}: duration_s must be > 0")
        if self.sample_rate_hz <= 0:
            raise ValidationError(f"recording {self.id!r}: sample_rate_hz must be > 0")


@dataclass(frozen=True)
class CorpusManifest:
    entities: tuple[EntitySpec, ...]
    templates: tuple[UtteranceTemplate, ...]
    speakers: tuple[Speaker, ...]
    recordings: tuple[Recording, ...]
    root: Path | None = None

    def __post_init__(self) -> None:
        violations = _integrity_violations(self)
        if violations:
            raise IntegrityError(violations)

    def entity(self, entity_id: str) -> EntitySpec:
        return self._by_id("entities", entity_id)

    def template(self, template_id: str) -> UtteranceTemplate:
        return self._by_id("templates", template_id)

    def speaker(self, speaker_id: str) -> Speaker:
        return self._by_id("speakers", speaker_id)

    def recording(self, recording_id: str) -> Recording:
        return self._by_id("recordings", recording_id)

    def _by_id(self, collection: str, item_id: str):
        for item in getattr(self, collection):
            if item.id == item_id:
                return item
        raise KeyError(f"no {collection[:-1]} with id {item_id!r}")


def _integrity_violations(manifest: CorpusManifest) -> list[str]:
    violations: list[str] = []
    for name in ("entities", "templates", "speakers", "recordings"):
        seen: set[str] = set()
        for item in getattr(manifest, name):
            if item.id in seen:
                violations.append(f"duplicate {name[:-1]} id {item.id!r}")
            seen.add(item.id)
    entity_ids = {e.id for e in manifest.entities}
    template_ids = {t.id for t in manifest.templates}
    speaker_ids = {s.id for s in manifest.speakers}
    for rec in manifest.recordings:
        if rec.speaker_id not in speaker_ids:
            violations.append(f"recording {rec.id!r} references unknown speaker {rec.speaker_id!r}")
        if rec.entity_id not in entity_ids:
            violations.append(f"recording {rec.id!r} references unknown entity {rec.entity_id!r}")
        if rec.template_id not in template_ids:
            violations.append(f"recording {rec.id!r} references unknown template {rec.template_id!r}")
    return violations


def render_utterance(template: UtteranceTemplate, entity: EntitySpec) -> str:
    """Replace the template's placeholder with the entity's canonical name."""
    return _PLACEHOLDER_RE.sub(lambda _: entity.canonical_name, template.text, count=1)


# --- manifest IO ---

_KIND_FIELDS = {
    "entity": {"id", "canonical_name", "city"},
    "template": {"id", "text"},
    "speaker": {"id", "gender", "age", "primary_languages"},
    "recording": {"id", "speaker_id", "entity_id", "template_id", "audio_ref", "duration_s", "sample_rate_hz"},
}


def load_manifest(path: str | Path) -> CorpusManifest:
    """Parse a line-delimited manifest, validating every record.

    Raises ManifestParseError (with line number) on the first malformed
    record, and IntegrityError listing all dangling references and
    duplicate ids once the file parses.
    """
    path = Path(path)
    entities: list[EntitySpec] = []
    templates: list[UtteranceTemplate] = []
    speakers: list[Speaker] = []
    recordings: list[Recording] = []
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(f"invalid JSON: {exc.msg}", line_no) from exc
            if not isinstance(record, dict) or "kind" not in record:
                raise ManifestParseError("record must be an object with a 'kind' field", line_no)
            kind = record.pop("kind")
            if kind not in _KIND_FIELDS:
                raise ManifestParseError(f"unknown record kind {kind!r}", line_no)
            missing = _KIND_FIELDS[kind] - record.keys()
            if missing:
                raise ManifestParseError(f"{kind} record missing fields: {sorted(missing)}", line_no)
            try:
                if kind == "entity":
                    entities.append(
                        EntitySpec(
                            id=record["id"],
                            canonical_name=record["canonical_name"],
                            city=record["city"],
                            suffix_class=record.get("suffix_class", ""),
                            aliases=tuple(record.get("aliases", ())),
                        )
                    )
                elif kind == "template":
                    templates.append(UtteranceTemplate(id=record["id"], text=record["text"]))
                elif kind == "speaker":
                    speakers.append(
                        Speaker(
                            id=record["id"],
                            gender=Gender(record["gender"]),
                            age=int(record["age"]),
                            primary_languages=tuple(record["primary_languages"]),
                        )
                    )
                else:
                    recordings.append(
                        Recording(
                            id=record["id"],
                            speaker_id=record["speaker_id"],
                            entity_id=record["entity_id"],
                            template_id=record["template_id"],
                            audio_ref=record["audio_ref"],
                            duration_s=float(record["duration_s"]),
                            sample_rate_hz=int(record["sample_rate_hz"]),
                        )
                    )
            except (ValidationError, ValueError) as exc:
                raise ManifestParseError(str(exc), line_no) from exc
    return CorpusManifest(
        entities=tuple(entities),
        templates=tuple(templates),
        speakers=tuple(speakers),
        recordings=tuple(recordings),
        root=path.parent,
    )


def write_manifest(manifest: CorpusManifest, path: str | Path) -> None:
    """Serialize a manifest so load_manifest round-trips it exactly."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for entity in manifest.entities:
            fh.write(
                json.dumps(
                    {
                        "kind": "entity",
                        "id": entity.id,
                        "canonical_name": entity.canonical_name,
                        "city": entity.city,
                        "suffix_class": entity.suffix_class,
                        "aliases": list(entity.aliases),
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
        for template in manifest.templates:
            fh.write(json.dumps({"kind": "template", "id": template.id, "text": template.text}, ensure_ascii=False) + "\n")
        for speaker in manifest.speakers:
            fh.write(
                json.dumps(
                    {
                        "kind": "speaker",
                        "id": speaker.id,
                        "gender": speaker.gender.value,
                        "age": speaker.age,
                        "primary_languages": list(speaker.primary_languages),
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
        for rec in manifest.recordings:
            fh.write(
                json.dumps(
                    {
                        "kind": "recording",
                        "id": rec.id,
                        "speaker_id": rec.speaker_id,
                        "entity_id": rec.entity_id,
                        "template_id": rec.template_id,
                        "audio_ref": rec.audio_ref,
                        "duration_s": rec.duration_s,
                        "sample_rate_hz": rec.sample_rate_hz,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


# --- alias table ---

def load_alias_table(path: str | Path) -> list[tuple[str, str]]:
    """Read a two-column `canonical,alternative` CSV (header required)."""
    path = Path(path)
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:2]] != ["canonical", "alternative"]:
            raise ValidationError(f"{path}: expected header 'canonical,alternative'")
        rows = []
        for row in reader:
            if not row or not any(cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise ValidationError(f"{path}: row {row!r} needs two columns")
            rows.append((row[0], row[1]))
    return rows


def attach_aliases(entities: tuple[EntitySpec, ...], table: list[tuple[str, str]]) -> tuple[EntitySpec, ...]:
    """Attach each alias-table row to the single entity it names.

    A row matches an entity when either column normalizes to the entity's
    normalized canonical name; whichever spellings differ from the catalog
    canonical as raw strings become aliases. Rows matching zero or several
    entities are integrity errors, reported together.
    """
    by_norm: dict[str, list[EntitySpec]] = {}
    for entity in entities:
        by_norm.setdefault(normalize_text(entity.canonical_name), []).append(entity)
    extra: dict[str, list[str]] = {}
    problems: list[str] = []
    for canonical, alternative in table:
        targets = {e.id for col in (canonical, alternative) for e in by_norm.get(normalize_text(col), ())}
        if len(targets) != 1:
            problems.append(
                f"alias row ({canonical!r}, {alternative!r}) matches {len(targets)} entities"
            )
            continue
        (target_id,) = targets
        target = next(e for e in entities if e.id == target_id)
        for spelling in (canonical, alternative):
            if spelling != target.canonical_name:
                bucket = extra.setdefault(target_id, [])
                if spelling not in bucket and spelling not in target.aliases:
                    bucket.append(spelling)
    if problems:
        raise IntegrityError(problems)
    return tuple(
        replace(e, aliases=e.aliases + tuple(extra.get(e.id, ()))) if e.id in extra else e
        for e in entities
    )


# --- shipped SF Streets catalog ---

_DATA_DIR = Path(__file__).parent / "data"


def sf_streets_manifest_path() -> Path:
    return _DATA_DIR / "sf_streets" / "manifest.jsonl"


def sf_streets_alias_path() -> Path:
    return _DATA_DIR / "sf_streets" / "aliases.csv"


def load_sf_streets() -> CorpusManifest:
    """The packaged San Francisco boulevard catalog with its alias table."""
    return load_manifest(sf_streets_manifest_path())
