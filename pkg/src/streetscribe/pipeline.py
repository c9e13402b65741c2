"""Stage orchestration behind the CLI: eval runs, reports, impact, dry run.

Every function here takes a validated RunConfig and writes into a run
directory. Run directories are append-only: each invocation creates a new
timestamped subdirectory and never touches previous ones. Inside a run
directory nothing depends on wall-clock time when a fixed clock is passed,
which is how the dry run achieves byte-identical reruns.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from . import geo
from .backends import AsrBackend, MockBackend, build_backend
from .config import RunConfig
from .corpus import CorpusManifest, UtteranceTemplate, load_manifest
from .errors import ValidationError
from .finetune import (
    ComparisonReport,
    FinetuneConfig,
    ScoredRecord,
    ScriptedTrainer,
    compare,
    per_language_ablation,
    run_finetune,
    write_comparison_csv,
)
from .gateway import (
    Gateway,
    PromptCondition,
    PromptVariant,
    TranscriptCache,
    TranscriptRecord,
    read_transcripts,
    write_transcripts,
)
from .metrics import match_entity, stratify
from .review import ReviewService, Verdict
from .synth import (
    MockTtsEngine,
    RecordedTimingsAligner,
    SampleStatus,
    SampleStore,
    assemble_dataset,
    build_carrier,
    extract_entity_segment,
    load_carriers,
    load_voice_index,
    select_speakers,
    synthesize,
    write_dataset_manifest,
)

log = logging.getLogger(__name__)

EPOCH_ISO = "1970-01-01T00:00:00+00:00"


def _stamp() -> str:
    return datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S.%f")


def new_run_dir(root: Path, stage: str) -> Path:
    for attempt in range(100):
        suffix = "" if attempt == 0 else f"-{attempt}"
        run_dir = root / f"{stage}-{_stamp()}{suffix}"
        try:
            run_dir.mkdir(parents=True, exist_ok=False)
            return run_dir
        except FileExistsError:
            continue
    raise RuntimeError(f"could not allocate a fresh {stage} run directory under {root}")


def _stable_seed(*parts: object) -> int:
    blob = "|".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(blob.encode("utf-8")).digest()[:4], "big")


# --- eval ---

def build_backends(config: RunConfig, offline: bool) -> list[AsrBackend]:
    backends: list[AsrBackend] = []
    for spec in config.backends:
        if offline and spec.get("kind") == "remote":
            log.warning("offline mode: skipping remote backend %s", spec.get("model_id"))
            continue
        backend = build_backend(dict(spec), config.base_dir)
        if backend is not None:
            backends.append(backend)
    if not backends:
        raise ValidationError("no usable backends (all disabled or skipped)")
    return backends


def build_conditions(config: RunConfig, manifest: CorpusManifest) -> list[PromptCondition]:
    conditions = []
    for spec in config.prompt_conditions:
        variant = PromptVariant(spec.get("variant", "NONE"))
        if variant == PromptVariant.FULL_VOCABULARY:
            if spec.get("vocabulary_from_catalog"):
                vocabulary = tuple(e.canonical_name.title() for e in manifest.entities)
            else:
                vocabulary = tuple(spec["vocabulary"])
            conditions.append(PromptCondition(variant=variant, vocabulary=vocabulary))
        elif variant == PromptVariant.SITUATIONAL:
            conditions.append(PromptCondition(variant=variant, text=spec["text"]))
        else:
            conditions.append(PromptCondition())
    return conditions


@dataclass(frozen=True)
class EvalRunOutput:
    run_dir: Path
    records: int
    errors: int
    backend_invocations: int


def eval_run(config: RunConfig, offline: bool = False, clock=None) -> EvalRunOutput:
    """Transcribe the whole matrix against the persistent cache."""
    manifest = load_manifest(config.corpus_manifest)
    backends = build_backends(config, offline)
    conditions = build_conditions(config, manifest)
    cache = TranscriptCache(config.cache_dir, namespace=config.cache_namespace)
    gateway = Gateway(cache, **({"clock": clock} if clock else {}))
    before = _total_invocations(backends)
    result = gateway.run_matrix(manifest, backends, conditions)
    invocations = _total_invocations(backends) - before
    run_dir = new_run_dir(config.run_dir, "eval")
    write_transcripts(result.records, run_dir / "transcripts.jsonl")
    with (run_dir / "matrix_errors.jsonl").open("w", encoding="utf-8") as fh:
        for error in result.errors:
            fh.write(json.dumps(error.__dict__, ensure_ascii=False) + "\n")
    (run_dir / "run_meta.json").write_text(
        json.dumps(
            {
                "backend_invocations": invocations,
                "records": len(result.records),
                "errors": len(result.errors),
                "backends": [b.descriptor.model_id for b in backends],
                "conditions": [c.variant.value for c in conditions],
                "cache_namespace": config.cache_namespace,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    return EvalRunOutput(
        run_dir=run_dir,
        records=len(result.records),
        errors=len(result.errors),
        backend_invocations=invocations,
    )


def _total_invocations(backends: list[AsrBackend]) -> int:
    return sum(getattr(b, "invocations", 0) for b in backends)


# --- report ---

def score_records(
    manifest: CorpusManifest, records: list[TranscriptRecord]
) -> tuple[list[dict], dict[str, list[ScoredRecord]]]:
    """Verdict rows for the results file plus ScoredRecords per model."""
    rows: list[dict] = []
    scored: dict[str, list[ScoredRecord]] = {}
    for record in records:
        recording = manifest.recording(record.recording_id)
        entity = manifest.entity(recording.entity_id)
        speaker = manifest.speaker(recording.speaker_id)
        verdict = match_entity(record.transcript, entity)
        rows.append(
            {
                "recording_id": record.recording_id,
                "model_id": record.model_id,
                "condition": record.variant,
                "verdict": verdict.correct,
                "matched_form": verdict.matched_form,
            }
        )
        scored.setdefault(record.model_id, []).append(
            ScoredRecord(
                recording_id=record.recording_id,
                group_key=speaker.language_group.value,
                correct=verdict.correct,
            )
        )
    return rows, scored


def eval_report(config: RunConfig, transcripts_path: Path, resamples: int = 10_000, seed: int = 0) -> Path:
    """Score a transcripts file into verdicts and stratified summaries."""
    manifest = load_manifest(config.corpus_manifest)
    records = read_transcripts(transcripts_path)
    rows, scored = score_records(manifest, records)
    run_dir = new_run_dir(config.run_dir, "report")
    with (run_dir / "results.jsonl").open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    with (run_dir / "summary.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model_id", "group", "n", "accuracy", "ci_low", "ci_high"])
        for model_id in sorted(scored):
            stats = stratify(scored[model_id], "group_key", resamples=resamples, seed=seed)
            overall = stratify(
                [{"group": "overall", "correct": r.correct} for r in scored[model_id]],
                "group",
                resamples=resamples,
                seed=seed,
            )
            for stat in (*stats, *overall):
                writer.writerow(
                    [model_id, stat.group_key, stat.n,
                     f"{stat.accuracy:.6f}", f"{stat.ci_low:.6f}", f"{stat.ci_high:.6f}"]
                )
    for model_id, model_scored in scored.items():
        with (run_dir / f"scored-{model_id}.jsonl").open("w", encoding="utf-8") as fh:
            for record in model_scored:
                fh.write(
                    json.dumps(
                        {
                            "recording_id": record.recording_id,
                            "group_key": record.group_key,
                            "correct": record.correct,
                        }
                    )
                    + "\n"
                )
    return run_dir


def read_scored(path: Path) -> list[ScoredRecord]:
    records = []
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                records.append(
                    ScoredRecord(
                        recording_id=row["recording_id"],
                        group_key=row["group_key"],
                        correct=bool(row["correct"]),
                    )
                )
    return records


# --- impact ---

def strip_template(transcript: str, template: UtteranceTemplate) -> str:
    """Peel the template's carrier words off a transcript, if present.

    "I'm on [STREET NAME]" + "I'm on Bont" -> "Bont". Falls back to the
    whole transcript when the carrier words do not match.
    """
    prefix, _, suffix = re.split(r"(\[[^\[\]]+\])", template.text, maxsplit=1)
    stripped = transcript.strip()
    if prefix and stripped.lower().startswith(prefix.strip().lower()):
        stripped = stripped[len(prefix.strip()):].strip()
    if suffix and stripped.lower().endswith(suffix.strip().lower()):
        stripped = stripped[: len(stripped) - len(suffix.strip())].strip()
    return stripped.strip(" .,!?") or transcript


def impact_estimate(
    config: RunConfig,
    transcripts_path: Path,
    model_id: str | None = None,
) -> Path:
    """Geocode intended vs transcribed entities and price the difference."""
    if config.geocoder_fixture is None:
        raise ValidationError("impact estimation needs geocoder_fixture in the config")
    manifest = load_manifest(config.corpus_manifest)
    records = read_transcripts(transcripts_path)
    if model_id is not None:
        records = [r for r in records if r.model_id == model_id]
    if not records:
        raise ValidationError("no transcript records to estimate impact for")
    resolver = geo.Resolver(geo.StubGeocoder.from_csv(config.geocoder_fixture))
    router = geo.StubRouter.from_csv(config.router_fixture) if config.router_fixture else None
    fare_model = geo.FareModel(**config.fare_model) if config.fare_model else geo.FareModel()
    volume = geo.CityVolumeModel(**config.volume_model) if config.volume_model else geo.CityVolumeModel()
    impacts: list[geo.ImpactRecord] = []
    groups: dict[str, str] = {}
    for record in records:
        recording = manifest.recording(record.recording_id)
        entity = manifest.entity(recording.entity_id)
        speaker = manifest.speaker(recording.speaker_id)
        template = manifest.template(recording.template_id)
        intended = resolver.resolve(entity.canonical_name, entity.city)
        transcribed_text = strip_template(record.transcript, template)
        transcribed = resolver.resolve(transcribed_text, entity.city)
        impact = geo.distance_error(
            record.recording_id, intended, transcribed, router, fare_model
        )
        impacts.append(impact)
        groups[record.recording_id] = speaker.language_group.value
    report = geo.impact_report(impacts, lambda r: groups[r.recording_id])
    run_dir = new_run_dir(config.run_dir, "impact")
    geo.write_impact_csv(report, run_dir / "impact_by_group.csv")
    hours, usd = geo.city_annual_impact(volume)
    (run_dir / "impact_summary.json").write_text(
        json.dumps(
            {
                "records": len(impacts),
                "by_group": [row.__dict__ for row in report],
                "city_annual": {"delay_hours": hours, "cost_usd": usd},
                "fare_model": fare_model.__dict__,
                "volume_model": volume.__dict__,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    return run_dir


# --- synthesis ---

@dataclass(frozen=True)
class SynthRunOutput:
    store_dir: Path
    generated: int
    extracted: int
    failed: int


def synth_generate(
    config: RunConfig,
    store_dir: Path,
    seed: int | None = None,
) -> SynthRunOutput:
    """Generate and segment synthetic entity clips per the config."""
    settings = config.synthesis
    if settings is None:
        raise ValidationError("config has no synthesis section")
    master_seed = settings.seed if seed is None else seed
    manifest = load_manifest(config.corpus_manifest)
    carriers = {c.language: c for c in load_carriers(settings.carriers_file)}
    missing = [lang for lang in settings.languages if lang not in carriers]
    if missing:
        raise ValidationError(f"no carrier template for languages: {missing}")
    voices = load_voice_index(settings.voices_index)
    engine = MockTtsEngine(languages=settings.languages)
    aligner = RecordedTimingsAligner()
    store = SampleStore(store_dir)
    generated = extracted = failed = 0
    for language in settings.languages:
        speakers = select_speakers(
            voices, language, settings.speakers_per_language,
            seed=_stable_seed(master_seed, language),
        )
        for entity in manifest.entities:
            carrier = build_carrier(carriers[language], entity, casing=settings.entity_casing)
            for voice in speakers:
                sample = synthesize(
                    engine,
                    voice,
                    carrier,
                    language,
                    seed=_stable_seed(master_seed, language, voice.speaker_ref, entity.id),
                    store=store,
                    entity=entity,
                )
                if sample.status == SampleStatus.FAILED:
                    failed += 1
                    continue
                generated += 1
                done = extract_entity_segment(
                    sample, aligner, store,
                    padding_s=settings.padding_s, bounds_s=settings.clip_bounds_s,
                )
                if done.status == SampleStatus.EXTRACTED:
                    extracted += 1
                else:
                    failed += 1
    return SynthRunOutput(store_dir=store_dir, generated=generated, extracted=extracted, failed=failed)


# --- deterministic end-to-end dry run ---

@dataclass(frozen=True)
class DryRunOutput:
    run_dir: Path
    digest: str
    manifest_entries: int
    accepted: int
    stop_step: int | None
    report: ComparisonReport


def dry_run(config: RunConfig, seed: int | None = None) -> DryRunOutput:
    """synth(mock) -> review(auto decisions) -> assemble -> finetune(mock)
    -> compare, fully deterministic for a given seed."""
    settings = config.synthesis
    ft_settings = config.finetune
    if settings is None or ft_settings is None:
        raise ValidationError("dry run needs synthesis and finetune sections in the config")
    if (
        ft_settings.losses_file is None
        or ft_settings.eval_manifest is None
        or ft_settings.base_fixture is None
        or ft_settings.finetuned_fixture is None
    ):
        raise ValidationError("dry run needs finetune.trainer.losses_file and finetune.eval fixtures")
    master_seed = settings.seed if seed is None else seed
    run_dir = new_run_dir(config.run_dir, "dryrun")

    # 1. synthesize + extract
    synth_out = synth_generate(config, run_dir / "store", seed=master_seed)
    store = SampleStore(run_dir / "store")

    # 2. review: enqueue everything, apply the scripted accept-all decisions
    service = ReviewService(
        store,
        run_dir / "store" / "decisions.jsonl",
        timestamp=lambda: EPOCH_ISO,
    )
    service.enqueue(store.with_status(SampleStatus.EXTRACTED))
    decisions_file = run_dir / "decisions_input.jsonl"
    with decisions_file.open("w", encoding="utf-8") as fh:
        for sample in store.with_status(SampleStatus.PENDING_REVIEW):
            fh.write(
                json.dumps(
                    {
                        "sample_id": sample.id,
                        "verdict": Verdict.ACCEPT.value,
                        "reviewer": "dry-run",
                        "note": "",
                        "decided_at": EPOCH_ISO,
                    }
                )
                + "\n"
            )
    service.import_decisions(decisions_file)

    # 3. assemble the training manifest
    dataset = assemble_dataset(store.with_status(SampleStatus.ACCEPTED), settings.target_size)
    write_dataset_manifest(dataset, run_dir / "training_manifest.jsonl")

    # 4. finetune with the scripted trainer
    trainer = ScriptedTrainer.from_csv(ft_settings.losses_file)
    ft_config = FinetuneConfig(
        base_model_id=ft_settings.base_model_id,
        batch_size=ft_settings.batch_size,
        learning_rate=ft_settings.learning_rate,
        early_stop_loss=ft_settings.early_stop_loss,
        seed=master_seed,
    )
    ft_result = run_finetune(ft_config, dataset, trainer, run_dir=run_dir / "finetune")

    # 5. evaluate base vs "finetuned" fixtures over the eval corpus and compare
    eval_manifest = load_manifest(ft_settings.eval_manifest)
    base_backend = MockBackend.from_fixture("base", ft_settings.base_fixture)
    ft_backend = MockBackend.from_fixture("finetuned", ft_settings.finetuned_fixture)
    cache = TranscriptCache(run_dir / "cache", namespace="dryrun")
    gateway = Gateway(cache, clock=lambda: EPOCH_ISO)
    matrix = gateway.run_matrix(eval_manifest, [base_backend, ft_backend], [PromptCondition()])
    _, scored = score_records(eval_manifest, list(matrix.records))
    report = compare(
        scored["base"], scored["finetuned"], resamples=ft_settings.resamples, seed=master_seed
    )
    write_comparison_csv(report, run_dir / "comparison.csv")
    (run_dir / "comparison.json").write_text(_report_json(report), encoding="utf-8")

    digest = directory_digest(run_dir)
    (run_dir / "digest.txt").write_text(digest + "\n", encoding="utf-8")
    return DryRunOutput(
        run_dir=run_dir,
        digest=digest,
        manifest_entries=len(dataset.entries),
        accepted=len(store.with_status(SampleStatus.ACCEPTED)),
        stop_step=ft_result.stop_step,
        report=report,
    )


def _score_fixture(manifest: CorpusManifest, fixture_path: Path) -> list[ScoredRecord]:
    """Score a scripted transcripts fixture against the eval corpus."""
    transcripts: dict[str, str] = {}
    with Path(fixture_path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                transcripts[row["recording_id"]] = row["transcript"]
    scored = []
    for recording in manifest.recordings:
        if recording.id not in transcripts:
            raise ValidationError(f"fixture {fixture_path} has no transcript for {recording.id!r}")
        entity = manifest.entity(recording.entity_id)
        speaker = manifest.speaker(recording.speaker_id)
        verdict = match_entity(transcripts[recording.id], entity)
        scored.append(
            ScoredRecord(
                recording_id=recording.id,
                group_key=speaker.language_group.value,
                correct=verdict.correct,
            )
        )
    return scored


class _TaggingTrainer(ScriptedTrainer):
    """Scripted trainer that stamps the trained language set on artifacts."""

    def artifact(self, config, entries):  # type: ignore[override]
        ref = super().artifact(config, entries)
        ref["train_languages"] = ",".join(sorted({e.language for e in entries}))
        return ref


def ablate(config: RunConfig, manifest, seed: int | None = None):
    """Per-language ablation over scripted fixtures named in the config."""
    ft_settings = config.finetune
    if ft_settings is None or ft_settings.losses_file is None or ft_settings.eval_manifest is None:
        raise ValidationError("ablation needs finetune.trainer.losses_file and finetune.eval.manifest")
    raw_fixtures = (config.raw.get("finetune") or {}).get("ablation_fixtures") or {}
    if "all" not in raw_fixtures or len(raw_fixtures) < 2:
        raise ValidationError(
            "ablation needs finetune.ablation_fixtures mapping each language (and 'all') to a transcripts fixture"
        )
    fixtures = {
        tag: (config.base_dir / value if not Path(value).is_absolute() else Path(value))
        for tag, value in raw_fixtures.items()
    }
    for tag, path in fixtures.items():
        if not path.exists():
            raise ValidationError(f"ablation fixture for {tag!r} missing: {path}")
    eval_manifest = load_manifest(ft_settings.eval_manifest)
    if ft_settings.base_fixture is None:
        raise ValidationError("ablation needs finetune.eval.base_fixture")
    base_scored = _score_fixture(eval_manifest, ft_settings.base_fixture)
    master_seed = ft_settings.seed if seed is None else seed

    def evaluator(artifact: dict) -> list[ScoredRecord]:
        tag = artifact.get("train_languages", "")
        return _score_fixture(eval_manifest, fixtures.get(tag, fixtures["all"]))

    languages = sorted(tag for tag in fixtures if tag != "all")
    configs = [
        FinetuneConfig(
            base_model_id=ft_settings.base_model_id,
            batch_size=ft_settings.batch_size,
            learning_rate=ft_settings.learning_rate,
            early_stop_loss=ft_settings.early_stop_loss,
            seed=master_seed,
            languages=(lang,),
        )
        for lang in languages
    ]
    trainer = _TaggingTrainer.from_csv(ft_settings.losses_file)
    return per_language_ablation(
        configs, manifest, trainer, evaluator, base_scored,
        resamples=ft_settings.resamples, seed=master_seed,
    )


def _report_json(report: ComparisonReport) -> str:
    def row(group) -> dict:
        return {
            "group": group.group_key,
            "n": group.n,
            "base_accuracy": group.base_accuracy,
            "finetuned_accuracy": group.finetuned_accuracy,
            "delta": group.delta,
            "relative_gain": group.relative_gain,
            "base_ci": list(group.base_ci),
            "finetuned_ci": list(group.finetuned_ci),
        }

    return json.dumps(
        {"groups": [row(g) for g in report.groups], "overall": row(report.overall)},
        indent=2,
        sort_keys=True,
    ) + "\n"


def directory_digest(root: Path, exclude: frozenset[str] = frozenset({"digest.txt"})) -> str:
    """SHA-256 over sorted (relative path, bytes) pairs under root."""
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root).as_posix()
        if rel in exclude:
            continue
        digest.update(rel.encode("utf-8"))
        digest.update(b"\0")
        digest.update(path.read_bytes())
        digest.update(b"\0")
    return digest.hexdigest()
