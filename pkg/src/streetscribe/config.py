"""Run configuration: one JSON file drives every pipeline stage.

All randomness is seeded from the config (or a CLI override), so a config
file plus a seed fully reproduces a run. Validation is exhaustive: every
problem in the file is reported, never just the first.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

_PROMPT_VARIANTS = {"NONE", "SITUATIONAL", "FULL_VOCABULARY"}


@dataclass(frozen=True)
class SynthesisSettings:
    languages: tuple[str, ...]
    speakers_per_language: int
    carriers_file: Path
    voices_index: Path
    seed: int
    target_size: int
    padding_s: float = 0.05
    clip_bounds_s: tuple[float, float] = (0.2, 3.0)
    entity_casing: str = "canonical"
    accept_all_decisions: bool = True


@dataclass(frozen=True)
class FinetuneSettings:
    base_model_id: str
    seed: int
    batch_size: int = 16
    learning_rate: float = 1e-5
    early_stop_loss: float = 0.01
    losses_file: Path | None = None
    eval_manifest: Path | None = None
    base_fixture: Path | None = None
    finetuned_fixture: Path | None = None
    resamples: int = 10_000


@dataclass(frozen=True)
class RunConfig:
    base_dir: Path
    corpus_manifest: Path
    cache_dir: Path
    run_dir: Path
    cache_namespace: str
    backends: tuple[dict, ...]
    prompt_conditions: tuple[dict, ...]
    fare_model: dict
    volume_model: dict
    geocoder_fixture: Path | None
    router_fixture: Path | None
    synthesis: SynthesisSettings | None
    finetune: FinetuneSettings | None
    offline: bool = False
    raw: dict = field(default_factory=dict, repr=False)


def _resolve(base: Path, value: str) -> Path:
    path = Path(value)
    return path if path.is_absolute() else base / path


def validate_config(path: str | Path) -> RunConfig:
    """Parse and fully validate a run config; raises ConfigError listing
    every problem found."""
    path = Path(path)
    problems: list[str] = []
    if not path.exists():
        raise ConfigError([f"config file {path} does not exist"])
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config is not valid JSON: {exc}"]) from exc
    base = path.parent

    def need_file(value: str | None, label: str) -> Path | None:
        if value is None:
            problems.append(f"{label} is required")
            return None
        resolved = _resolve(base, value)
        if not resolved.exists():
            problems.append(f"{label}: file {resolved} does not exist")
        return resolved

    def optional_file(value: str | None, label: str) -> Path | None:
        if value is None:
            return None
        resolved = _resolve(base, value)
        if not resolved.exists():
            problems.append(f"{label}: file {resolved} does not exist")
        return resolved

    paths = raw.get("paths", {})
    corpus_manifest = need_file(paths.get("corpus_manifest"), "paths.corpus_manifest")
    cache_dir = _resolve(base, paths.get("cache_dir", "cache"))
    run_dir = _resolve(base, paths.get("run_dir", "runs"))

    backends = raw.get("backends", [])
    if not backends:
        problems.append("backends: at least one backend is required")
    seen_ids: set[str] = set()
    for i, spec in enumerate(backends):
        model_id = spec.get("model_id")
        if not model_id:
            problems.append(f"backends[{i}]: model_id is required")
            continue
        if model_id in seen_ids:
            problems.append(f"backends[{i}]: duplicate model_id {model_id!r}")
        seen_ids.add(model_id)
        kind = spec.get("kind", "mock")
        if kind == "mock":
            optional = need_file(spec.get("fixture"), f"backends[{i}].fixture")
            if optional is not None:
                spec = {**spec, "fixture": str(optional)}
        elif kind == "remote":
            if not spec.get("credentials_env"):
                problems.append(f"backends[{i}]: remote backend needs credentials_env")
        else:
            problems.append(f"backends[{i}]: unknown kind {kind!r}")
        backends[i] = spec

    conditions = raw.get("prompt_conditions", [{"variant": "NONE"}])
    for i, spec in enumerate(conditions):
        variant = spec.get("variant", "NONE")
        if variant not in _PROMPT_VARIANTS:
            problems.append(f"prompt_conditions[{i}]: unknown variant {variant!r}")
        if variant == "SITUATIONAL" and not spec.get("text"):
            problems.append(f"prompt_conditions[{i}]: SITUATIONAL needs text")
        if variant == "FULL_VOCABULARY" and not (spec.get("vocabulary") or spec.get("vocabulary_from_catalog")):
            problems.append(
                f"prompt_conditions[{i}]: FULL_VOCABULARY needs vocabulary or vocabulary_from_catalog"
            )

    geocoder_fixture = optional_file(raw.get("geocoder_fixture"), "geocoder_fixture")
    router_fixture = optional_file(raw.get("router_fixture"), "router_fixture")

    synthesis = None
    synth_raw = raw.get("synthesis")
    if synth_raw is not None:
        carriers = need_file(synth_raw.get("carriers_file"), "synthesis.carriers_file")
        voices = need_file(synth_raw.get("voices_index"), "synthesis.voices_index")
        if "seed" not in synth_raw:
            problems.append("synthesis.seed must be explicit")
        languages = synth_raw.get("languages") or []
        if not languages:
            problems.append("synthesis.languages must be non-empty")
        bounds = synth_raw.get("clip_bounds_s", [0.2, 3.0])
        if carriers is not None and voices is not None and not problems:
            synthesis = SynthesisSettings(
                languages=tuple(languages),
                speakers_per_language=int(synth_raw.get("speakers_per_language", 2)),
                carriers_file=carriers,
                voices_index=voices,
                seed=int(synth_raw.get("seed", 0)),
                target_size=int(synth_raw.get("target_size", 928)),
                padding_s=float(synth_raw.get("padding_s", 0.05)),
                clip_bounds_s=(float(bounds[0]), float(bounds[1])),
                entity_casing=synth_raw.get("entity_casing", "canonical"),
                accept_all_decisions=bool(synth_raw.get("accept_all_decisions", True)),
            )

    finetune = None
    ft_raw = raw.get("finetune")
    if ft_raw is not None:
        if "seed" not in ft_raw:
            problems.append("finetune.seed must be explicit")
        if not ft_raw.get("base_model_id"):
            problems.append("finetune.base_model_id is required")
        losses = optional_file((ft_raw.get("trainer") or {}).get("losses_file"), "finetune.trainer.losses_file")
        eval_raw = ft_raw.get("eval") or {}
        eval_manifest = optional_file(eval_raw.get("manifest"), "finetune.eval.manifest")
        base_fixture = optional_file(eval_raw.get("base_fixture"), "finetune.eval.base_fixture")
        ft_fixture = optional_file(eval_raw.get("finetuned_fixture"), "finetune.eval.finetuned_fixture")
        if not problems:
            finetune = FinetuneSettings(
                base_model_id=ft_raw.get("base_model_id", ""),
                seed=int(ft_raw.get("seed", 0)),
                batch_size=int(ft_raw.get("batch_size", 16)),
                learning_rate=float(ft_raw.get("learning_rate", 1e-5)),
                early_stop_loss=float(ft_raw.get("early_stop_loss", 0.01)),
                losses_file=losses,
                eval_manifest=eval_manifest,
                base_fixture=base_fixture,
                finetuned_fixture=ft_fixture,
                resamples=int(ft_raw.get("resamples", 10_000)),
            )

    if problems:
        raise ConfigError(problems)
    return RunConfig(
        base_dir=base,
        corpus_manifest=corpus_manifest,  # type: ignore[arg-type]
        cache_dir=cache_dir,
        run_dir=run_dir,
        cache_namespace=raw.get("cache_namespace", "v1"),
        backends=tuple(backends),
        prompt_conditions=tuple(conditions),
        fare_model=raw.get("fare_model", {}),
        volume_model=raw.get("volume_model", {}),
        geocoder_fixture=geocoder_fixture,
        router_fixture=router_fixture,
        synthesis=synthesis,
        finetune=finetune,
        offline=bool(raw.get("offline", False)),
        raw=raw,
    )
