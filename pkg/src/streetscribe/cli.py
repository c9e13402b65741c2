"""Command-line entry point wiring every pipeline stage.

All stages are driven by one JSON run config; `--offline` forbids network
adapters so the whole pipeline runs on packaged fixtures. Failures exit 1
with a JSON error line on stderr; usage mistakes exit 2.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import sys
from pathlib import Path

import click

from . import pipeline
from .config import RunConfig, validate_config
from .corpus import load_manifest
from .errors import ConfigError, StreetscribeError
from .finetune import (
    FinetuneConfig,
    ScriptedTrainer,
    compare,
    ood_regression,
    read_regression_points,
    run_finetune,
    write_ablation_csv,
    write_comparison_csv,
)
from .review import ReviewService, serve
from .synth import SampleStatus, SampleStore, read_dataset_manifest

PACKAGED_DRYRUN_CONFIG = Path(__file__).parent / "data" / "dryrun" / "config.json"


def _fail(error: Exception, code: int = 1) -> None:
    payload = {"error": type(error).__name__, "message": str(error)}
    if isinstance(error, ConfigError):
        payload["problems"] = error.problems
    click.echo(json.dumps(payload), err=True)
    sys.exit(code)


def handle_errors(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except StreetscribeError as exc:
            _fail(exc)

    return wrapper


def _load_config(path: Path, run_dir: Path | None, cache_dir: Path | None, offline: bool) -> RunConfig:
    config = validate_config(path)
    changes: dict = {}
    if run_dir is not None:
        changes["run_dir"] = run_dir
    if cache_dir is not None:
        changes["cache_dir"] = cache_dir
    if offline:
        changes["offline"] = True
    return dataclasses.replace(config, **changes) if changes else config


config_option = click.option(
    "--config", "config_path", type=click.Path(exists=True, path_type=Path), required=True
)
run_dir_option = click.option("--run-dir", type=click.Path(path_type=Path), default=None)


@click.group()
def main() -> None:
    """Street-name transcription auditing and mitigation toolkit."""


# --- corpus ---

@main.group()
def corpus() -> None:
    """Entity catalog and utterance corpus tools."""


@corpus.command("validate")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, path_type=Path), required=True)
@handle_errors
def corpus_validate(manifest_path: Path) -> None:
    manifest = load_manifest(manifest_path)
    click.echo(
        json.dumps(
            {
                "entities": len(manifest.entities),
                "templates": len(manifest.templates),
                "speakers": len(manifest.speakers),
                "recordings": len(manifest.recordings),
                "status": "ok",
            }
        )
    )


# --- eval ---

@main.group("eval")
def eval_group() -> None:
    """Transcription matrix runs and metric reports."""


@eval_group.command("run")
@config_option
@run_dir_option
@click.option("--cache-dir", type=click.Path(path_type=Path), default=None)
@click.option("--offline", is_flag=True, default=False)
@handle_errors
def eval_run_cmd(config_path: Path, run_dir: Path | None, cache_dir: Path | None, offline: bool) -> None:
    config = _load_config(config_path, run_dir, cache_dir, offline)
    output = pipeline.eval_run(config, offline=offline or config.offline)
    click.echo(
        json.dumps(
            {
                "run_dir": str(output.run_dir),
                "records": output.records,
                "errors": output.errors,
                "backend_invocations": output.backend_invocations,
            }
        )
    )
    if output.errors:
        sys.exit(1)  # failures were recorded in matrix_errors.jsonl


@eval_group.command("report")
@config_option
@run_dir_option
@click.option("--transcripts", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@handle_errors
def eval_report_cmd(config_path: Path, run_dir: Path | None, transcripts: Path, seed: int) -> None:
    config = _load_config(config_path, run_dir, None, False)
    out = pipeline.eval_report(config, transcripts, seed=seed)
    click.echo(json.dumps({"run_dir": str(out)}))


# --- impact ---

@main.group()
def impact() -> None:
    """Geographic and financial impact estimation."""


@impact.command("estimate")
@config_option
@run_dir_option
@click.option("--transcripts", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--model", "model_id", default=None, help="limit to one backend's transcripts")
@handle_errors
def impact_estimate_cmd(config_path: Path, run_dir: Path | None, transcripts: Path, model_id: str | None) -> None:
    config = _load_config(config_path, run_dir, None, False)
    out = pipeline.impact_estimate(config, transcripts, model_id=model_id)
    click.echo(json.dumps({"run_dir": str(out)}))


# --- synth ---

@main.group()
def synth() -> None:
    """Synthetic pronunciation generation."""


@synth.command("generate")
@config_option
@run_dir_option
@click.option("--seed", type=int, default=None, help="override synthesis.seed")
@handle_errors
def synth_generate_cmd(config_path: Path, run_dir: Path | None, seed: int | None) -> None:
    config = _load_config(config_path, run_dir, None, False)
    store_dir = pipeline.new_run_dir(config.run_dir, "synth") / "store"
    output = pipeline.synth_generate(config, store_dir, seed=seed)
    click.echo(
        json.dumps(
            {
                "store": str(output.store_dir),
                "generated": output.generated,
                "extracted": output.extracted,
                "failed": output.failed,
            }
        )
    )


# --- review ---

@main.group()
def review() -> None:
    """Human review of extracted clips."""


@review.command("serve")
@click.option("--store", "store_dir", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--port", type=int, default=8765, show_default=True)
@click.option("--ui", "ui_dir", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--decisions-log", type=click.Path(path_type=Path), default=None)
@handle_errors
def review_serve(store_dir: Path, port: int, ui_dir: Path | None, decisions_log: Path | None) -> None:
    store = SampleStore(store_dir)
    service = ReviewService(store, decisions_log)
    enqueued = service.enqueue(store.with_status(SampleStatus.EXTRACTED))
    click.echo(f"enqueued {enqueued} extracted samples", err=True)
    serve(service, port=port, ui_dir=ui_dir)


@review.command("import-decisions")
@click.argument("decisions_file", type=click.Path(exists=True, path_type=Path))
@click.option("--store", "store_dir", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--decisions-log", type=click.Path(path_type=Path), default=None)
@handle_errors
def review_import(decisions_file: Path, store_dir: Path, decisions_log: Path | None) -> None:
    store = SampleStore(store_dir)
    service = ReviewService(store, decisions_log)
    service.enqueue(store.with_status(SampleStatus.EXTRACTED))
    applied = service.import_decisions(decisions_file)
    progress = service.progress()
    click.echo(
        json.dumps(
            {
                "applied": applied,
                "pending": progress.pending,
                "accepted": progress.accepted,
                "rejected": progress.rejected,
                "total": progress.total,
            }
        )
    )


# --- finetune ---

@main.group()
def finetune() -> None:
    """Fine-tuning runs, comparisons, ablations, OOD regression."""


def _finetune_config(config: RunConfig, seed: int | None) -> FinetuneConfig:
    settings = config.finetune
    if settings is None:
        raise ConfigError(["config has no finetune section"])
    return FinetuneConfig(
        base_model_id=settings.base_model_id,
        batch_size=settings.batch_size,
        learning_rate=settings.learning_rate,
        early_stop_loss=settings.early_stop_loss,
        seed=settings.seed if seed is None else seed,
    )


def _scripted_trainer(config: RunConfig) -> ScriptedTrainer:
    settings = config.finetune
    if settings is None or settings.losses_file is None:
        raise ConfigError(["config needs finetune.trainer.losses_file for the scripted trainer"])
    return ScriptedTrainer.from_csv(settings.losses_file)


@finetune.command("run")
@config_option
@run_dir_option
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--seed", type=int, default=None)
@handle_errors
def finetune_run_cmd(config_path: Path, run_dir: Path | None, manifest_path: Path, seed: int | None) -> None:
    config = _load_config(config_path, run_dir, None, False)
    manifest = read_dataset_manifest(manifest_path)
    out_dir = pipeline.new_run_dir(config.run_dir, "finetune")
    result = run_finetune(_finetune_config(config, seed), manifest, _scripted_trainer(config), run_dir=out_dir)
    click.echo(
        json.dumps(
            {
                "run_dir": str(out_dir),
                "artifact_id": result.artifact.get("artifact_id"),
                "stopped_early": result.stopped_early,
                "stop_step": result.stop_step,
                "trained_entries": result.trained_entries,
            }
        )
    )


@finetune.command("compare")
@config_option
@run_dir_option
@click.option("--base", "base_path", type=click.Path(exists=True, path_type=Path), required=True,
              help="scored-records JSONL for the base model")
@click.option("--ft", "ft_path", type=click.Path(exists=True, path_type=Path), required=True,
              help="scored-records JSONL for the finetuned model")
@click.option("--seed", type=int, default=0, show_default=True)
@handle_errors
def finetune_compare_cmd(config_path: Path, run_dir: Path | None, base_path: Path, ft_path: Path, seed: int) -> None:
    config = _load_config(config_path, run_dir, None, False)
    resamples = config.finetune.resamples if config.finetune else 10_000
    report = compare(pipeline.read_scored(base_path), pipeline.read_scored(ft_path),
                     resamples=resamples, seed=seed)
    out_dir = pipeline.new_run_dir(config.run_dir, "compare")
    write_comparison_csv(report, out_dir / "comparison.csv")
    (out_dir / "comparison.json").write_text(pipeline._report_json(report), encoding="utf-8")
    click.echo(json.dumps({"run_dir": str(out_dir)}))


@finetune.command("ablate")
@config_option
@run_dir_option
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--seed", type=int, default=None)
@handle_errors
def finetune_ablate_cmd(config_path: Path, run_dir: Path | None, manifest_path: Path, seed: int | None) -> None:
    config = _load_config(config_path, run_dir, None, False)
    matrix = pipeline.ablate(config, read_dataset_manifest(manifest_path), seed=seed)
    out_dir = pipeline.new_run_dir(config.run_dir, "ablation")
    write_ablation_csv(matrix, out_dir / "ablation.csv")
    click.echo(json.dumps({"run_dir": str(out_dir), "train_languages": list(matrix.train_languages)}))


@finetune.command("ood-regress")
@click.option("--results", "results_path", type=click.Path(exists=True, path_type=Path), required=True,
              help="CSV of base_accuracy,delta per speaker")
@handle_errors
def finetune_ood_cmd(results_path: Path) -> None:
    fit = ood_regression(read_regression_points(results_path))
    click.echo(
        json.dumps(
            {
                "slope": fit.slope,
                "intercept": fit.intercept,
                "r_squared": fit.r_squared,
                "p_value": fit.p_value,
                "n": fit.n,
            }
        )
    )


# --- pipeline ---

@main.group("pipeline")
def pipeline_group() -> None:
    """Chained end-to-end runs."""


@pipeline_group.command("dry-run")
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path),
              default=None, help="defaults to the packaged dry-run config")
@click.option("--run-dir", type=click.Path(path_type=Path), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--offline", is_flag=True, default=True, show_default=True,
              help="dry runs never touch the network")
@handle_errors
def pipeline_dry_run(config_path: Path | None, run_dir: Path | None, seed: int | None, offline: bool) -> None:
    if config_path is None:
        config_path = PACKAGED_DRYRUN_CONFIG
        if run_dir is None:
            run_dir = Path.cwd() / "runs"
    config = _load_config(config_path, run_dir, None, offline)
    output = pipeline.dry_run(config, seed=seed)
    click.echo(
        json.dumps(
            {
                "run_dir": str(output.run_dir),
                "digest": output.digest,
                "manifest_entries": output.manifest_entries,
                "accepted": output.accepted,
                "stop_step": output.stop_step,
                "overall_base_accuracy": output.report.overall.base_accuracy,
                "overall_finetuned_accuracy": output.report.overall.finetuned_accuracy,
            }
        )
    )


if __name__ == "__main__":
    main()
