"""Fine-tuning orchestration: runs, comparison reports, ablations, OOD fit.

The trainer is a pluggable contract; acceptance and CI use a scripted mock
that replays a loss schedule, so no GPU is ever required to exercise the
harness. A real adapter only has to yield (step, loss) pairs and hand back
an artifact reference.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from collections.abc import Callable, Iterator, Sequence
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from scipy import stats as scipy_stats

from .errors import ValidationError
from .metrics import GroupStat, stratify
from .synth import SynthDatasetManifest, SynthManifestEntry


@dataclass(frozen=True)
class FinetuneConfig:
    base_model_id: str
    batch_size: int = 16
    learning_rate: float = 1e-5
    early_stop_loss: float = 0.01
    seed: int = 0
    max_samples: int | None = None
    languages: tuple[str, ...] | None = None
    exclude_entities: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")
        if self.early_stop_loss <= 0:
            raise ValidationError("early_stop_loss must be > 0")


class Trainer:
    """Contract: yield (step, loss) pairs, then describe the artifact."""

    def train(self, config: FinetuneConfig, entries: Sequence[SynthManifestEntry]) -> Iterator[tuple[int, float]]:
        raise NotImplementedError

    def artifact(self, config: FinetuneConfig, entries: Sequence[SynthManifestEntry]) -> dict:
        raise NotImplementedError


class ScriptedTrainer(Trainer):
    """Mock trainer replaying a fixed loss schedule; bit-reproducible."""

    def __init__(self, losses: Sequence[float], artifact_extra: dict | None = None) -> None:
        self.losses = tuple(losses)
        self.artifact_extra = dict(artifact_extra or {})
        self.train_calls = 0

    @classmethod
    def from_csv(cls, path: str | Path, artifact_extra: dict | None = None) -> "ScriptedTrainer":
        losses = []
        with Path(path).open(encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames[:2]] != ["step", "loss"]:
                raise ValidationError(f"{path}: expected header 'step,loss'")
            for row in reader:
                losses.append(float(row["loss"]))
        return cls(losses, artifact_extra)

    def train(self, config: FinetuneConfig, entries: Sequence[SynthManifestEntry]) -> Iterator[tuple[int, float]]:
        self.train_calls += 1
        for step, loss in enumerate(self.losses, start=1):
            yield step, loss

    def artifact(self, config: FinetuneConfig, entries: Sequence[SynthManifestEntry]) -> dict:
        blob = json.dumps(
            [asdict(config), [e.sample_id for e in entries]], sort_keys=True, separators=(",", ":")
        )
        return {
            "artifact_id": "model-" + hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12],
            "base_model_id": config.base_model_id,
            "trained_samples": len(entries),
            **self.artifact_extra,
        }


@dataclass(frozen=True)
class FinetuneRunResult:
    artifact: dict
    loss_log: tuple[tuple[int, float], ...]
    stopped_early: bool
    stop_step: int | None
    trained_entries: int


def _filter_entries(
    manifest: SynthDatasetManifest, config: FinetuneConfig
) -> list[SynthManifestEntry]:
    entries = [
        e
        for e in manifest.entries
        if (config.languages is None or e.language in config.languages)
        and e.entity_id not in config.exclude_entities
    ]
    if config.max_samples is not None:
        entries = entries[: config.max_samples]
    return entries


def run_finetune(
    config: FinetuneConfig,
    manifest: SynthDatasetManifest,
    trainer: Trainer,
    run_dir: str | Path | None = None,
) -> FinetuneRunResult:
    """Drive one training run with early stopping on the reported loss.

    Training stops at the first step whose loss drops below
    config.early_stop_loss. When run_dir is given, the config snapshot,
    per-step loss log and artifact reference are persisted there.
    """
    entries = _filter_entries(manifest, config)
    if not entries:
        raise ValidationError("no training samples left after filters")
    loss_log: list[tuple[int, float]] = []
    stop_step: int | None = None
    for step, loss in trainer.train(config, entries):
        loss_log.append((step, loss))
        if loss < config.early_stop_loss:
            stop_step = step
            break
    result = FinetuneRunResult(
        artifact=trainer.artifact(config, entries),
        loss_log=tuple(loss_log),
        stopped_early=stop_step is not None,
        stop_step=stop_step,
        trained_entries=len(entries),
    )
    if run_dir is not None:
        persist_run(Path(run_dir), config, manifest, result)
    return result


def persist_run(
    run_dir: Path,
    config: FinetuneConfig,
    manifest: SynthDatasetManifest,
    result: FinetuneRunResult,
) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps(asdict(config), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    manifest_digest = hashlib.sha256(
        json.dumps([e.sample_id for e in manifest.entries], separators=(",", ":")).encode("utf-8")
    ).hexdigest()
    (run_dir / "manifest_ref.json").write_text(
        json.dumps(
            {"entries": len(manifest.entries), "sha256": manifest_digest}, indent=2, sort_keys=True
        )
        + "\n",
        encoding="utf-8",
    )
    with (run_dir / "losses.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, loss in result.loss_log:
            writer.writerow([step, f"{loss:.6f}"])
    (run_dir / "artifact.json").write_text(
        json.dumps(result.artifact, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# --- comparison ---

@dataclass(frozen=True)
class ScoredRecord:
    """One evaluated recording: which group it belongs to and whether the
    entity was recovered."""

    recording_id: str
    group_key: str
    correct: bool


@dataclass(frozen=True)
class GroupComparison:
    group_key: str
    n: int
    base_accuracy: float
    finetuned_accuracy: float
    delta: float
    relative_gain: float | None
    base_ci: tuple[float, float]
    finetuned_ci: tuple[float, float]


@dataclass(frozen=True)
class ComparisonReport:
    groups: tuple[GroupComparison, ...]
    overall: GroupComparison


def compare(
    base_results: Sequence[ScoredRecord],
    finetuned_results: Sequence[ScoredRecord],
    resamples: int = 10_000,
    seed: int = 0,
) -> ComparisonReport:
    """Per-group base vs finetuned accuracy with relative gains.

    Both result sets must cover exactly the same recordings. Relative gain
    is (finetuned - base) / base, undefined (None) when base accuracy is 0.
    """
    base_ids = {r.recording_id for r in base_results}
    ft_ids = {r.recording_id for r in finetuned_results}
    if base_ids != ft_ids:
        missing_ft = sorted(base_ids - ft_ids)
        missing_base = sorted(ft_ids - base_ids)
        raise ValidationError(
            f"result sets cover different recordings; missing from finetuned: {missing_ft}, "
            f"missing from base: {missing_base}"
        )
    base_stats = {s.group_key: s for s in stratify(base_results, "group_key", resamples=resamples, seed=seed)}
    ft_stats = {s.group_key: s for s in stratify(finetuned_results, "group_key", resamples=resamples, seed=seed)}
    groups = tuple(
        _group_comparison(base_stats[key], ft_stats[key]) for key in sorted(base_stats)
    )
    overall_base = _overall_stat(base_results, resamples, seed)
    overall_ft = _overall_stat(finetuned_results, resamples, seed)
    return ComparisonReport(groups=groups, overall=_group_comparison(overall_base, overall_ft))


def _overall_stat(records: Sequence[ScoredRecord], resamples: int, seed: int) -> GroupStat:
    rows = [{"group": "overall", "correct": r.correct} for r in records]
    (stat,) = stratify(rows, "group", resamples=resamples, seed=seed)
    return stat


def _group_comparison(base: GroupStat, ft: GroupStat) -> GroupComparison:
    delta = ft.accuracy - base.accuracy
    gain = (delta / base.accuracy) if base.accuracy > 0 else None
    return GroupComparison(
        group_key=base.group_key,
        n=base.n,
        base_accuracy=base.accuracy,
        finetuned_accuracy=ft.accuracy,
        delta=delta,
        relative_gain=gain,
        base_ci=(base.ci_low, base.ci_high),
        finetuned_ci=(ft.ci_low, ft.ci_high),
    )


def write_comparison_csv(report: ComparisonReport, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["group", "n", "base_accuracy", "finetuned_accuracy", "delta", "relative_gain",
             "base_ci_low", "base_ci_high", "finetuned_ci_low", "finetuned_ci_high"]
        )
        for row in (*report.groups, report.overall):
            writer.writerow(
                [
                    row.group_key, row.n, f"{row.base_accuracy:.6f}", f"{row.finetuned_accuracy:.6f}",
                    f"{row.delta:.6f}",
                    "undefined" if row.relative_gain is None else f"{row.relative_gain:.6f}",
                    f"{row.base_ci[0]:.6f}", f"{row.base_ci[1]:.6f}",
                    f"{row.finetuned_ci[0]:.6f}", f"{row.finetuned_ci[1]:.6f}",
                ]
            )


# --- per-language ablation ---

@dataclass(frozen=True)
class AblationCell:
    train_language: str
    group_key: str
    delta: float | None
    error: str | None = None


@dataclass(frozen=True)
class AblationMatrix:
    cells: tuple[AblationCell, ...]
    train_languages: tuple[str, ...]
    group_keys: tuple[str, ...]

    def cell(self, train_language: str, group_key: str) -> AblationCell:
        for cell in self.cells:
            if cell.train_language == train_language and cell.group_key == group_key:
                return cell
        raise KeyError((train_language, group_key))


def per_language_ablation(
    configs: Sequence[FinetuneConfig],
    manifest: SynthDatasetManifest,
    trainer: Trainer,
    evaluator: Callable[[dict], Sequence[ScoredRecord]],
    base_results: Sequence[ScoredRecord],
    resamples: int = 2_000,
    seed: int = 0,
) -> AblationMatrix:
    """Train one model per language plus the all-languages aggregate.

    Each config must filter to exactly one language. Cells hold the
    per-group accuracy delta vs base; a failed run flags its cells with the
    error and leaves the rest of the matrix intact.
    """
    for config in configs:
        if config.languages is None or len(config.languages) != 1:
            raise ValidationError(f"ablation config must name exactly one language, got {config.languages}")
    base_by_group = {
        s.group_key: s.accuracy for s in stratify(base_results, "group_key", resamples=resamples, seed=seed)
    }
    group_keys = tuple(sorted(base_by_group))
    rows: list[tuple[str, FinetuneConfig]] = [(c.languages[0], c) for c in configs]  # type: ignore[index]
    rows.append(("all", replace(configs[0], languages=None)))
    cells: list[AblationCell] = []
    for train_language, config in rows:
        try:
            result = run_finetune(config, manifest, trainer)
            scored = evaluator(result.artifact)
            ft_by_group = {
                s.group_key: s.accuracy
                for s in stratify(scored, "group_key", resamples=resamples, seed=seed)
            }
            for group_key in group_keys:
                if group_key in ft_by_group:
                    delta = ft_by_group[group_key] - base_by_group[group_key]
                    cells.append(AblationCell(train_language, group_key, delta))
                else:
                    cells.append(AblationCell(train_language, group_key, None, error="group missing from eval"))
        except Exception as exc:
            for group_key in group_keys:
                cells.append(AblationCell(train_language, group_key, None, error=str(exc)))
    return AblationMatrix(
        cells=tuple(cells),
        train_languages=tuple(lang for lang, _ in rows),
        group_keys=group_keys,
    )


def write_ablation_csv(matrix: AblationMatrix, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["train_language", *matrix.group_keys])
        for language in matrix.train_languages:
            row: list[str] = [language]
            for group_key in matrix.group_keys:
                cell = matrix.cell(language, group_key)
                row.append(f"{cell.delta:.6f}" if cell.delta is not None else f"ERROR:{cell.error}")
            writer.writerow(row)


# --- OOD regression ---

@dataclass(frozen=True)
class RegressionResult:
    slope: float
    intercept: float
    r_squared: float
    p_value: float
    n: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.r_squared <= 1.0 + 1e-12:
            raise ValidationError("r_squared outside [0, 1]")
        if self.n < 3:
            raise ValidationError("regression needs n >= 3")


def ood_regression(per_speaker: Sequence[tuple[float, float]]) -> RegressionResult:
    """OLS of improvement delta on baseline accuracy.

    Returns the fitted slope/intercept, the variance explained, and a
    two-sided p-value for the slope from a t statistic on n-2 degrees of
    freedom.
    """
    n = len(per_speaker)
    if n < 3:
        raise ValidationError(f"regression needs at least 3 points, got {n}")
    xs = [float(x) for x, _ in per_speaker]
    ys = [float(y) for _, y in per_speaker]
    mean_x = sum(xs) / n
    mean_y = sum(ys) / n
    sxx = sum((x - mean_x) ** 2 for x in xs)
    if sxx == 0.0:
        raise ValidationError("baseline accuracies have zero variance; slope is undefined")
    sxy = sum((x - mean_x) * (y - mean_y) for x, y in zip(xs, ys))
    slope = sxy / sxx
    intercept = mean_y - slope * mean_x
    ssr = sum((y - (intercept + slope * x)) ** 2 for x, y in zip(xs, ys))
    sst = sum((y - mean_y) ** 2 for y in ys)
    if sst == 0.0:
        r_squared = 1.0  # constant targets fitted exactly
    else:
        r_squared = max(0.0, min(1.0, 1.0 - ssr / sst))
    if ssr <= 0.0:
        p_value = 1.0 if slope == 0.0 else 0.0
    else:
        se = math.sqrt(ssr / (n - 2) / sxx)
        t_stat = slope / se
        p_value = float(2.0 * scipy_stats.t.sf(abs(t_stat), df=n - 2))
    return RegressionResult(slope=slope, intercept=intercept, r_squared=r_squared, p_value=p_value, n=n)


def read_regression_points(path: str | Path) -> list[tuple[float, float]]:
    """Read `base_accuracy,delta` CSV rows (header required)."""
    points = []
    with Path(path).open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["base_accuracy", "delta"]
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames[:2]] != expected:
            raise ValidationError(f"{path}: expected header '{','.join(expected)}'")
        for row in reader:
            points.append((float(row["base_accuracy"]), float(row["delta"])))
    return points
