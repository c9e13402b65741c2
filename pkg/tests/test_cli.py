from __future__ import annotations

import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from streetscribe.cli import PACKAGED_DRYRUN_CONFIG, main

FIXTURES = PACKAGED_DRYRUN_CONFIG.parent / "fixtures"


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, *args):
    result = runner.invoke(main, [str(a) for a in args])
    return result


def test_unknown_subcommand_usage_error(runner):
    result = invoke(runner, "frobnicate")
    assert result.exit_code == 2


def test_corpus_validate_ok(runner):
    result = invoke(runner, "corpus", "validate", "--manifest", FIXTURES / "eval_manifest.jsonl")
    assert result.exit_code == 0
    body = json.loads(result.output)
    assert body["entities"] == 29
    assert body["recordings"] == 24


def test_corpus_validate_integrity_failure_exits_1(runner, tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text(
        '{"kind": "recording", "id": "r", "speaker_id": "ghost", "entity_id": "e", '
        '"template_id": "t", "audio_ref": "x.wav", "duration_s": 1.0, "sample_rate_hz": 8000}\n',
        encoding="utf-8",
    )
    result = invoke(runner, "corpus", "validate", "--manifest", bad)
    assert result.exit_code == 1
    error = json.loads(result.output.strip().splitlines()[-1])
    assert error["error"] == "IntegrityError"


def test_eval_run_row_count_and_cache_idempotence(runner, tmp_path):
    args = [
        "eval", "run", "--config", PACKAGED_DRYRUN_CONFIG,
        "--run-dir", tmp_path / "runs", "--cache-dir", tmp_path / "cache", "--offline",
    ]
    first = invoke(runner, *args)
    assert first.exit_code == 0, first.output
    body = json.loads(first.output)
    assert body["records"] == 24 * 2  # recordings x backends, one condition
    assert body["backend_invocations"] == 48
    second = invoke(runner, *args)
    assert json.loads(second.output)["backend_invocations"] == 0
    run_dirs = sorted((tmp_path / "runs").glob("eval-*"))
    assert len(run_dirs) == 2
    a = (run_dirs[0] / "transcripts.jsonl").read_bytes()
    b = (run_dirs[1] / "transcripts.jsonl").read_bytes()
    assert a == b


def test_dry_run_deterministic_digests(runner, tmp_path):
    outputs = []
    for _ in range(2):
        result = invoke(
            runner, "pipeline", "dry-run", "--config", PACKAGED_DRYRUN_CONFIG,
            "--run-dir", tmp_path / "runs", "--seed", 7,
        )
        assert result.exit_code == 0, result.output
        outputs.append(json.loads(result.output))
    assert outputs[0]["digest"] == outputs[1]["digest"]
    assert outputs[0]["run_dir"] != outputs[1]["run_dir"]  # append-only run dirs
    assert outputs[0]["manifest_entries"] == 48


def test_dry_run_seed_changes_digest(runner, tmp_path):
    digests = []
    for seed in (7, 8):
        result = invoke(
            runner, "pipeline", "dry-run", "--config", PACKAGED_DRYRUN_CONFIG,
            "--run-dir", tmp_path / "runs", "--seed", seed,
        )
        digests.append(json.loads(result.output)["digest"])
    assert digests[0] != digests[1]


def test_eval_report_and_impact(runner, tmp_path):
    run = invoke(
        runner, "eval", "run", "--config", PACKAGED_DRYRUN_CONFIG,
        "--run-dir", tmp_path / "runs", "--cache-dir", tmp_path / "cache", "--offline",
    )
    transcripts = Path(json.loads(run.output)["run_dir"]) / "transcripts.jsonl"
    report = invoke(
        runner, "eval", "report", "--config", PACKAGED_DRYRUN_CONFIG,
        "--run-dir", tmp_path / "runs", "--transcripts", transcripts,
    )
    assert report.exit_code == 0, report.output
    report_dir = Path(json.loads(report.output)["run_dir"])
    results = [json.loads(l) for l in (report_dir / "results.jsonl").open()]
    assert len(results) == 48
    assert {"recording_id", "model_id", "condition", "verdict", "matched_form"} <= results[0].keys()

    impact = invoke(
        runner, "impact", "estimate", "--config", PACKAGED_DRYRUN_CONFIG,
        "--run-dir", tmp_path / "runs", "--transcripts", transcripts, "--model", "base",
    )
    assert impact.exit_code == 0, impact.output
    impact_dir = Path(json.loads(impact.output)["run_dir"])
    summary = json.loads((impact_dir / "impact_summary.json").read_text())
    assert summary["city_annual"] == {"delay_hours": 43500.0, "cost_usd": 2088000.0}
    assert summary["records"] == 24


def test_ood_regress_cli(runner):
    fixture = Path(__file__).parent.parent / "src" / "streetscribe" / "data" / "fixtures" / "ood_per_speaker.csv"
    result = invoke(runner, "finetune", "ood-regress", "--results", fixture)
    assert result.exit_code == 0
    body = json.loads(result.output)
    assert body["slope"] < 0
    assert body["n"] == 78


def test_eval_run_with_recorded_failures_exits_nonzero(runner, tmp_path):
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text(
        '{"kind": "entity", "id": "font", "canonical_name": "FONT", "city": "SF"}\n'
        '{"kind": "template", "id": "t", "text": "[X]"}\n'
        '{"kind": "speaker", "id": "s", "gender": "male", "age": 30, "primary_languages": ["English"]}\n'
        '{"kind": "recording", "id": "r0", "speaker_id": "s", "entity_id": "font", "template_id": "t",'
        ' "audio_ref": "r0.wav", "duration_s": 1.0, "sample_rate_hz": 16000}\n'
        '{"kind": "recording", "id": "r1", "speaker_id": "s", "entity_id": "font", "template_id": "t",'
        ' "audio_ref": "r1.wav", "duration_s": 1.0, "sample_rate_hz": 16000}\n',
        encoding="utf-8",
    )
    fixture = tmp_path / "mock.jsonl"
    fixture.write_text('{"recording_id": "r0", "transcript": "FONT"}\n', encoding="utf-8")  # r1 missing
    config = tmp_path / "config.json"
    config.write_text(
        json.dumps(
            {
                "paths": {"corpus_manifest": "manifest.jsonl", "cache_dir": "cache", "run_dir": "runs"},
                "backends": [{"model_id": "m", "kind": "mock", "fixture": "mock.jsonl"}],
            }
        ),
        encoding="utf-8",
    )
    result = invoke(runner, "eval", "run", "--config", config, "--offline")
    assert result.exit_code == 1
    body = json.loads(result.output.strip().splitlines()[0])
    assert body["records"] == 1
    assert body["errors"] == 1


def test_config_errors_are_machine_readable(runner, tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"paths": {"corpus_manifest": "missing.jsonl"}, "backends": []}))
    result = invoke(runner, "eval", "run", "--config", config)
    assert result.exit_code == 1
    error = json.loads(result.output.strip().splitlines()[-1])
    assert error["error"] == "ConfigError"
    assert len(error["problems"]) == 2
