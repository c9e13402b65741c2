from __future__ import annotations

import json
from pathlib import Path

import pytest

from streetscribe.config import validate_config
from streetscribe.errors import ConfigError

PACKAGED = Path(__file__).parent.parent / "src" / "streetscribe" / "data" / "dryrun" / "config.json"


def write_config(tmp_path: Path, overrides: dict | None = None, drop: list[str] | None = None) -> Path:
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text(
        '{"kind": "entity", "id": "font", "canonical_name": "FONT", "city": "SF"}\n'
        '{"kind": "template", "id": "t", "text": "[X]"}\n',
        encoding="utf-8",
    )
    fixture = tmp_path / "mock.jsonl"
    fixture.write_text("", encoding="utf-8")
    raw = {
        "paths": {"corpus_manifest": "manifest.jsonl", "cache_dir": "cache", "run_dir": "runs"},
        "backends": [{"model_id": "m", "kind": "mock", "fixture": "mock.jsonl"}],
        "prompt_conditions": [{"variant": "NONE"}],
    }
    raw.update(overrides or {})
    for key in drop or []:
        raw.pop(key, None)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(raw), encoding="utf-8")
    return path


def test_valid_minimal_config(tmp_path):
    config = validate_config(write_config(tmp_path))
    assert config.corpus_manifest.exists()
    assert config.cache_namespace == "v1"
    assert len(config.backends) == 1


def test_packaged_dryrun_config_is_valid():
    config = validate_config(PACKAGED)
    assert config.synthesis is not None
    assert config.synthesis.seed == 7
    assert config.finetune is not None
    assert config.finetune.early_stop_loss == 0.01


def test_missing_manifest_reports_one_error(tmp_path):
    path = write_config(tmp_path, overrides={"paths": {"corpus_manifest": "nope.jsonl"}})
    with pytest.raises(ConfigError) as excinfo:
        validate_config(path)
    assert len(excinfo.value.problems) == 1
    assert "nope.jsonl" in excinfo.value.problems[0]


def test_all_errors_reported_not_just_first(tmp_path):
    path = write_config(
        tmp_path,
        overrides={
            "paths": {"corpus_manifest": "nope.jsonl"},
            "backends": [{"kind": "mock", "fixture": "also-missing.jsonl"}],
            "prompt_conditions": [{"variant": "SITUATIONAL"}],
        },
    )
    with pytest.raises(ConfigError) as excinfo:
        validate_config(path)
    assert len(excinfo.value.problems) >= 3


def test_duplicate_backend_ids_rejected(tmp_path):
    path = write_config(
        tmp_path,
        overrides={
            "backends": [
                {"model_id": "m", "kind": "mock", "fixture": "mock.jsonl"},
                {"model_id": "m", "kind": "mock", "fixture": "mock.jsonl"},
            ]
        },
    )
    with pytest.raises(ConfigError, match="duplicate"):
        validate_config(path)


def test_synthesis_requires_explicit_seed(tmp_path):
    carriers = tmp_path / "carriers.csv"
    carriers.write_text("language,text\nes,Estoy en {entity}\n", encoding="utf-8")
    voices = tmp_path / "voices.csv"
    voices.write_text("speaker_ref,language,audio_path,duration_s\ns,es,a.wav,5.0\n", encoding="utf-8")
    path = write_config(
        tmp_path,
        overrides={
            "synthesis": {
                "languages": ["es"],
                "carriers_file": "carriers.csv",
                "voices_index": "voices.csv",
            }
        },
    )
    with pytest.raises(ConfigError, match="seed must be explicit"):
        validate_config(path)


def test_bad_json_rejected(tmp_path):
    path = tmp_path / "config.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError, match="not valid JSON"):
        validate_config(path)


def test_remote_backend_needs_credentials_env(tmp_path):
    path = write_config(
        tmp_path,
        overrides={"backends": [{"model_id": "r", "kind": "remote", "endpoint": "https://x"}]},
    )
    with pytest.raises(ConfigError, match="credentials_env"):
        validate_config(path)
