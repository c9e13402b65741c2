"""ASR backend adapters: contract, deterministic mock, generic remote adapter.

An adapter turns (audio path or bytes, optional prompt text) into
(transcript text, latency in ms). The gateway passes the recording id as an
optional keyword so scripted mocks can look transcripts up without touching
audio; real adapters are free to ignore it.
"""

from __future__ import annotations

import json
import logging
import os
import time
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

from .errors import BackendFailure, TransientBackendError, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AsrBackendDescriptor:
    model_id: str
    supports_prompt: bool
    family: str = ""


class AsrBackend(Protocol):
    descriptor: AsrBackendDescriptor
    concurrency: int

    def transcribe(
        self,
        audio: Path | bytes,
        prompt_text: str | None = None,
        *,
        recording_id: str | None = None,
    ) -> tuple[str, float]:
        """Return (transcript, latency_ms)."""
        ...


class MockBackend:
    """Scripted backend: recording_id -> transcript, from a fixture file.

    Fixture rows are JSON objects {"recording_id", "transcript"} with an
    optional "variant" key for prompt-condition-specific outputs. Keeps an
    invocation counter so tests can assert cache behaviour.
    """

    def __init__(
        self,
        model_id: str,
        script: dict[tuple[str, str | None], str],
        supports_prompt: bool = True,
        fail_on: set[str] | None = None,
    ) -> None:
        self.descriptor = AsrBackendDescriptor(model_id=model_id, supports_prompt=supports_prompt, family="mock")
        self.concurrency = 8
        self._script = dict(script)
        self._fail_on = fail_on or set()
        self.invocations = 0

    @classmethod
    def from_fixture(cls, model_id: str, fixture_path: str | Path, supports_prompt: bool = True) -> "MockBackend":
        script: dict[tuple[str, str | None], str] = {}
        with Path(fixture_path).open(encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                script[(row["recording_id"], row.get("variant"))] = row["transcript"]
        return cls(model_id, script, supports_prompt=supports_prompt)

    def transcribe(
        self,
        audio: Path | bytes,
        prompt_text: str | None = None,
        *,
        recording_id: str | None = None,
    ) -> tuple[str, float]:
        self.invocations += 1
        rid = recording_id
        if rid is None and isinstance(audio, Path):
            rid = audio.stem
        if rid is None:
            raise BackendFailure(f"{self.descriptor.model_id}: mock needs a recording id or audio path")
        if rid in self._fail_on:
            raise TransientBackendError(f"{self.descriptor.model_id}: scripted failure for {rid}")
        variant = None if prompt_text is None else "prompted"
        for key in ((rid, variant), (rid, None)):
            if key in self._script:
                return self._script[key], 0.0
        raise BackendFailure(f"{self.descriptor.model_id}: no scripted transcript for {rid!r}")


class RemoteBackend:
    """Generic HTTP adapter posting audio bytes to a provider endpoint.

    Credentials come from the environment variable named in the run config.
    Construction never raises on a missing credential; `enabled` is False and
    the gateway skips the backend with a warning.
    """

    def __init__(
        self,
        model_id: str,
        endpoint: str,
        credentials_env: str,
        supports_prompt: bool = False,
        family: str = "remote",
        concurrency: int = 2,
        timeout_s: float = 30.0,
    ) -> None:
        self.descriptor = AsrBackendDescriptor(model_id=model_id, supports_prompt=supports_prompt, family=family)
        self.endpoint = endpoint
        self.credentials_env = credentials_env
        self.concurrency = concurrency
        self.timeout_s = timeout_s
        self._api_key = os.environ.get(credentials_env)
        if not self._api_key:
            log.warning(
                "backend %s disabled: environment variable %s is not set",
                model_id,
                credentials_env,
            )

    @property
    def enabled(self) -> bool:
        return bool(self._api_key)

    def transcribe(
        self,
        audio: Path | bytes,
        prompt_text: str | None = None,
        *,
        recording_id: str | None = None,
    ) -> tuple[str, float]:
        if not self.enabled:
            raise BackendFailure(f"{self.descriptor.model_id}: disabled, {self.credentials_env} not set")
        payload = audio if isinstance(audio, bytes) else Path(audio).read_bytes()
        request = urllib.request.Request(
            self.endpoint,
            data=payload,
            headers={
                "Authorization": f"Bearer {self._api_key}",
                "Content-Type": "application/octet-stream",
                **({"X-Prompt": prompt_text} if prompt_text else {}),
            },
        )
        started = time.monotonic()
        try:
            with urllib.request.urlopen(request, timeout=self.timeout_s) as response:
                body = json.loads(response.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:  # type: ignore[attr-defined]
            if exc.code in (429, 500, 502, 503, 504):
                raise TransientBackendError(f"{self.descriptor.model_id}: HTTP {exc.code}") from exc
            raise BackendFailure(f"{self.descriptor.model_id}: HTTP {exc.code}") from exc
        except OSError as exc:
            raise TransientBackendError(f"{self.descriptor.model_id}: {exc}") from exc
        latency_ms = (time.monotonic() - started) * 1000.0
        if "transcript" not in body:
            raise BackendFailure(f"{self.descriptor.model_id}: response missing 'transcript'")
        return str(body["transcript"]), latency_ms


def build_backend(spec: dict, base_dir: Path) -> AsrBackend | None:
    """Instantiate a backend from a run-config entry; None when disabled."""
    kind = spec.get("kind", "mock")
    if kind == "mock":
        fixture = spec.get("fixture")
        if not fixture:
            raise ValidationError(f"mock backend {spec.get('model_id')!r} needs a 'fixture' path")
        return MockBackend.from_fixture(
            spec["model_id"],
            (base_dir / fixture) if not Path(fixture).is_absolute() else Path(fixture),
            supports_prompt=bool(spec.get("supports_prompt", True)),
        )
    if kind == "remote":
        backend = RemoteBackend(
            model_id=spec["model_id"],
            endpoint=spec.get("endpoint", ""),
            credentials_env=spec.get("credentials_env", ""),
            supports_prompt=bool(spec.get("supports_prompt", False)),
            family=spec.get("family", "remote"),
            concurrency=int(spec.get("concurrency", 2)),
        )
        return backend if backend.enabled else None
    raise ValidationError(f"unknown backend kind {kind!r}")
