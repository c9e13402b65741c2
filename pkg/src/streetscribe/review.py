"""Human review of extracted clips: queue, decisions log, HTTP API.

Decisions are an append-only JSONL log, one self-describing line per
decision, flushed as written so a crash never loses an accepted verdict.
The latest decision per sample wins; replaying the log over a store must
reproduce live state exactly.
"""

from __future__ import annotations

import enum
import json
import logging
import threading
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from datetime import datetime, timezone
from functools import partial
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from .errors import LogParseError, SampleNotFound, ValidationError
from .synth import SampleStatus, SampleStore, SynthSample

log = logging.getLogger(__name__)

DEFAULT_LEASE_WINDOW_S = 300.0


class Verdict(str, enum.Enum):
    ACCEPT = "ACCEPT"
    REJECT = "REJECT"


_VERDICT_STATUS = {Verdict.ACCEPT: SampleStatus.ACCEPTED, Verdict.REJECT: SampleStatus.REJECTED}


@dataclass(frozen=True)
class ReviewDecision:
    sample_id: str
    verdict: Verdict
    reviewer: str
    note: str = ""
    decided_at: str = ""


@dataclass(frozen=True)
class ReviewProgress:
    pending: int
    accepted: int
    rejected: int
    total: int

    def __post_init__(self) -> None:
        if self.pending + self.accepted + self.rejected != self.total:
            raise ValidationError("progress counts must sum to total")


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


class ReviewService:
    """Queue and decision bookkeeping over a sample store."""

    def __init__(
        self,
        store: SampleStore,
        decisions_log: str | Path | None = None,
        lease_window_s: float = DEFAULT_LEASE_WINDOW_S,
        monotonic: Callable[[], float] = time.monotonic,
        timestamp: Callable[[], str] = _utc_now,
    ) -> None:
        self.store = store
        self.decisions_log = Path(decisions_log) if decisions_log else store.root / "decisions.jsonl"
        self.lease_window_s = lease_window_s
        self._monotonic = monotonic
        self._timestamp = timestamp
        self._leases: dict[str, tuple[str, float]] = {}
        self._lock = threading.Lock()

    # --- queue ---

    def enqueue(self, samples: Sequence[SynthSample]) -> int:
        """Move EXTRACTED samples into the review queue; idempotent.

        Samples already queued or decided are left alone; samples in any
        other state are skipped with a warning.
        """
        enqueued = 0
        for sample in samples:
            current = self.store.get(sample.id) if sample.id in self.store else sample
            if current.status == SampleStatus.EXTRACTED:
                self.store.put(current.advanced(SampleStatus.PENDING_REVIEW))
                enqueued += 1
            elif current.status in (SampleStatus.PENDING_REVIEW, SampleStatus.ACCEPTED, SampleStatus.REJECTED):
                continue
            else:
                log.warning("sample %s is %s, not EXTRACTED; skipped", current.id, current.status.value)
        return enqueued

    def next_pending(self, reviewer: str) -> SynthSample | None:
        """Earliest enqueued sample not currently leased to someone else."""
        now = self._monotonic()
        with self._lock:
            for sample in self.store.with_status(SampleStatus.PENDING_REVIEW):
                lease = self._leases.get(sample.id)
                if lease is not None and lease[0] != reviewer and now < lease[1]:
                    continue
                self._leases[sample.id] = (reviewer, now + self.lease_window_s)
                return sample
        return None

    # --- decisions ---

    def submit_decision(self, decision: ReviewDecision) -> ReviewProgress:
        if not isinstance(decision.verdict, Verdict):
            raise ValidationError(f"malformed verdict {decision.verdict!r}")
        if decision.sample_id not in self.store:
            raise SampleNotFound(f"unknown sample {decision.sample_id!r}")
        sample = self.store.get(decision.sample_id)
        if sample.status not in (SampleStatus.PENDING_REVIEW, SampleStatus.ACCEPTED, SampleStatus.REJECTED):
            raise ValidationError(
                f"sample {sample.id} is {sample.status.value}; decisions apply to queued samples"
            )
        stamped = ReviewDecision(
            sample_id=decision.sample_id,
            verdict=decision.verdict,
            reviewer=decision.reviewer,
            note=decision.note,
            decided_at=decision.decided_at or self._timestamp(),
        )
        with self._lock:
            with self.decisions_log.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(_decision_to_json(stamped), ensure_ascii=False) + "\n")
                fh.flush()
            self.store.put(sample.advanced(_VERDICT_STATUS[stamped.verdict]))
            self._leases.pop(decision.sample_id, None)
        return self.progress()

    def import_decisions(self, path: str | Path) -> int:
        """Headless path: apply a decisions file through the normal flow."""
        count = 0
        for decision in read_decision_log(path):
            self.submit_decision(decision)
            count += 1
        return count

    def progress(self) -> ReviewProgress:
        pending = len(self.store.with_status(SampleStatus.PENDING_REVIEW))
        accepted = len(self.store.with_status(SampleStatus.ACCEPTED))
        rejected = len(self.store.with_status(SampleStatus.REJECTED))
        return ReviewProgress(
            pending=pending,
            accepted=accepted,
            rejected=rejected,
            total=pending + accepted + rejected,
        )


def _decision_to_json(decision: ReviewDecision) -> dict:
    return {
        "sample_id": decision.sample_id,
        "verdict": decision.verdict.value,
        "reviewer": decision.reviewer,
        "note": decision.note,
        "decided_at": decision.decided_at,
    }


def read_decision_log(path: str | Path) -> list[ReviewDecision]:
    decisions = []
    with Path(path).open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                decisions.append(
                    ReviewDecision(
                        sample_id=row["sample_id"],
                        verdict=Verdict(row["verdict"]),
                        reviewer=row.get("reviewer", ""),
                        note=row.get("note") or "",
                        decided_at=row.get("decided_at", ""),
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise LogParseError(f"corrupt decision: {exc}", line_no) from exc
    return decisions


def replay_log(log_path: str | Path, store: SampleStore) -> dict[str, SampleStatus]:
    """Reconstruct review statuses by applying the log in order.

    Every sample that ever entered the queue starts PENDING_REVIEW, then
    decisions apply latest-wins. Replaying is idempotent: duplicated lines
    do not change the final state.
    """
    statuses: dict[str, SampleStatus] = {
        s.id: SampleStatus.PENDING_REVIEW
        for s in store.all()
        if s.status in (SampleStatus.PENDING_REVIEW, SampleStatus.ACCEPTED, SampleStatus.REJECTED)
    }
    for decision in read_decision_log(log_path):
        if decision.sample_id in statuses:
            statuses[decision.sample_id] = _VERDICT_STATUS[decision.verdict]
    return statuses


# --- HTTP layer ---

class _ReviewHandler(BaseHTTPRequestHandler):
    service: ReviewService
    ui_dir: Path | None

    def __init__(self, service: ReviewService, ui_dir: Path | None, *args, **kwargs) -> None:
        self.service = service
        self.ui_dir = ui_dir
        super().__init__(*args, **kwargs)

    def log_message(self, fmt: str, *args) -> None:  # quiet by default
        log.debug("http: " + fmt, *args)

    def _send_json(self, payload: dict, status: int = 200) -> None:
        body = json.dumps(payload, ensure_ascii=False).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_bytes(self, body: bytes, content_type: str, status: int = 200) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self) -> None:  # noqa: N802 (stdlib naming)
        parsed = urlparse(self.path)
        parts = [p for p in parsed.path.split("/") if p]
        if parts[:2] == ["api", "queue"] and parts[2:] == ["next"]:
            reviewer = parse_qs(parsed.query).get("reviewer", ["anonymous"])[0]
            sample = self.service.next_pending(reviewer)
            if sample is None:
                self.send_response(204)
                self.end_headers()
                return
            self._send_json(
                {
                    "sample_id": sample.id,
                    "entity": sample.target_text,
                    "carrier_text": sample.carrier_text,
                    "language": sample.language,
                    "clip_url": f"/api/audio/{sample.id}",
                    "full_url": f"/api/audio/{sample.id}/full",
                }
            )
            return
        if parts[:2] == ["api", "progress"]:
            progress = self.service.progress()
            self._send_json(
                {
                    "pending": progress.pending,
                    "accepted": progress.accepted,
                    "rejected": progress.rejected,
                    "total": progress.total,
                }
            )
            return
        if parts[:2] == ["api", "audio"] and (
            len(parts) == 3 or (len(parts) == 4 and parts[3] == "full")
        ):
            sample_id = parts[2]
            want_full = len(parts) == 4
            if sample_id not in self.service.store:
                self._send_json({"error": f"unknown sample {sample_id}"}, status=404)
                return
            sample = self.service.store.get(sample_id)
            path = self.service.store.audio_path(sample) if want_full else self.service.store.clip_path(sample)
            if path is None or not path.exists():
                self._send_json({"error": "no audio for sample"}, status=404)
                return
            self._send_bytes(path.read_bytes(), "audio/wav")
            return
        if self.ui_dir is not None:
            rel = parsed.path.lstrip("/") or "index.html"
            candidate = (self.ui_dir / rel).resolve()
            if candidate.is_file() and self.ui_dir.resolve() in candidate.parents:
                self._send_bytes(candidate.read_bytes(), _content_type(candidate))
                return
        self._send_json({"error": "not found"}, status=404)

    def do_POST(self) -> None:  # noqa: N802
        parsed = urlparse(self.path)
        if parsed.path != "/api/decision":
            self._send_json({"error": "not found"}, status=404)
            return
        length = int(self.headers.get("Content-Length", "0"))
        try:
            payload = json.loads(self.rfile.read(length).decode("utf-8"))
            decision = ReviewDecision(
                sample_id=payload["sample_id"],
                verdict=Verdict(payload["verdict"]),
                reviewer=payload.get("reviewer", "anonymous"),
                note=payload.get("note") or "",
            )
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            self._send_json({"error": f"malformed decision: {exc}"}, status=400)
            return
        try:
            progress = self.service.submit_decision(decision)
        except SampleNotFound as exc:
            self._send_json({"error": str(exc)}, status=404)
            return
        except ValidationError as exc:
            self._send_json({"error": str(exc)}, status=400)
            return
        self._send_json(
            {
                "pending": progress.pending,
                "accepted": progress.accepted,
                "rejected": progress.rejected,
                "total": progress.total,
            }
        )


def _content_type(path: Path) -> str:
    return {
        ".html": "text/html; charset=utf-8",
        ".js": "text/javascript; charset=utf-8",
        ".css": "text/css; charset=utf-8",
        ".json": "application/json; charset=utf-8",
        ".wav": "audio/wav",
    }.get(path.suffix, "application/octet-stream")


def make_server(service: ReviewService, port: int = 0, ui_dir: str | Path | None = None) -> ThreadingHTTPServer:
    handler = partial(_ReviewHandler, service, Path(ui_dir) if ui_dir else None)
    return ThreadingHTTPServer(("127.0.0.1", port), handler)


def serve(service: ReviewService, port: int, ui_dir: str | Path | None = None) -> None:
    """Blocking server loop for the CLI."""
    server = make_server(service, port=port, ui_dir=ui_dir)
    host, bound_port = server.server_address[:2]
    print(f"review service listening on http://{host}:{bound_port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
