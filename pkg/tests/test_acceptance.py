"""Acceptance gate: every criterion runs offline in minutes, no network,
no GPUs, no credentials. Each test prints one PASS/FAIL line; run with
`pytest tests/test_acceptance.py -v -s` to see them.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streetscribe import pipeline
from streetscribe.cli import PACKAGED_DRYRUN_CONFIG
from streetscribe.config import validate_config
from streetscribe.corpus import EntitySpec, load_alias_table, load_sf_streets, sf_streets_alias_path
from streetscribe.errors import StateTransitionError
from streetscribe.finetune import ScoredRecord, compare, ood_regression, read_regression_points
from streetscribe.geo import (
    CityVolumeModel,
    FareModel,
    ImpactStatus,
    Resolver,
    StubGeocoder,
    StubRouter,
    city_annual_impact,
    distance_error,
    impact_report,
    trip_cost,
)
from streetscribe.metrics import (
    MatchVerdict,
    bootstrap_ci,
    entity_error_rate,
    match_entity,
    normalize_text,
    stratify,
    word_error_rate,
)
from streetscribe.synth import (
    CarrierTemplate,
    MockTtsEngine,
    RecordedTimingsAligner,
    SampleStatus,
    SampleStore,
    VoiceSample,
    build_carrier,
    extract_entity_segment,
    synthesize,
)

DATA = Path(__file__).parent.parent / "src" / "streetscribe" / "data"


@contextmanager
def criterion(name: str, budget_s: float):
    started = time.monotonic()
    try:
        yield
    except BaseException:
        print(f"[acceptance] {name}: FAIL ({time.monotonic() - started:.2f}s)")
        raise
    elapsed = time.monotonic() - started
    print(f"[acceptance] {name}: PASS ({elapsed:.2f}s, budget {budget_s:.0f}s)")
    assert elapsed < budget_s, f"{name} exceeded its {budget_s}s budget ({elapsed:.2f}s)"


# --- 1. alias fidelity -------------------------------------------------------

def test_alias_fidelity():
    with criterion("alias fidelity (11 alias-table rows + 50 perturbations each)", 5.0):
        catalog = load_sf_streets()
        table = load_alias_table(sf_streets_alias_path())
        assert len(table) == 11
        rng = np.random.default_rng(2024)
        letters = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
        for canonical_col, alternative in table:
            owners = [
                e for e in catalog.entities
                if normalize_text(e.canonical_name)
                in {normalize_text(canonical_col), normalize_text(alternative)}
            ]
            assert len(owners) == 1, f"row ({canonical_col!r}, {alternative!r}) not attached uniquely"
            entity = owners[0]
            assert match_entity(f"I'm on {alternative}", entity).correct, alternative
            accepted_norms = {normalize_text(f) for f in entity.accepted_forms()}
            produced = 0
            while produced < 50:
                pos = int(rng.integers(0, len(alternative)))
                letter = letters[int(rng.integers(0, 26))]
                if letter == alternative[pos]:
                    continue
                perturbed = alternative[:pos] + letter + alternative[pos + 1 :]
                norm = normalize_text(perturbed)
                if not norm or norm in accepted_norms:
                    continue  # still an accepted spelling; draw again
                produced += 1
                verdict = match_entity(f"I'm on {perturbed}", entity)
                assert not verdict.correct, f"{perturbed!r} accepted for {entity.canonical_name}"


# --- 2. metric oracle equivalence -------------------------------------------

def _naive_wer(reference: str, hypothesis: str) -> float:
    ref = normalize_text(reference).split()
    hyp = normalize_text(hypothesis).split()
    dp = [[0] * (len(hyp) + 1) for _ in range(len(ref) + 1)]
    for i in range(len(ref) + 1):
        dp[i][0] = i
    for j in range(len(hyp) + 1):
        dp[0][j] = j
    for i in range(1, len(ref) + 1):
        for j in range(1, len(hyp) + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            dp[i][j] = min(dp[i - 1][j] + 1, dp[i][j - 1] + 1, dp[i - 1][j - 1] + cost)
    return dp[-1][-1] / len(ref)


def test_metric_oracle_equivalence():
    with criterion("metric oracle equivalence (100 seeded toy corpora)", 60.0):
        vocabulary = ["im", "on", "font", "bont", "alemany", "geary", "twin", "peaks", "turk", "the"]
        groups = ["ENGLISH_ONLY", "MULTILINGUAL_WITH_ENGLISH", "NON_ENGLISH"]
        for corpus_seed in range(100):
            rng = np.random.default_rng(corpus_seed)
            n = int(rng.integers(1, 101))
            rows = [
                {"group": groups[int(rng.integers(0, 3))], "correct": bool(rng.random() < 0.6)}
                for _ in range(n)
            ]
            verdicts = [
                MatchVerdict(r["correct"], "X" if r["correct"] else None, "") for r in rows
            ]
            expected_error = sum(1 for r in rows if not r["correct"]) / n
            assert entity_error_rate(verdicts) == expected_error

            stats = {s.group_key: s for s in stratify(rows, "group", resamples=50, seed=corpus_seed)}
            by_group: dict[str, list[bool]] = {}
            for row in rows:
                by_group.setdefault(row["group"], []).append(row["correct"])
            for group, outcomes in by_group.items():
                assert stats[group].n == len(outcomes)
                assert stats[group].accuracy == sum(outcomes) / len(outcomes)

            reference = " ".join(rng.choice(vocabulary, size=int(rng.integers(1, 9))))
            hypothesis = " ".join(rng.choice(vocabulary, size=int(rng.integers(0, 9))))
            assert word_error_rate(reference, hypothesis) == _naive_wer(reference, hypothesis)


# --- 3. bootstrap coverage ---------------------------------------------------

def test_bootstrap_coverage():
    with criterion("bootstrap coverage (Bernoulli(0.6), n=200, 500 trials)", 180.0):
        covered = 0
        for trial in range(500):
            rng = np.random.default_rng(10_000 + trial)
            values = (rng.random(200) < 0.6).astype(int)
            low, high = bootstrap_ci(values, resamples=10_000, level=0.95, seed=trial)
            covered += low <= 0.6 <= high
        assert covered >= 0.93 * 500, f"coverage {covered}/500"
        once = bootstrap_ci([1, 0, 1, 1, 0, 1, 0, 1], resamples=10_000, seed=77)
        again = bootstrap_ci([1, 0, 1, 1, 0, 1, 0, 1], resamples=10_000, seed=77)
        assert once == again


# --- 4. impact math, headline-exact --------------------------------------------

def test_impact_math_headline_exact():
    with criterion("impact math (fares, delays, city totals)", 1.0):
        fare, delay = trip_cost(1.26)
        assert fare == pytest.approx(4.095, abs=0.001)   # rounds to the $4.00 headline
        assert delay == pytest.approx(5.40, abs=0.01)    # the 5-minute headline delay
        fare, delay = trip_cost(2.4)
        assert fare == pytest.approx(7.80, abs=0.001)    # the $8.00 headline
        assert delay == pytest.approx(10.29, abs=0.01)   # the 10-minute headline delay
        hours, usd = city_annual_impact(
            CityVolumeModel(voice_trips_per_weekday=2000, weekdays_per_year=261,
                            mean_delay_minutes=5.0, mean_fare_usd=4.0)
        )
        assert hours == 43_500.0
        assert usd == 2_088_000.0  # the rounded $2.1M headline figure


# --- 5. drop/cap rules --------------------------------------------------------

def _geo_fixture(tmp_path: Path):
    """20 records: 15 OK with designed distances, 3 unresolved, 2 over-cap."""
    plan = [
        ("ENGLISH_ONLY", [0.5, 1.0, 1.26, 2.0, 0.74], 1, [25.0]),
        ("MULTILINGUAL_WITH_ENGLISH", [1.5, 2.5, 3.0, 2.0, 1.0, 2.0], 1, []),
        ("NON_ENGLISH", [2.4, 4.0, 3.6, 2.0], 1, [21.5]),
    ]
    geocoder_rows = [("query", "lat", "lon")]
    router_rows = [("lat1", "lon1", "lat2", "lon2", "miles")]
    records_plan = []  # (rid, group, kind)
    i = 0
    for group, distances, n_unresolved, over_caps in plan:
        for kind_list, kind in ((distances, "ok"), (over_caps, "cap")):
            for miles in kind_list:
                intended = (37.70 + i * 0.001, -122.40)
                transcribed = (37.75 + i * 0.001, -122.30)
                geocoder_rows.append((f"INTENDED-{i}, San Francisco", *intended))
                geocoder_rows.append((f"TRANS-{i}, San Francisco", *transcribed))
                router_rows.append((*intended, *transcribed, miles))
                records_plan.append((i, group, kind))
                i += 1
        for _ in range(n_unresolved):
            intended = (37.70 + i * 0.001, -122.40)
            geocoder_rows.append((f"INTENDED-{i}, San Francisco", *intended))
            geocoder_rows.append((f"TRANS-{i}, San Francisco", "", ""))
            records_plan.append((i, group, "unresolved"))
            i += 1
    geocoder_csv = tmp_path / "geocoder.csv"
    with geocoder_csv.open("w", encoding="utf-8", newline="") as fh:
        csv.writer(fh).writerows(geocoder_rows)
    router_csv = tmp_path / "router.csv"
    with router_csv.open("w", encoding="utf-8", newline="") as fh:
        csv.writer(fh).writerows(router_rows)
    return geocoder_csv, router_csv, records_plan


def test_drop_cap_rules(tmp_path):
    with criterion("drop/cap rules (20-record stub fixture)", 1.0):
        geocoder_csv, router_csv, records_plan = _geo_fixture(tmp_path)
        assert len(records_plan) == 20
        resolver = Resolver(StubGeocoder.from_csv(geocoder_csv))
        router = StubRouter.from_csv(router_csv)
        impacts, groups = [], {}
        for i, group, _kind in records_plan:
            intended = resolver.resolve(f"INTENDED-{i}", "San Francisco")
            transcribed = resolver.resolve(f"TRANS-{i}", "San Francisco")
            impacts.append(distance_error(f"r{i}", intended, transcribed, router, FareModel()))
            groups[f"r{i}"] = group
        by_status = {status: 0 for status in ImpactStatus}
        for impact in impacts:
            by_status[impact.status] += 1
        assert by_status[ImpactStatus.OK] == 15
        assert by_status[ImpactStatus.DROPPED_UNRESOLVED] == 3
        assert by_status[ImpactStatus.DISCARDED_OVER_CAP] == 2

        report = {row.group_key: row for row in impact_report(impacts, lambda r: groups[r.recording_id])}
        # hand-computed: mean distances 5.5/5, 12/6, 12/4; fare = $3.25/mile; delay = d/14*60
        expected = {
            "ENGLISH_ONLY": (1.1, 3.575, 4.714285714285714, 1, 1),
            "MULTILINGUAL_WITH_ENGLISH": (2.0, 6.5, 8.571428571428571, 1, 0),
            "NON_ENGLISH": (3.0, 9.75, 12.857142857142858, 1, 1),
        }
        for group, (distance, fare, delay, dropped, discarded) in expected.items():
            row = report[group]
            assert row.mean_distance_miles == pytest.approx(distance, abs=1e-9)
            assert row.mean_fare_usd == pytest.approx(fare, abs=1e-9)
            assert row.mean_delay_minutes == pytest.approx(delay, abs=1e-9)
            assert row.n_dropped == dropped
            assert row.n_discarded == discarded
        assert sum(row.n for row in report.values()) == 20


# --- 6. synthesis state machine -----------------------------------------------

_ENTITY_NAMES = ["WASHINGTON", "TWIN PEAKS", "GEARY", "FONT", "CESAR CHAVEZ"]
_OPS = st.lists(
    st.tuples(
        st.sampled_from(["extract", "enqueue", "accept", "reject", "extract_again", "skip_to_accept"]),
        st.integers(min_value=0, max_value=2),
    ),
    min_size=1,
    max_size=12,
)


@settings(max_examples=60, deadline=None)
@given(ops=_OPS, name=st.sampled_from(_ENTITY_NAMES))
def _state_machine_property(ops, name):
    import tempfile

    with tempfile.TemporaryDirectory() as root:
        store = SampleStore(root)
        engine = MockTtsEngine()
        aligner = RecordedTimingsAligner()
        voice = VoiceSample("cv-es-001", "es", "x.wav", 8.0)
        entity = EntitySpec(id=name.lower().replace(" ", "-"), canonical_name=name, city="SF")
        carrier = build_carrier(CarrierTemplate(language="es", text="Estoy en {entity}"), entity)
        assert carrier.count(name) == 1
        assert "i'm on" not in carrier.lower()
        samples = [
            synthesize(engine, voice, carrier, "es", seed, store, entity) for seed in range(3)
        ]
        for op, idx in ops:
            sample = store.get(samples[idx].id)
            try:
                if op in ("extract", "extract_again"):
                    extract_entity_segment(sample, aligner, store)
                elif op == "enqueue":
                    if sample.status == SampleStatus.EXTRACTED:
                        store.put(sample.advanced(SampleStatus.PENDING_REVIEW))
                elif op in ("accept", "reject"):
                    target = SampleStatus.ACCEPTED if op == "accept" else SampleStatus.REJECTED
                    store.put(sample.advanced(target))
                elif op == "skip_to_accept":
                    store.put(sample.advanced(SampleStatus.ACCEPTED))
            except StateTransitionError:
                pass  # forbidden edges must raise, never corrupt state
        # replay the full status history from the append-only log
        history: dict[str, list[str]] = {}
        with (store.root / "samples.jsonl").open(encoding="utf-8") as fh:
            for line in fh:
                row = json.loads(line)
                history.setdefault(row["id"], []).append(row["status"])
        for statuses in history.values():
            for position, status in enumerate(statuses):
                if status == SampleStatus.ACCEPTED.value:
                    assert SampleStatus.PENDING_REVIEW.value in statuses[:position], (
                        f"ACCEPTED without passing review: {statuses}"
                    )
        for sample in store.all():
            if sample.status == SampleStatus.EXTRACTED:
                assert sample.segment_start_s is not None and sample.segment_end_s is not None
                assert 0 <= sample.segment_start_s < sample.segment_end_s <= sample.duration_s + 1e-9
                assert 0.2 <= sample.segment_end_s - sample.segment_start_s <= 3.0


def test_synthesis_state_machine():
    with criterion("synthesis state machine (random operation sequences)", 30.0):
        _state_machine_property()


# --- 7. end-to-end deterministic dry run ---------------------------------------

def test_end_to_end_dry_run(tmp_path):
    with criterion("end-to-end deterministic dry run", 120.0):
        base_config = validate_config(PACKAGED_DRYRUN_CONFIG)
        config = dataclasses.replace(base_config, run_dir=tmp_path / "runs")
        first = pipeline.dry_run(config, seed=7)
        second = pipeline.dry_run(config, seed=7)

        assert first.digest == second.digest
        assert first.run_dir != second.run_dir

        assert first.manifest_entries == 48  # configured target size
        entries = [
            json.loads(line)
            for line in (first.run_dir / "training_manifest.jsonl").read_text().splitlines()
        ]
        pair_counts: dict[tuple[str, str], int] = {}
        for entry in entries:
            key = (entry["language"], entry["entity_id"])
            pair_counts[key] = pair_counts.get(key, 0) + 1
        assert max(pair_counts.values()) - min(pair_counts.values()) <= 1

        # stops exactly at the first scripted loss below the threshold
        with (config.finetune.losses_file).open(encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        first_below = next(int(r["step"]) for r in rows if float(r["loss"]) < 0.01)
        assert first.stop_step == first_below
        logged = (first.run_dir / "finetune" / "losses.csv").read_text().strip().splitlines()
        assert len(logged) - 1 == first_below  # header + steps until stop

        # relative-gain arithmetic matches hand recomputation of the fixture
        expected = {
            "ENGLISH_ONLY": (6 / 8, 7 / 8),
            "MULTILINGUAL_WITH_ENGLISH": (4 / 8, 6 / 8),
            "NON_ENGLISH": (2 / 8, 6 / 8),
        }
        for group in first.report.groups:
            base_accuracy, ft_accuracy = expected[group.group_key]
            assert group.base_accuracy == pytest.approx(base_accuracy, abs=1e-12)
            assert group.finetuned_accuracy == pytest.approx(ft_accuracy, abs=1e-12)
            hand_gain = (ft_accuracy - base_accuracy) / base_accuracy
            assert group.relative_gain == pytest.approx(hand_gain, rel=1e-12)

        # the worked example: 0.30 -> 0.648 is a 116% relative gain
        base_rows = [ScoredRecord(f"r{i}", "g", i < 75) for i in range(250)]
        ft_rows = [ScoredRecord(f"r{i}", "g", i < 162) for i in range(250)]
        report = compare(base_rows, ft_rows, resamples=200, seed=0)
        assert report.groups[0].base_accuracy == pytest.approx(0.30)
        assert report.groups[0].finetuned_accuracy == pytest.approx(0.648)
        assert report.groups[0].relative_gain == pytest.approx(1.16, rel=1e-9)


# --- 8. regression correctness --------------------------------------------------

def test_regression_correctness():
    with criterion("OOD regression correctness", 10.0):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(5, 80))
            xs = rng.uniform(0.05, 0.95, size=n)
            ys = 0.3 - 0.4 * xs + rng.normal(0, 0.15, size=n)
            points = list(zip(xs.tolist(), ys.tolist()))
            fit = ood_regression(points)
            design = np.column_stack([np.ones(n), xs])
            intercept, slope = np.linalg.solve(design.T @ design, design.T @ ys)
            predictions = design @ np.array([intercept, slope])
            ssr = float(np.sum((ys - predictions) ** 2))
            sst = float(np.sum((ys - ys.mean()) ** 2))
            assert fit.slope == pytest.approx(float(slope), abs=1e-9)
            assert fit.intercept == pytest.approx(float(intercept), abs=1e-9)
            assert fit.r_squared == pytest.approx(1.0 - ssr / sst, abs=1e-9)

        exact = ood_regression([(x / 7, 0.9 - 0.2 * x / 7) for x in range(7)])
        assert exact.r_squared == pytest.approx(1.0, abs=1e-12)

        fixture = read_regression_points(DATA / "fixtures" / "ood_per_speaker.csv")
        fit = ood_regression(fixture)
        assert fit.slope < 0  # worse baselines improve the most
        assert fit.p_value < 0.001


# --- 9. cache idempotence --------------------------------------------------------

def test_cache_idempotence(tmp_path):
    with criterion("eval-run cache idempotence", 10.0):
        base_config = validate_config(PACKAGED_DRYRUN_CONFIG)
        config = dataclasses.replace(
            base_config, run_dir=tmp_path / "runs", cache_dir=tmp_path / "cache"
        )
        first = pipeline.eval_run(config, offline=True)
        assert first.backend_invocations == 48
        second = pipeline.eval_run(config, offline=True)
        assert second.backend_invocations == 0
        first_bytes = (first.run_dir / "transcripts.jsonl").read_bytes()
        second_bytes = (second.run_dir / "transcripts.jsonl").read_bytes()
        assert first_bytes == second_bytes
