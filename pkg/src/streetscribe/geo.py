"""Geographic impact of mis-transcribed street names.

Turns (intended entity, transcribed text) pairs into routing distance
errors, then into per-trip fare and delay costs and city-scale annual
totals. Geocoding and routing are injected contracts; offline CSV stubs
ship with the package so the whole module runs without network access.
"""

from __future__ import annotations

import csv
import enum
import math
import threading
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

from .errors import GeocoderTransportError, RouterError, ValidationError

EARTH_RADIUS_MILES = 3958.7613


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self) -> None:
        if not -90.0 <= self.lat <= 90.0:
            raise ValidationError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValidationError(f"longitude {self.lon} outside [-180, 180]")


class ResolutionStatus(str, enum.Enum):
    RESOLVED = "RESOLVED"
    UNRESOLVED = "UNRESOLVED"


@dataclass(frozen=True)
class ResolutionOutcome:
    status: ResolutionStatus
    point: GeoPoint | None
    query: str

    def __post_init__(self) -> None:
        if (self.status == ResolutionStatus.RESOLVED) != (self.point is not None):
            raise ValidationError("point must be present iff RESOLVED")


class ImpactStatus(str, enum.Enum):
    OK = "OK"
    DROPPED_UNRESOLVED = "DROPPED_UNRESOLVED"
    DISCARDED_OVER_CAP = "DISCARDED_OVER_CAP"


@dataclass(frozen=True)
class FareModel:
    fare_per_increment_usd: float = 0.65
    increment_miles: float = 0.2
    speed_mph: float = 14.0
    cap_miles: float = 20.0

    def __post_init__(self) -> None:
        for name in ("fare_per_increment_usd", "increment_miles", "speed_mph", "cap_miles"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"FareModel.{name} must be strictly positive")


@dataclass(frozen=True)
class CityVolumeModel:
    voice_trips_per_weekday: int = 2000
    weekdays_per_year: int = 261
    mean_delay_minutes: float = 5.0
    mean_fare_usd: float = 4.0

    def __post_init__(self) -> None:
        if self.voice_trips_per_weekday < 0 or self.weekdays_per_year < 0:
            raise ValidationError("volume counts must be non-negative integers")


@dataclass(frozen=True)
class ImpactRecord:
    recording_id: str
    intended: ResolutionOutcome
    transcribed: ResolutionOutcome
    status: ImpactStatus
    distance_miles: float | None = None
    fare_usd: float | None = None
    delay_minutes: float | None = None
    distance_method: str | None = None

    def __post_init__(self) -> None:
        if self.status == ImpactStatus.OK:
            if self.distance_miles is None or self.fare_usd is None or self.delay_minutes is None:
                raise ValidationError("OK records carry distance, fare and delay")
        else:
            if self.distance_miles is not None:
                raise ValidationError(f"{self.status.value} records carry no distance")
        if self.status == ImpactStatus.DROPPED_UNRESOLVED:
            if (
                self.intended.status != ResolutionStatus.UNRESOLVED
                and self.transcribed.status != ResolutionStatus.UNRESOLVED
            ):
                raise ValidationError("DROPPED_UNRESOLVED requires an unresolved side")


class Geocoder(Protocol):
    def lookup(self, query: str) -> GeoPoint | None:
        """Resolve a textual query; None means no location found."""
        ...


class Router(Protocol):
    def distance_miles(self, origin: GeoPoint, destination: GeoPoint) -> float:
        ...


class StubGeocoder:
    """Offline geocoder backed by a `query,lat,lon` CSV (blank = unresolved)."""

    def __init__(self, table: dict[str, GeoPoint | None]) -> None:
        self._table = dict(table)
        self.calls = 0

    @classmethod
    def from_csv(cls, path: str | Path) -> "StubGeocoder":
        table: dict[str, GeoPoint | None] = {}
        with Path(path).open(encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames[:3]] != ["query", "lat", "lon"]:
                raise ValidationError(f"{path}: expected header 'query,lat,lon'")
            for row in reader:
                if row["lat"].strip() == "" or row["lon"].strip() == "":
                    table[row["query"]] = None
                else:
                    table[row["query"]] = GeoPoint(float(row["lat"]), float(row["lon"]))
        return cls(table)

    def lookup(self, query: str) -> GeoPoint | None:
        self.calls += 1
        return self._table.get(query)


class StubRouter:
    """Offline router backed by a `lat1,lon1,lat2,lon2,miles` CSV."""

    def __init__(self, table: dict[tuple[float, float, float, float], float]) -> None:
        self._table = dict(table)

    @classmethod
    def from_csv(cls, path: str | Path) -> "StubRouter":
        table: dict[tuple[float, float, float, float], float] = {}
        with Path(path).open(encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            expected = ["lat1", "lon1", "lat2", "lon2", "miles"]
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames[:5]] != expected:
                raise ValidationError(f"{path}: expected header '{','.join(expected)}'")
            for row in reader:
                key = (float(row["lat1"]), float(row["lon1"]), float(row["lat2"]), float(row["lon2"]))
                table[key] = float(row["miles"])
        return cls(table)

    def distance_miles(self, origin: GeoPoint, destination: GeoPoint) -> float:
        for key in (
            (origin.lat, origin.lon, destination.lat, destination.lon),
            (destination.lat, destination.lon, origin.lat, origin.lon),
        ):
            if key in self._table:
                return self._table[key]
        raise RouterError(f"no routed distance for {origin} -> {destination}")


class LiveGeocoder:
    """Optional network geocoder; never required by the acceptance suite.

    Expects a JSON endpoint answering GET {endpoint}?q=<query> with
    {"results": [{"lat": .., "lon": ..}, ...]}; an empty result list means
    the query is unresolved. The API key comes from the environment
    variable named in the run config and is sent as a bearer token.
    """

    def __init__(self, endpoint: str, credentials_env: str, timeout_s: float = 10.0) -> None:
        import os

        self.endpoint = endpoint
        self.timeout_s = timeout_s
        self._api_key = os.environ.get(credentials_env)
        if not self._api_key:
            raise ValidationError(f"geocoder credentials missing: {credentials_env} is not set")

    def lookup(self, query: str) -> GeoPoint | None:
        import json as _json
        import urllib.error
        import urllib.parse
        import urllib.request

        url = f"{self.endpoint}?q={urllib.parse.quote(query)}"
        request = urllib.request.Request(url, headers={"Authorization": f"Bearer {self._api_key}"})
        try:
            with urllib.request.urlopen(request, timeout=self.timeout_s) as response:
                body = _json.loads(response.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise GeocoderTransportError(str(exc)) from exc
        results = body.get("results", [])
        if not results:
            return None
        return GeoPoint(float(results[0]["lat"]), float(results[0]["lon"]))


def great_circle_miles(a: GeoPoint, b: GeoPoint) -> float:
    """Haversine distance in miles."""
    lat1, lon1, lat2, lon2 = map(math.radians, (a.lat, a.lon, b.lat, b.lon))
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_MILES * math.asin(math.sqrt(h))


class Resolver:
    """Query-level cache in front of a geocoder, with transient retries."""

    def __init__(
        self,
        geocoder: Geocoder,
        max_attempts: int = 3,
        sleeper: Callable[[float], None] | None = None,
        backoff_base_s: float = 0.2,
    ) -> None:
        self.geocoder = geocoder
        self.max_attempts = max_attempts
        self.backoff_base_s = backoff_base_s
        self._sleeper = sleeper or (lambda _s: None)
        self._cache: dict[str, GeoPoint | None] = {}
        self._lock = threading.Lock()

    def resolve(self, entity_text: str, city: str) -> ResolutionOutcome:
        if not city:
            raise ValidationError("city must be non-empty")
        query = f"{entity_text}, {city}"
        with self._lock:
            if query in self._cache:
                return _outcome(query, self._cache[query])
        point = self._lookup_with_retry(query)
        with self._lock:
            self._cache.setdefault(query, point)
        return _outcome(query, point)

    def _lookup_with_retry(self, query: str) -> GeoPoint | None:
        last: GeocoderTransportError | None = None
        for attempt in range(self.max_attempts):
            if attempt:
                self._sleeper(self.backoff_base_s * 2 ** (attempt - 1))
            try:
                return self.geocoder.lookup(query)
            except GeocoderTransportError as exc:
                last = exc
        assert last is not None
        raise last


def _outcome(query: str, point: GeoPoint | None) -> ResolutionOutcome:
    if point is None:
        return ResolutionOutcome(status=ResolutionStatus.UNRESOLVED, point=None, query=query)
    return ResolutionOutcome(status=ResolutionStatus.RESOLVED, point=point, query=query)


def resolve(entity_text: str, city: str, geocoder: Geocoder) -> ResolutionOutcome:
    """One-shot resolution without a shared cache; see Resolver for batches."""
    return Resolver(geocoder).resolve(entity_text, city)


def distance_error(
    recording_id: str,
    intended: ResolutionOutcome,
    transcribed: ResolutionOutcome,
    router: Router | None,
    fare_model: FareModel | None = None,
    circuity_multiplier: float = 1.0,
) -> ImpactRecord:
    """Classify one pair into OK / DROPPED_UNRESOLVED / DISCARDED_OVER_CAP.

    Falls back to great-circle distance (scaled by circuity_multiplier and
    flagged in distance_method) when no router is configured.
    """
    model = fare_model or FareModel()
    if model.cap_miles <= 0:
        raise ValidationError("cap_miles must be positive")
    if intended.status == ResolutionStatus.UNRESOLVED or transcribed.status == ResolutionStatus.UNRESOLVED:
        return ImpactRecord(
            recording_id=recording_id,
            intended=intended,
            transcribed=transcribed,
            status=ImpactStatus.DROPPED_UNRESOLVED,
        )
    assert intended.point is not None and transcribed.point is not None
    if router is not None:
        distance = router.distance_miles(intended.point, transcribed.point)
        method = "router"
    else:
        distance = great_circle_miles(intended.point, transcribed.point) * circuity_multiplier
        method = "great_circle"
    if distance > model.cap_miles:
        return ImpactRecord(
            recording_id=recording_id,
            intended=intended,
            transcribed=transcribed,
            status=ImpactStatus.DISCARDED_OVER_CAP,
        )
    fare, delay = trip_cost(distance, model)
    return ImpactRecord(
        recording_id=recording_id,
        intended=intended,
        transcribed=transcribed,
        status=ImpactStatus.OK,
        distance_miles=distance,
        fare_usd=fare,
        delay_minutes=delay,
        distance_method=method,
    )


def trip_cost(distance_miles: float, model: FareModel | None = None, ceil_increments: bool = False) -> tuple[float, float]:
    """Fare (USD) and delay (minutes) for one mis-routed trip.

    Fare is continuous by default, distance / increment * rate; set
    ceil_increments to bill whole fare increments instead.
    """
    model = model or FareModel()
    if distance_miles < 0:
        raise ValidationError("distance must be non-negative")
    increments = distance_miles / model.increment_miles
    if ceil_increments:
        increments = math.ceil(increments)
    fare = increments * model.fare_per_increment_usd
    delay = distance_miles / model.speed_mph * 60.0
    return fare, delay


def city_annual_impact(volume: CityVolumeModel) -> tuple[float, float]:
    """Annual (cumulative delay hours, total cost USD) at city scale."""
    trips = volume.voice_trips_per_weekday * volume.weekdays_per_year
    return trips * volume.mean_delay_minutes / 60.0, trips * volume.mean_fare_usd


@dataclass(frozen=True)
class GroupImpact:
    group_key: str
    n: int
    n_ok: int
    n_dropped: int
    n_discarded: int
    mean_distance_miles: float | None
    mean_fare_usd: float | None
    mean_delay_minutes: float | None


def impact_report(
    records: Sequence[ImpactRecord],
    group_of: Callable[[ImpactRecord], str],
) -> list[GroupImpact]:
    """Per-group means over OK records plus drop/discard counts.

    Dropped and discarded records never enter the means but are always
    counted, so per-group status counts sum to the group's record count.
    """
    buckets: dict[str, list[ImpactRecord]] = {}
    for record in records:
        buckets.setdefault(str(group_of(record)), []).append(record)
    report = []
    for group in sorted(buckets):
        group_records = buckets[group]
        ok = [r for r in group_records if r.status == ImpactStatus.OK]
        report.append(
            GroupImpact(
                group_key=group,
                n=len(group_records),
                n_ok=len(ok),
                n_dropped=sum(1 for r in group_records if r.status == ImpactStatus.DROPPED_UNRESOLVED),
                n_discarded=sum(1 for r in group_records if r.status == ImpactStatus.DISCARDED_OVER_CAP),
                mean_distance_miles=_mean([r.distance_miles for r in ok]),
                mean_fare_usd=_mean([r.fare_usd for r in ok]),
                mean_delay_minutes=_mean([r.delay_minutes for r in ok]),
            )
        )
    return report


def _mean(values: Iterable[float | None]) -> float | None:
    concrete = [v for v in values if v is not None]
    if not concrete:
        return None
    return sum(concrete) / len(concrete)


def write_impact_csv(report: Sequence[GroupImpact], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["group", "n", "n_ok", "n_dropped", "n_discarded",
             "mean_distance_miles", "mean_fare_usd", "mean_delay_minutes"]
        )
        for row in report:
            writer.writerow(
                [
                    row.group_key, row.n, row.n_ok, row.n_dropped, row.n_discarded,
                    _fmt(row.mean_distance_miles), _fmt(row.mean_fare_usd), _fmt(row.mean_delay_minutes),
                ]
            )


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.6f}"
