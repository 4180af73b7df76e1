"""Smart electric-vehicle charging, run end to end against a live local cloud.

A charging station hosts one system offering ``charging-station-register``,
``charging-station-unregister`` and ``charge``.  An electric vehicle hosts one
system offering ``get-rfid``.  Per repetition both devices onboard from
scratch, the vehicle registers at the station, an RFID proximity event makes
the vehicle request ``charge`` with the tag it read, the station verifies the
tag by consuming ``get-rfid`` from the vehicle, charges for a fixed time, and
finally everything is unregistered.
"""

from __future__ import annotations

import json
import shutil
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .. import errors
from ..agent import DeviceAgent, HostedManifest, HostedSystem, ProvidedService
from ..events import EventLog
from .cloud import LocalCloud
from .measure import TimingBreakdown

STATION = "chargingstation"
VEHICLE = "evehicle"
STATION_SYSTEM = "station"
VEHICLE_SYSTEM = "vehicle"
SERVICES = ("charging-station-register", "charging-station-unregister", "charge", "get-rfid")


class ChargeRefused(errors.LocalCloudError):
    status = 403


def station_manifest() -> HostedManifest:
    return HostedManifest(
        STATION,
        "02:00:00:00:0c:01",
        (
            HostedSystem(
                STATION_SYSTEM,
                provides=(
                    ProvidedService("charging-station-register", "/station/register"),
                    ProvidedService("charging-station-unregister", "/station/unregister"),
                    ProvidedService("charge", "/station/charge"),
                ),
                consumes=("get-rfid",),
            ),
        ),
    )


def vehicle_manifest() -> HostedManifest:
    return HostedManifest(
        VEHICLE,
        "02:00:00:00:0e:01",
        (
            HostedSystem(
                VEHICLE_SYSTEM,
                provides=(ProvidedService("get-rfid", "/vehicle/rfid"),),
                consumes=("charging-station-register", "charging-station-unregister", "charge"),
            ),
        ),
    )


AUTHORIZATION_RULES = (
    (VEHICLE_SYSTEM, STATION_SYSTEM, "charging-station-register"),
    (VEHICLE_SYSTEM, STATION_SYSTEM, "charging-station-unregister"),
    (VEHICLE_SYSTEM, STATION_SYSTEM, "charge"),
    (STATION_SYSTEM, VEHICLE_SYSTEM, "get-rfid"),
)


class ChargingStation:
    """Application logic behind the station's three services."""

    def __init__(self, agent: DeviceAgent, events: EventLog, charge_ms: int):
        self.agent = agent
        self.events = events
        self.charge_ms = charge_ms
        self.vehicles: set[str] = set()
        self._lock = threading.Lock()
        agent.provide(STATION_SYSTEM, "charging-station-register", self.register)
        agent.provide(STATION_SYSTEM, "charging-station-unregister", self.unregister)
        agent.provide(STATION_SYSTEM, "charge", self.charge)

    def register(self, body: dict, claims: dict) -> dict:
        with self._lock:
            self.vehicles.add(claims["cns"])
        self.events.emit(STATION, "vehicle-registered", outcome="ok", vehicle=claims["cns"])
        return {"registered": True}

    def unregister(self, body: dict, claims: dict) -> dict:
        with self._lock:
            known = claims["cns"] in self.vehicles
            self.vehicles.discard(claims["cns"])
        if not known:
            raise errors.NotFound("vehicle is not registered at this station")
        self.events.emit(STATION, "vehicle-unregistered", outcome="ok", vehicle=claims["cns"])
        return {"unregistered": True}

    def charge(self, body: dict, claims: dict) -> dict:
        if claims["cns"] not in self.vehicles:
            raise ChargeRefused("vehicle is not registered at this station")
        presented = body.get("rfid")
        actual = self.agent.operate(STATION_SYSTEM, "get-rfid", {})["rfid"]
        if presented != actual:
            self.events.emit(STATION, "rfid-verification", outcome="failed")
            raise ChargeRefused("RFID tag does not match the requesting vehicle")
        self.events.emit(STATION, "rfid-verification", outcome="ok")
        start = self.events.emit(STATION, "charge-start")
        time.sleep(self.charge_ms / 1000.0)
        end = self.events.emit(STATION, "charge-end")
        return {"charged": True, "durationMs": (end.at_ns - start.at_ns) / 1e6}


@dataclass
class ScenarioReport:
    events: EventLog
    assertions: dict[str, bool] = field(default_factory=dict)
    failures: list[dict[str, Any]] = field(default_factory=list)
    timing: TimingBreakdown = field(default_factory=TimingBreakdown)
    registration_ms: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.assertions) and all(self.assertions.values())

    def check(self, name: str, ok: bool, detail: str = "", event_index: Optional[int] = None) -> bool:
        self.assertions[name] = self.assertions.get(name, True) and bool(ok)
        if not ok:
            index = len(self.events) - 1 if event_index is None else event_index
            self.failures.append({"assertion": name, "eventIndex": index, "detail": detail})
        return bool(ok)

    def to_dict(self) -> dict[str, Any]:
        return {
            "passed": self.passed,
            "assertions": self.assertions,
            "failures": self.failures,
            "timing": self.timing.to_dict(),
            "events": [json.loads(e.to_json()) for e in self.events],
        }

    def write(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _ordered_per_actor(events: EventLog) -> bool:
    last: dict[str, int] = {}
    for e in events:
        if e.at_ns <= last.get(e.actor, -1):
            return False
        last[e.actor] = e.at_ns
    return True


def _registration_ms(agent: DeviceAgent) -> float:
    labels = ("device-registration", "system-registration", "service-registration")
    return sum(agent.step_seconds.get(label, 0.0) for label in labels) * 1000.0


def run_smart_charging(
    cloud: LocalCloud,
    repetitions: int = 1,
    charge_ms: int = 1000,
    *,
    wrong_rfid: bool = False,
    event_path: Optional[Path] = None,
    credential: str = "manufacturer",
    jitter_ms: float = 50.0,
) -> ScenarioReport:
    """Run the scenario ``repetitions`` times; with ``wrong_rfid`` the vehicle lies about its tag."""
    events = EventLog(event_path)
    report = ScenarioReport(events)
    for consumer, provider, service in AUTHORIZATION_RULES:
        cloud.add_authorization_rule(consumer, provider, service)
    workdir = Path(cloud.config.data_dir) / "scenario"
    try:
        for rep in range(repetitions):
            _repetition(cloud, report, rep, charge_ms, wrong_rfid, workdir / f"rep-{rep}", credential, jitter_ms)
    finally:
        for consumer, provider, service in AUTHORIZATION_RULES:
            cloud.remove_authorization_rule(consumer, provider, service)
    report.check("events-ordered-per-actor", _ordered_per_actor(events))
    return report


def _repetition(
    cloud: LocalCloud,
    report: ScenarioReport,
    rep: int,
    charge_ms: int,
    wrong_rfid: bool,
    workdir: Path,
    credential: str,
    jitter_ms: float,
) -> None:
    events = report.events
    shutil.rmtree(workdir, ignore_errors=True)
    station = cloud.new_agent(STATION, workdir / STATION, credential=credential, events=events)
    vehicle = cloud.new_agent(VEHICLE, workdir / VEHICLE, credential=credential, events=events)
    app = ChargingStation(station, events, charge_ms)
    tag = f"rfid-{rep:04d}-ev"
    vehicle.provide(VEHICLE_SYSTEM, "get-rfid", lambda body, claims: {"rfid": tag})
    events.emit("harness", "repetition", outcome="begin", index=rep)

    started = time.perf_counter()
    try:
        station.run_onboarding(station_manifest(), credential)
        vehicle.run_onboarding(vehicle_manifest(), credential)
    except Exception as exc:
        report.check("onboarding", False, repr(exc))
        _cleanup(station, vehicle)
        return
    onboarded = time.perf_counter()
    report.check("onboarding", True)

    try:
        vehicle.operate(VEHICLE_SYSTEM, "charging-station-register", {"vehicle": VEHICLE})
        events.emit(VEHICLE, "rfid-proximity", outcome="ok")
        presented = "rfid-forged" if wrong_rfid else tag
        try:
            result = vehicle.operate(VEHICLE_SYSTEM, "charge", {"rfid": presented})
        except ChargeRefused as exc:
            refused = [e for e in events.events(STATION, "rfid-verification") if e.outcome == "failed"]
            events.emit(VEHICLE, "charge", outcome="refused")
            report.check("charge-accepted", False, str(exc), refused[-1].seq if refused else None)
        else:
            report.check("charge-accepted", result.get("charged") is True)
            start = events.events(STATION, "charge-start")[-1]
            end = events.events(STATION, "charge-end")[-1]
            elapsed_ms = (end.at_ns - start.at_ns) / 1e6
            report.check(
                "charge-duration",
                charge_ms <= elapsed_ms <= charge_ms + jitter_ms,
                f"charged for {elapsed_ms:.1f} ms",
            )
        vehicle.operate(VEHICLE_SYSTEM, "charging-station-unregister", {})
        report.check("operation", True)
    except errors.LocalCloudError as exc:
        report.check("operation", False, repr(exc))
    operated = time.perf_counter()

    dereg = _cleanup(station, vehicle)
    report.check("deregistration", all(v == "ok" for v in dereg.values()), json.dumps(dereg))
    finished = time.perf_counter()

    counts = cloud.registry_counts()
    report.check("registries-empty", not any(counts.values()), json.dumps(counts))
    report.timing.add((onboarded - started) * 1000, (operated - onboarded) * 1000, (finished - operated) * 1000)
    report.registration_ms.append(_registration_ms(station) + _registration_ms(vehicle))
    events.emit("harness", "repetition", outcome="end", index=rep)


def _cleanup(*agents: DeviceAgent) -> dict[str, str]:
    report: dict[str, str] = {}
    for agent in reversed(agents):
        try:
            for label, outcome in agent.deregister_all().items():
                report[f"{agent.name}:{label}"] = outcome
        except errors.InvalidRequest:
            pass
        finally:
            agent.shutdown()
    return report
