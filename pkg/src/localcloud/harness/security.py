"""Scripted attacks against a running cloud, one per threat row.

Each row either PASSes (the mitigation held), FAILs (the attack worked or
the cloud answered unexpectedly) or is OUT-OF-SCOPE because the mitigation
lives outside the cloud (provider side or certification programmes).
"""

from __future__ import annotations

import hashlib
import json
import shutil
import socket
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional
from urllib.parse import urlsplit

from .. import errors
from ..agent import DeviceAgent, HostedManifest, HostedSystem, ProvidedService
from ..agent.secure_element import DEVICE_SLOT, MANUFACTURER_SLOT, ONBOARDING_SLOT, system_slot
from ..authorization import AuditLog
from ..context import CORE_SYSTEMS, DEVICE_REGISTRY, SERVICE_REGISTRY, SYSTEM_REGISTRY
from ..pki import build_csr, generate_keypair, unb64
from .cloud import LocalCloud

ROWS = ("S01", "T01", "T02", "T03", "T04", "R01", "I01", "I02", "I03", "E01", "E02")
OUT_OF_SCOPE = {
    "T03": "provider-side mitigation",
    "I03": "at-rest protection is provider-side",
    "E02": "covered by certification (MSCV), not the cloud",
}
ERROR_FIELDS = {"errorCode", "errorMessage", "success"}
PASS, FAIL, SKIP = "PASS", "FAIL", "OUT-OF-SCOPE"

PROBE_DEVICE = "probe"
PROBE_SYSTEM = "prober"
PROBE_SERVICE = "probe-echo"

# what must never show up in an error body
LEAK_MARKERS = (b"Traceback", b'File "', b"-----BEGIN", b"PRIVATE KEY", b"sqlite3.", b"site-packages")


@dataclass
class RowResult:
    row: str
    verdict: str
    detail: str = ""

    def to_dict(self) -> dict:
        return {"row": self.row, "verdict": self.verdict, "detail": self.detail}


class SecuritySuite:
    def __init__(self, cloud: LocalCloud, workdir: Optional[Path] = None):
        self.cloud = cloud
        self.workdir = Path(workdir or Path(cloud.config.data_dir) / "security")
        self.probe: Optional[DeviceAgent] = None

    # -- fixtures -----------------------------------------------------------

    def _url(self, system: str) -> str:
        return self.cloud.endpoints[system]

    def _peer(self, system: str) -> str:
        return self.cloud.core_cn(system)

    def _setup(self) -> DeviceAgent:
        shutil.rmtree(self.workdir, ignore_errors=True)
        manifest = HostedManifest(
            PROBE_DEVICE,
            "02:00:00:00:5e:c0",
            (HostedSystem(PROBE_SYSTEM, provides=(ProvidedService(PROBE_SERVICE, "/probe/echo"),)),),
        )
        agent = self.cloud.new_agent(PROBE_DEVICE, self.workdir / PROBE_DEVICE)
        agent.provide(PROBE_SYSTEM, PROBE_SERVICE, lambda body, claims: {"echo": body})
        agent.run_onboarding(manifest, "manufacturer")
        self.cloud.add_authorization_rule(PROBE_SYSTEM, PROBE_SYSTEM, PROBE_SERVICE)
        return agent

    def _teardown(self) -> None:
        self.cloud.remove_authorization_rule(PROBE_SYSTEM, PROBE_SYSTEM, PROBE_SERVICE)
        if self.probe is not None:
            try:
                self.probe.deregister_all()
            finally:
                self.probe.shutdown()

    def _attempt(self, call: Callable[[], object]) -> Optional[errors.LocalCloudError]:
        """Run an attack; return the error it provoked or None if it went through."""
        try:
            call()
        except errors.LocalCloudError as exc:
            return exc
        return None

    def _intruder_csr(self, name: str) -> str:
        return build_csr(f"{name}.{self.cloud.config.cloud_name}", generate_keypair(self.cloud.config.key_algorithm)).encode()

    # -- rows -----------------------------------------------------------------

    def spoofing(self) -> RowResult:
        """A legitimately onboarded device asks for a Device certificate in someone else's name."""
        client = self.probe.client(ONBOARDING_SLOT)
        body = {"deviceName": "victim", "macAddress": "02:00:00:00:00:99", "certificateSigningRequest": self._intruder_csr("victim")}
        exc = self._attempt(
            lambda: client.post(
                self._url(DEVICE_REGISTRY) + "/device-registry/onboarding/csr", body, expect_peer=self._peer(DEVICE_REGISTRY)
            )
        )
        if isinstance(exc, errors.OwnershipMismatch):
            return RowResult("S01", PASS, "device onboarding under a foreign name refused")
        return RowResult("S01", FAIL, f"spoofed onboarding answered with {exc.code if exc else 'success'}")

    def tampering_input(self) -> RowResult:
        """Structurally malformed payloads at every registry."""
        client = self.probe.client(system_slot(PROBE_SYSTEM))
        cases = [
            (SERVICE_REGISTRY, "/service-registry/register", None, b"{not json"),
            (SERVICE_REGISTRY, "/service-registry/register", [1, 2, 3], None),
            (SERVICE_REGISTRY, "/service-registry/register", {"serviceDefinition": "x" * 5000}, None),
            (SERVICE_REGISTRY, "/service-registry/query", {"validOnly": "yes"}, None),
            (SYSTEM_REGISTRY, "/system-registry/query", {"metadata": {"k": 7}}, None),
            (DEVICE_REGISTRY, "/device-registry/query", {"unexpected": True}, None),
        ]
        return self._expect_rejected("T01", client, cases)

    def tampering_injection(self) -> RowResult:
        """Injection strings in names, URIs and query patterns."""
        client = self.probe.client(system_slot(PROBE_SYSTEM))
        base = {
            "systemName": PROBE_SYSTEM,
            "address": "127.0.0.1",
            "port": self.probe.ports[PROBE_SYSTEM],
            "serviceUri": "/probe/other",
        }
        cases = [
            (SERVICE_REGISTRY, "/service-registry/register", {**base, "serviceDefinition": "x'; DROP TABLE services;--"}, None),
            (SERVICE_REGISTRY, "/service-registry/register", {**base, "serviceDefinition": "probe-two", "serviceUri": "/../../etc/passwd"}, None),
            (SERVICE_REGISTRY, "/service-registry/register", {**base, "serviceDefinition": "probe-three", "address": "evil.example\r\nX-Injected: 1"}, None),
            (DEVICE_REGISTRY, "/device-registry/query", {"namePattern": "' OR '1'='1"}, None),
            (SYSTEM_REGISTRY, "/system-registry/query", {"namePattern": "%"}, None),
        ]
        before = self.cloud.registry_counts()
        result = self._expect_rejected("T04", client, cases)
        after = self.cloud.registry_counts()
        if result.verdict == PASS and after != before:
            return RowResult("T04", FAIL, f"registry contents changed: {before} -> {after}")
        return result

    def _expect_rejected(self, row: str, client, cases) -> RowResult:
        for system, path, body, raw in cases:
            exc = self._attempt(
                lambda: client.post(self._url(system) + path, body, raw_body=raw, expect_peer=self._peer(system))
            )
            if not isinstance(exc, errors.MalformedRequest):
                got = exc.code if exc else "success"
                return RowResult(row, FAIL, f"{path} {json.dumps(body)[:60] if body else raw!r} answered with {got}")
        return RowResult(row, PASS, f"{len(cases)} payloads rejected as malformed")

    def key_export(self) -> RowResult:
        se = self.probe.se
        if self._attempt(lambda: se.export(MANUFACTURER_SLOT)) is None:
            return RowResult("T02", FAIL, "manufacturer key was exported")
        if self._attempt(lambda: se.import_key(MANUFACTURER_SLOT, b"")) is None:
            return RowResult("T02", FAIL, "manufacturer key was overwritten")
        mode = se.key_path(MANUFACTURER_SLOT).stat().st_mode & 0o077
        if mode:
            return RowResult("T02", FAIL, f"key file readable by others (mode {oct(mode)})")
        return RowResult("T02", PASS, "export and overwrite of the protected key refused")

    def repudiation(self) -> RowResult:
        """Every token the orchestrator hands out has a signed, chained audit record."""
        tokens = []
        for _ in range(3):
            found = self.probe.orchestrate(PROBE_SYSTEM, PROBE_SERVICE)
            tokens += [r["authorizationToken"] for r in found if r.get("authorizationToken")]
        if len(tokens) != 3:
            return RowResult("R01", FAIL, f"expected 3 tokens, got {len(tokens)}")
        audit = self.cloud.audit_records()
        keys = {kid: unb64(v) for kid, v in audit["keys"].items()}
        records = audit["records"]
        bad = AuditLog.verify_records(records, keys)
        if bad:
            return RowResult("R01", FAIL, f"audit records {bad} fail verification")
        logged = {r.get("token_sha256") for r in records if r.get("event") == "token-issued"}
        missing = [t for t in tokens if hashlib.sha256(t.encode()).hexdigest() not in logged]
        if missing:
            return RowResult("R01", FAIL, f"{len(missing)} issued tokens have no audit record")
        return RowResult("R01", PASS, f"{len(records)} signed records, chain intact")

    def error_leakage(self) -> RowResult:
        """Byte-scan every error body this suite provoked."""
        bodies = [x.response for x in self.probe.exchanges if x.status >= 400]
        if not bodies:
            return RowResult("I01", FAIL, "no error responses were captured")
        markers = LEAK_MARKERS + (str(Path(self.cloud.config.data_dir).resolve()).encode(),)
        for body in bodies:
            for marker in markers:
                if marker in body:
                    return RowResult("I01", FAIL, f"error body contains {marker!r}")
            try:
                parsed = json.loads(body)
            except ValueError:
                return RowResult("I01", FAIL, "error body is not JSON")
            if not {"errorCode", "errorMessage"} <= set(parsed) <= ERROR_FIELDS:
                return RowResult("I01", FAIL, f"unexpected error fields {sorted(parsed)}")
        return RowResult("I01", PASS, f"{len(bodies)} error bodies clean")

    def plaintext(self) -> RowResult:
        for system in CORE_SYSTEMS:
            parts = urlsplit(self._url(system))
            try:
                with socket.create_connection((parts.hostname, parts.port), timeout=3) as sock:
                    sock.sendall(b"GET /health HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n")
                    reply = sock.recv(64)
            except OSError:
                reply = b""
            if reply.startswith(b"HTTP/"):
                return RowResult("I02", FAIL, f"{system} answered plaintext HTTP")
        return RowResult("I02", PASS, "no core system speaks plaintext")

    def elevation(self) -> RowResult:
        """Certificates of the wrong ladder level against registry functions."""
        attempts = [
            (
                self.probe.client(ONBOARDING_SLOT),
                DEVICE_REGISTRY,
                "/device-registry/register",
                {"deviceName": "intruder", "macAddress": "02:00:00:00:00:98"},
            ),
            (
                self.probe.client(system_slot(PROBE_SYSTEM)),
                DEVICE_REGISTRY,
                "/device-registry/onboarding/csr",
                {"deviceName": "intruder", "macAddress": "02:00:00:00:00:97", "certificateSigningRequest": self._intruder_csr("intruder")},
            ),
            (
                self.probe.client(DEVICE_SLOT),
                SERVICE_REGISTRY,
                "/service-registry/register",
                {
                    "serviceDefinition": "sneaky",
                    "systemName": PROBE_SYSTEM,
                    "address": "127.0.0.1",
                    "port": self.probe.ports[PROBE_SYSTEM],
                    "serviceUri": "/probe/sneaky",
                },
            ),
        ]
        for client, system, path, body in attempts:
            exc = self._attempt(lambda: client.post(self._url(system) + path, body, expect_peer=self._peer(system)))
            if not isinstance(exc, errors.WrongCertificateKind):
                kind = client.identity.kind.value if client.identity else "none"
                return RowResult("E01", FAIL, f"{kind} certificate at {path} answered with {exc.code if exc else 'success'}")
        return RowResult("E01", PASS, f"{len(attempts)} wrong-kind calls denied")

    # -- driver -----------------------------------------------------------------

    def run(self) -> dict[str, RowResult]:
        self.probe = self._setup()
        checks = {
            "S01": self.spoofing,
            "T01": self.tampering_input,
            "T02": self.key_export,
            "T04": self.tampering_injection,
            "R01": self.repudiation,
            "E01": self.elevation,
            "I02": self.plaintext,
            "I01": self.error_leakage,  # last: scans what the others provoked
        }
        results: dict[str, RowResult] = {}
        try:
            for row, check in checks.items():
                try:
                    results[row] = check()
                except Exception as exc:  # an unexpected crash is a failed row, not a crashed suite
                    results[row] = RowResult(row, FAIL, f"attack could not run: {exc!r}")
        finally:
            self._teardown()
        for row, reason in OUT_OF_SCOPE.items():
            results[row] = RowResult(row, SKIP, reason)
        return {row: results[row] for row in ROWS}


def security_suite(cloud: LocalCloud, workdir: Optional[Path] = None) -> dict[str, RowResult]:
    return SecuritySuite(cloud, workdir).run()


def suite_passed(matrix: dict[str, RowResult]) -> bool:
    return set(matrix) == set(ROWS) and all(r.verdict in (PASS, SKIP) for r in matrix.values())
