"""Client-side onboarding state machine run by a (simulated) device.

The agent walks the thirteen steps of the automated onboarding sequence:
obtain an Onboarding certificate and the core endpoints from the Onboarding
Controller, trade it for a Device certificate at the DeviceRegistry, trade
that for one System certificate per hosted system at the SystemRegistry,
and finally register every provided service.  Each step boundary is a hook
for fault injection.  A failure rolls back whatever was registered and
drops the agent to ``DISCONNECTED``.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import threading
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Optional

from .. import errors, naming
from ..authorization import token_verify
from ..context import (
    AUTHORIZATION,
    CONTROLLER,
    DEVICE_REGISTRY,
    ORCHESTRATOR,
    SERVICE_REGISTRY,
    SYSTEM_REGISTRY,
    core_common_name,
)
from ..events import EventLog
from ..messages import CertificateGrant, OnboardingResponse
from ..onboarding import basic_auth_header
from ..pki import (
    Certificate,
    CertificateKind,
    TrustStore,
    load_pem_chain,
    pem_chain,
    utcnow,
    verify_chain,
)
from ..transport import Exchange, HttpsClient, Request, TlsServer
from .manifest import HostedManifest, HostedSystem, ProvidedService
from .secure_element import (
    ARROWHEAD_SLOT,
    DEVICE_SLOT,
    MANUFACTURER_SLOT,
    ONBOARDING_SLOT,
    SecureElement,
    system_slot,
)

logger = logging.getLogger(__name__)

STEPS = {
    1: "onboarding-request",
    2: "onboarding-certificate",
    3: "core-endpoints",
    4: "persist-onboarding",
    5: "device-onboard-request",
    6: "device-authenticated",
    7: "device-certificate",
    8: "device-registered",
    9: "system-onboard-request",
    10: "system-authenticated",
    11: "system-certificate",
    12: "system-registered",
    13: "service-register",
}


class AgentState(str, Enum):
    DISCONNECTED = "disconnected"
    ONBOARDED = "onboarded"
    DEVICE_REGISTERED = "device-registered"
    SYSTEMS_REGISTERED = "systems-registered"
    SERVICES_REGISTERED = "services-registered"
    OPERATIONAL = "operational"
    DEREGISTERED = "deregistered"

    @property
    def rank(self) -> int:
        return list(AgentState).index(self)


# the certificate kind an agent must hold in each state
STATE_KINDS = {
    AgentState.ONBOARDED: CertificateKind.ONBOARDING,
    AgentState.DEVICE_REGISTERED: CertificateKind.DEVICE,
    AgentState.SYSTEMS_REGISTERED: CertificateKind.SYSTEM,
    AgentState.SERVICES_REGISTERED: CertificateKind.SYSTEM,
    AgentState.OPERATIONAL: CertificateKind.SYSTEM,
}


class CredentialType(str, Enum):
    MANUFACTURER = "manufacturer"
    ARROWHEAD = "arrowhead"
    SHARED_SECRET = "shared-secret"


class InjectedFault(Exception):
    """Raised by the fault-injection hook at a chosen step."""


class OnboardingAborted(Exception):
    code = "OnboardingAborted"

    def __init__(self, step: int, cause: BaseException):
        self.step = step
        self.cause = cause
        code = getattr(cause, "code", type(cause).__name__)
        super().__init__(f"onboarding aborted at step {step} ({STEPS[step]}): {code}: {cause}")


@dataclass
class AgentConfig:
    cloud_name: str
    controller_url: str
    trust_pem: bytes = field(repr=False)
    directory: Path
    key_algorithm: str = "ec-p256"
    flow: str = "csr"
    timeout: float = 10.0

    def __post_init__(self) -> None:
        naming.check_label(self.cloud_name, "cloud name")
        if self.flow not in ("csr", "name"):
            raise errors.BadConfig("flow must be 'csr' or 'name'")
        self.directory = Path(self.directory)


@dataclass
class Registration:
    level: str  # device | system | service
    key: dict[str, Any]
    slot: str

    @property
    def label(self) -> str:
        if self.level == "device":
            return f"device:{self.key['deviceName']}"
        if self.level == "system":
            return f"system:{self.key['systemName']}"
        return f"service:{self.key['serviceDefinition']}@{self.key['systemName']}"


ServiceHandler = Callable[[dict, dict], Any]

_FAILURE_STEP = {
    # (phase request step, error class) -> reported step
    (1, errors.CaUnavailable): 2,
    (1, errors.OrchestrationFailure): 3,
    (5, errors.CaUnavailable): 7,
    (5, errors.ChainError): 6,
    (5, errors.Unauthorized): 6,
    (9, errors.CaUnavailable): 11,
    (9, errors.ChainError): 10,
    (9, errors.Unauthorized): 10,
}


def failing_step(request_step: int, exc: BaseException) -> int:
    for (step, cls), reported in _FAILURE_STEP.items():
        if step == request_step and isinstance(exc, cls):
            return reported
    return request_step


class DeviceAgent:
    def __init__(
        self,
        name: str,
        config: AgentConfig,
        *,
        secure_element: Optional[SecureElement] = None,
        events: Optional[EventLog] = None,
        fault_at: Optional[int] = None,
    ):
        self.name = name
        self.config = config
        self.se = secure_element or SecureElement(config.directory / "se")
        self.events = events if events is not None else EventLog()
        self.fault_at = fault_at
        self.exchanges: list[Exchange] = []
        self.registrations: list[Registration] = []
        self.endpoints: dict[str, str] = {}
        self.manifest: Optional[HostedManifest] = None
        self.ports: dict[str, int] = {}
        self.step_seconds: dict[str, float] = {}
        self.last_report: dict[str, str] = {}
        self._state = AgentState.DISCONNECTED
        self._clients: dict[Optional[str], HttpsClient] = {}
        self._servers: dict[str, TlsServer] = {}
        self._handlers: dict[tuple[str, str], ServiceHandler] = {}
        self._authorization_url: Optional[str] = None
        self._current_step = 0
        self.last_token: Optional[str] = None
        self._lock = threading.RLock()
        self._anchors = TrustStore([c for c in load_pem_chain(config.trust_pem) if c.is_self_signed])
        self._load_state()

    # -- state ----------------------------------------------------------------

    @property
    def state(self) -> AgentState:
        return self._state

    @property
    def state_path(self) -> Path:
        return self.config.directory / "state.json"

    def _transition(self, new: AgentState) -> None:
        old = self._state
        if new is not AgentState.DISCONNECTED and new.rank < old.rank:
            raise errors.InvalidRequest(f"illegal transition {old.value} -> {new.value}")
        kind = STATE_KINDS.get(new)
        if kind is not None:
            slot = {CertificateKind.ONBOARDING: ONBOARDING_SLOT, CertificateKind.DEVICE: DEVICE_SLOT}.get(kind)
            certs = [self.se.certificate(slot)] if slot else [
                self.se.certificate(system_slot(s.name)) for s in (self.manifest.systems if self.manifest else ())
            ]
            if any(c.kind is not kind for c in certs):
                raise errors.WrongCertificateKind(f"state {new.value} requires {kind.value} certificates")
        self._state = new
        self.events.emit(self.name, "state", outcome=new.value)

    def _save_state(self) -> None:
        self.config.directory.mkdir(parents=True, exist_ok=True)
        data = {
            "state": self._state.value,
            "endpoints": self.endpoints,
            "manifest": self.manifest.to_dict() if self.manifest else None,
            "registrations": [asdict(r) for r in self.registrations],
            "ports": self.ports,
        }
        tmp = self.state_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(data, indent=2, sort_keys=True))
        tmp.replace(self.state_path)

    def _load_state(self) -> None:
        if not self.state_path.exists():
            return
        data = json.loads(self.state_path.read_text())
        self._state = AgentState(data["state"])
        self.endpoints = dict(data.get("endpoints") or {})
        self.manifest = HostedManifest.from_dict(data["manifest"]) if data.get("manifest") else None
        self.registrations = [Registration(**r) for r in data.get("registrations", [])]
        self.ports = {k: int(v) for k, v in (data.get("ports") or {}).items()}

    def _clear_state(self) -> None:
        self.state_path.unlink(missing_ok=True)

    # -- plumbing -------------------------------------------------------------

    def _record(self, exchange: Exchange) -> None:
        with self._lock:
            self.exchanges.append(exchange)

    def client(self, slot: Optional[str]) -> HttpsClient:
        with self._lock:
            if slot not in self._clients:
                identity = self.se.certificate(slot) if slot else None
                self._clients[slot] = HttpsClient(
                    self.se.client_context(slot, self.config.trust_pem),
                    identity=identity,
                    timeout=self.config.timeout,
                    recorder=self._record,
                )
            return self._clients[slot]

    def _forget_client(self, slot: str) -> None:
        with self._lock:
            self._clients.pop(slot, None)

    def core_cn(self, system: str) -> str:
        return core_common_name(system, self.config.cloud_name)

    @property
    def device_cn(self) -> str:
        assert self.manifest is not None
        return naming.device_common_name(self.manifest.device_name, self.config.cloud_name)

    def system_cn(self, system: str) -> str:
        assert self.manifest is not None
        return naming.system_common_name(system, self.manifest.device_name, self.config.cloud_name)

    def _step(self, index: int, endpoint: str = "", **detail: Any) -> None:
        self._current_step = index
        self.events.emit(self.name, STEPS[index], endpoint, "begin", index=index, **detail)
        if self.fault_at == index:
            self.fault_at = None
            raise InjectedFault(f"fault injected at step {index}")

    def _timed(self, label: str, started: float) -> None:
        self.step_seconds[label] = self.step_seconds.get(label, 0.0) + (time.perf_counter() - started)

    def _intermediates(self) -> list[Certificate]:
        if self.se.has_certificate(ONBOARDING_SLOT):
            return self.se.chain(ONBOARDING_SLOT)[1:]
        return []

    def _trust_pem(self) -> bytes:
        return self.config.trust_pem + pem_chain(self._intermediates())

    def _check_grant(self, grant: CertificateGrant, kind: CertificateKind, cn: str) -> None:
        cert = grant.certificate
        if cert.subject_common_name != cn:
            raise errors.BadCertificate(f"issued certificate names {cert.subject_common_name!r}, expected {cn!r}")
        identity = verify_chain(cert, grant.intermediate_chain, self._anchors, utcnow())
        if identity.kind is not kind:
            raise errors.WrongCertificateKind(f"expected a {kind.value} certificate, got {identity.kind.value}")

    def _new_key(self, slot: str) -> None:
        self.se.generate(slot, self.config.key_algorithm)
        self._forget_client(slot)

    def _install(self, slot: str, grant: CertificateGrant) -> None:
        if grant.private_key is not None:
            self.se.import_key(slot, grant.private_key)
        self.se.install_certificate(slot, [grant.certificate, *grant.intermediate_chain])
        self._forget_client(slot)

    # -- onboarding -----------------------------------------------------------

    def run_onboarding(
        self,
        manifest: HostedManifest,
        credential: CredentialType | str,
        secret: Optional[str] = None,
    ) -> AgentState:
        credential = CredentialType(credential)
        if self.manifest is not None and self.manifest != manifest and self._state is not AgentState.DISCONNECTED:
            raise errors.InvalidRequest("agent already onboarded with a different manifest")
        self.manifest = manifest
        if self._state.rank >= AgentState.SERVICES_REGISTERED.rank and self._state is not AgentState.DEREGISTERED:
            self._start_servers()
            self.events.emit(self.name, "resume", outcome=self._state.value)
            return self._state
        if self._state is AgentState.DEREGISTERED:
            self._reset()
        self._current_step = 0
        try:
            if self._state is AgentState.DISCONNECTED:
                self._onboard_with_controller(credential, secret)
            if self._state is AgentState.ONBOARDED:
                self._onboard_device()
            if self._state is AgentState.DEVICE_REGISTERED:
                for system in manifest.systems:
                    if not self._registered("system", system.name):
                        self._onboard_system(system)
                    else:
                        self._start_server(system)
                self._transition(AgentState.SYSTEMS_REGISTERED)
                self._save_state()
            if self._state is AgentState.SYSTEMS_REGISTERED:
                for system in manifest.systems:
                    for service in system.provides:
                        if not self._registered("service", service.service_definition, system.name):
                            self._register_service(system, service)
                self._transition(AgentState.SERVICES_REGISTERED)
                self._save_state()
        except OnboardingAborted:
            raise
        except BaseException as exc:
            step = failing_step(self._current_step or 1, exc)
            self.events.emit(self.name, STEPS[step], outcome="failed", index=step, error=getattr(exc, "code", type(exc).__name__))
            self._rollback()
            raise OnboardingAborted(step, exc) from exc
        self.events.emit(self.name, "onboarding-complete", outcome=self._state.value)
        return self._state

    def _registered(self, level: str, name: str, system: Optional[str] = None) -> bool:
        for r in self.registrations:
            if r.level != level:
                continue
            if level == "system" and r.key["systemName"] == name:
                return True
            if level == "service" and r.key["serviceDefinition"] == name and r.key["systemName"] == system:
                return True
        return False

    def _onboard_with_controller(self, credential: CredentialType, secret: Optional[str]) -> None:
        url = self.config.controller_url
        self._step(1, url, credential=credential.value)
        started = time.perf_counter()
        cn = self.device_cn
        headers: dict[str, str] = {}
        if credential is CredentialType.SHARED_SECRET:
            if not secret:
                raise errors.BadSecret("shared secret credential needs a secret")
            headers["Authorization"] = basic_auth_header(secret)
            client, family = self.client(None), "sharedsecret"
        else:
            slot = MANUFACTURER_SLOT if credential is CredentialType.MANUFACTURER else ARROWHEAD_SLOT
            client, family = self.client(slot), "certificate"
        if self.config.flow == "name":
            path, body = f"/onboarding/{family}/name", {"commonName": cn}
        else:
            self._new_key(ONBOARDING_SLOT)
            path, body = f"/onboarding/{family}/csr", {"certificateSigningRequest": self.se.csr(ONBOARDING_SLOT, cn).encode()}
        raw = client.post(url + path, body, headers=headers, expect_peer=self.core_cn(CONTROLLER))
        try:
            response = OnboardingResponse.from_wire(raw)
        except ValueError as exc:
            raise errors.MalformedRequest(str(exc)) from None
        self._timed("initialize-onboarding", started)

        self._step(2, url)
        self._check_grant(response.grant, CertificateKind.ONBOARDING, cn)

        self._step(3, url)
        for key, value in response.endpoints.items():
            if not value.startswith("https://"):
                raise errors.MalformedRequest(f"endpoint {key} is not https")

        self._step(4)
        started = time.perf_counter()
        self._install(ONBOARDING_SLOT, response.grant)
        self.endpoints = dict(response.endpoints)
        self._transition(AgentState.ONBOARDED)
        self._save_state()
        self._timed("persist-certificate", started)

    def _onboard_device(self) -> None:
        assert self.manifest is not None
        m = self.manifest
        url = self.endpoints["deviceRegistry"] + "/device-registry/onboarding/" + self.config.flow
        self._step(5, url)
        started = time.perf_counter()
        body: dict[str, Any] = {"deviceName": m.device_name, "macAddress": naming.format_mac(m.mac_address), "metadata": dict(m.metadata)}
        if m.address is not None:
            body["address"] = m.address
        if self.config.flow == "csr":
            self._new_key(DEVICE_SLOT)
            body["certificateSigningRequest"] = self.se.csr(DEVICE_SLOT, self.device_cn).encode()
        raw = self.client(ONBOARDING_SLOT).post(url, body, expect_peer=self.core_cn(DEVICE_REGISTRY))
        grant = CertificateGrant.from_wire(raw, "deviceCertificate")
        self._install(DEVICE_SLOT, grant)
        self.registrations.append(
            Registration("device", {"deviceName": m.device_name, "macAddress": naming.format_mac(m.mac_address)}, DEVICE_SLOT)
        )
        self._save_state()
        self._timed("device-registration", started)
        self._step(6, url)
        self._step(7, url)
        self._check_grant(grant, CertificateKind.DEVICE, self.device_cn)
        self._step(8, url)
        started = time.perf_counter()
        self._transition(AgentState.DEVICE_REGISTERED)
        self._save_state()
        self._timed("persist-certificate", started)

    def _bind(self, system: HostedSystem) -> TlsServer:
        server = self._servers.get(system.name)
        if server is None:
            port = self.ports.get(system.name, system.port)
            server = TlsServer({}, None, system.address, port, f"{self.name}/{system.name}")
            server.routes.update(self._routes_for(system))
            self._servers[system.name] = server
            self.ports[system.name] = server.port
        return server

    def _start_server(self, system: HostedSystem) -> None:
        server = self._bind(system)
        slot = system_slot(system.name)
        if not server.running and self.se.has_certificate(slot):
            server.set_context(self.se.server_context(slot, self._trust_pem()))
            server.start()

    def _start_servers(self) -> None:
        assert self.manifest is not None
        for system in self.manifest.systems:
            self._start_server(system)

    def _onboard_system(self, system: HostedSystem) -> None:
        assert self.manifest is not None
        m = self.manifest
        slot = system_slot(system.name)
        url = self.endpoints["systemRegistry"] + "/system-registry/onboarding/" + self.config.flow
        self._step(9, url, system=system.name)
        started = time.perf_counter()
        server = self._bind(system)
        body: dict[str, Any] = {
            "systemName": system.name,
            "address": system.address,
            "port": server.port,
            "provider": {"deviceName": m.device_name, "macAddress": naming.format_mac(m.mac_address)},
            "metadata": dict(system.metadata),
        }
        if self.config.flow == "csr":
            self._new_key(slot)
            body["certificateSigningRequest"] = self.se.csr(slot, self.system_cn(system.name)).encode()
        raw = self.client(DEVICE_SLOT).post(url, body, expect_peer=self.core_cn(SYSTEM_REGISTRY))
        grant = CertificateGrant.from_wire(raw, "systemCertificate")
        self._install(slot, grant)
        self.registrations.append(
            Registration("system", {"systemName": system.name, "address": system.address, "port": server.port}, slot)
        )
        self._save_state()
        self._timed("system-registration", started)
        self._step(10, url, system=system.name)
        self._step(11, url, system=system.name)
        self._check_grant(grant, CertificateKind.SYSTEM, self.system_cn(system.name))
        self._step(12, url, system=system.name)
        started = time.perf_counter()
        self._start_server(system)
        self._timed("persist-certificate", started)

    def _register_service(self, system: HostedSystem, service: ProvidedService) -> None:
        slot = system_slot(system.name)
        url = self.endpoints["serviceRegistry"] + "/service-registry/register"
        self._step(13, url, system=system.name, service=service.service_definition)
        started = time.perf_counter()
        port = self.ports[system.name]
        self.client(slot).post(
            url,
            {
                "serviceDefinition": service.service_definition,
                "providerSystem": {"systemName": system.name, "address": system.address, "port": port},
                "serviceUri": service.service_uri,
                "interfaces": list(service.interfaces),
                "metadata": dict(service.metadata),
            },
            expect_peer=self.core_cn(SERVICE_REGISTRY),
        )
        self.registrations.append(
            Registration(
                "service",
                {
                    "serviceDefinition": service.service_definition,
                    "systemName": system.name,
                    "address": system.address,
                    "port": port,
                },
                slot,
            )
        )
        self._save_state()
        self._timed("service-registration", started)

    # -- rollback and deregistration -----------------------------------------------

    def _unregister(self, reg: Registration) -> None:
        client = self.client(reg.slot)
        k = reg.key
        if reg.level == "service":
            client.delete(
                self.endpoints["serviceRegistry"] + "/service-registry/unregister",
                query={"address": k["address"], "port": k["port"], "serviceDefinition": k["serviceDefinition"], "systemName": k["systemName"]},
                expect_peer=self.core_cn(SERVICE_REGISTRY),
            )
        elif reg.level == "system":
            client.delete(
                self.endpoints["systemRegistry"] + "/system-registry/unregister",
                query={"systemName": k["systemName"], "address": k["address"], "port": k["port"]},
                expect_peer=self.core_cn(SYSTEM_REGISTRY),
            )
        else:
            client.delete(
                self.endpoints["deviceRegistry"] + "/device-registry/unregister",
                query={"deviceName": k["deviceName"], "macAddress": k["macAddress"]},
                expect_peer=self.core_cn(DEVICE_REGISTRY),
            )

    def _unregister_all(self, step_name: str) -> dict[str, str]:
        report: dict[str, str] = {}
        for reg in reversed(self.registrations):
            outcome = "ok"
            for attempt in range(2):
                try:
                    self._unregister(reg)
                    outcome = "ok"
                    break
                except errors.NotFound as exc:
                    outcome = exc.code
                    break
                except errors.LocalCloudError as exc:
                    outcome = exc.code
            report[reg.label] = outcome
            self.events.emit(self.name, step_name, outcome=outcome, level=reg.level, entry=reg.label)
        return report

    def _stop_servers(self) -> None:
        for server in self._servers.values():
            server.stop()
        self._servers.clear()

    def _rollback(self) -> None:
        try:
            self.last_report = self._unregister_all("rollback")
        finally:
            self._stop_servers()
            self.registrations.clear()
            self.endpoints = {}
            self.ports = {}
            self._clients.clear()
            self._state = AgentState.DISCONNECTED
            self.events.emit(self.name, "state", outcome=AgentState.DISCONNECTED.value)
            self._clear_state()

    def _reset(self) -> None:
        self.registrations.clear()
        self.ports = {}
        self._clients.clear()
        self._state = AgentState.DISCONNECTED
        self._clear_state()

    def deregister_all(self) -> dict[str, str]:
        """Unregister services, then systems, then the device."""
        if self._state.rank < AgentState.DEVICE_REGISTERED.rank:
            raise errors.InvalidRequest(f"nothing to deregister in state {self._state.value}")
        started = time.perf_counter()
        report = self._unregister_all("unregister")
        self._stop_servers()
        if self._state is not AgentState.DEREGISTERED:
            self._transition(AgentState.DEREGISTERED)
        self._save_state()
        self._timed("deregistration", started)
        self.last_report = report
        return report

    def shutdown(self) -> None:
        self._stop_servers()

    # -- operation ----------------------------------------------------------------

    def provide(self, system: str, service_definition: str, handler: ServiceHandler) -> None:
        """Attach application logic to a service the manifest declares."""
        self._handlers[(system, service_definition)] = handler

    def _routes_for(self, system: HostedSystem) -> dict:
        routes: dict = {("GET", "/health"): lambda req: {"status": "ready", "system": system.name}}
        for service in system.provides:
            routes[("POST", service.service_uri)] = self._provider_route(system.name, service.service_definition)
        return routes

    def authorization_key(self, consumer_system: str) -> str:
        """Current token-verification key, fetched fresh from the Authorization system."""
        client = self.client(system_slot(consumer_system))
        if self._authorization_url is None:
            found = self.orchestrate(consumer_system, "authorization-control", dynamic=False)
            self._authorization_url = found[0]["endpoint"]
        body = client.get(self._authorization_url + "/authorization/publickey", expect_peer=self.core_cn(AUTHORIZATION))
        return body["publicKey"]

    def _provider_route(self, system: str, definition: str):
        def handle(req: Request):
            if req.peer is None:
                raise errors.Unauthenticated("client certificate required")
            try:
                identity = verify_chain(req.peer, self._intermediates(), self._anchors, utcnow())
            except (errors.ChainError, errors.ForbiddenKindTransition) as exc:
                raise errors.ChainInvalid(str(exc)) from None
            if identity.kind is not CertificateKind.SYSTEM:
                raise errors.WrongCertificateKind("a System certificate is required")
            header = req.headers.get("authorization", "")
            token = header[7:] if header.startswith("Bearer ") else ""
            verdict = token_verify(token, system, definition, self.authorization_key(system), dt.datetime.now(dt.timezone.utc))
            if not verdict.accepted:
                self.events.emit(self.name, "token-rejected", definition, verdict.reason)
                raise errors.ProviderRejectedToken(f"token rejected: {verdict.reason}")
            if verdict.claims.get("cns") and verdict.claims["cns"] != identity.common_name:
                raise errors.ProviderRejectedToken("token rejected: holder-mismatch")
            handler = self._handlers.get((system, definition))
            if handler is None:
                raise errors.NotFound(f"service {definition!r} has no handler")
            body = req.json() if req.body else {}
            return handler(body, verdict.claims)

        return handle

    def orchestrate(self, system: str, service_definition: str, dynamic: bool = True) -> list[dict]:
        client = self.client(system_slot(system))
        body = client.post(
            self.endpoints["orchestrator"] + "/orchestrator/orchestration",
            {"requestedService": service_definition, "consumerSystem": {"systemName": system}, "flags": {"dynamic": dynamic}},
            expect_peer=self.core_cn(ORCHESTRATOR),
        )
        return body.get("response", [])

    def operate(self, system: str, service_definition: str, payload: Optional[dict] = None, *, token: Optional[str] = None) -> Any:
        """Orchestrate, then call the chosen provider with the issued token."""
        if self._state not in (AgentState.SERVICES_REGISTERED, AgentState.OPERATIONAL):
            raise errors.InvalidRequest(f"cannot operate in state {self._state.value}")
        results = self.orchestrate(system, service_definition)
        if not results:
            raise errors.NoProviderFound(f"no provider for {service_definition!r}")
        chosen = results[0]
        bearer = token if token is not None else chosen.get("authorizationToken", "")
        self.events.emit(self.name, "consume", chosen["endpoint"], "begin", service=service_definition)
        response = self.client(system_slot(system)).post(
            chosen["endpoint"],
            payload or {},
            headers={"Authorization": f"Bearer {bearer}"},
            expect_peer=chosen.get("providerCommonName") or None,
        )
        self.events.emit(self.name, "consume", chosen["endpoint"], "ok", service=service_definition)
        if self._state is not AgentState.OPERATIONAL:
            self._transition(AgentState.OPERATIONAL)
            self._save_state()
        self.last_token = bearer
        return response
