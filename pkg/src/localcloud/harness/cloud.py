"""Boot, supervise and tear down a complete local cloud.

In ``threads`` mode every core system is a :class:`TlsServer` inside this
process; in ``processes`` mode each one is a ``localcloud serve``
subprocess.  Either way they only talk to each other over mutual TLS.
"""

from __future__ import annotations

import json
import logging
import os
import socket
import subprocess
import sys
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from .. import errors
from ..agent import AgentConfig, DeviceAgent, SecureElement
from ..agent.secure_element import ARROWHEAD_SLOT, MANUFACTURER_SLOT
from ..authorization import AuthorizationRule, AuthorizationSystem, InterCloudRule
from ..certificate_authority import CertificateAuthoritySystem
from ..context import (
    AUTHORIZATION,
    CA,
    CONTROLLER,
    CORE_SYSTEMS,
    DEVICE_REGISTRY,
    ORCHESTRATOR,
    SERVICE_REGISTRY,
    SYSOP,
    SYSTEM_REGISTRY,
    CloudContext,
    core_common_name,
)
from ..events import EventLog
from ..onboarding import OnboardingController, SharedSecretStore
from ..orchestrator import OrchestrationRule, Orchestrator
from ..pki import Certificate, CertificateKind, load_pem_chain
from ..registries import DeviceRegistry, ServiceRegistry, SystemRegistry
from ..transport import HttpsClient, TlsServer
from .bootstrap import CloudPki, Manufacturer, ensure_pki
from .config import CloudConfig

logger = logging.getLogger(__name__)

ENDPOINTS_FILE = "endpoints.json"
SWEEP_INTERVAL = 5.0
HEALTH_TIMEOUT = 20.0


def manufacturer_anchors(config: CloudConfig) -> list[Certificate]:
    anchors = []
    for path in config.manufacturer_anchors:
        anchors.extend(c for c in load_pem_chain(Path(path).read_bytes()) if c.is_self_signed)
    default = Path(config.data_dir) / "manufacturer" / "root.pem"
    if default.exists():
        anchors.append(Certificate.from_pem(default.read_bytes()))
    return anchors


def make_context(config: CloudConfig, pki: CloudPki, system: str, endpoints: dict[str, str]) -> CloudContext:
    chain_pem, key_pem = pki.identity(system)
    return CloudContext(
        config.cloud_name,
        pki.root,
        pki.cloud_ca,
        chain_pem,
        key_pem,
        endpoints,
        manufacturer_anchors(config),
        gating=config.gating,
        verification_mode=config.verification_mode,
    )


def build_system(config: CloudConfig, pki: CloudPki, system: str, endpoints: dict[str, str]) -> tuple[CloudContext, Any]:
    """Instantiate one core system from config; returns (context, system)."""
    ctx = make_context(config, pki, system, endpoints)
    data = Path(config.data_dir)
    if system == CA:
        return ctx, CertificateAuthoritySystem(ctx, pki.authority())
    if system == CONTROLLER:
        secrets = SharedSecretStore(config.shared_secrets, config.shared_secret_fallback, single_use=config.hardened)
        return ctx, OnboardingController(
            ctx, secrets, name_flow=not config.hardened, key_algorithm=config.key_algorithm
        )
    if system == DEVICE_REGISTRY:
        return ctx, DeviceRegistry(ctx, data / "registries" / "devices.db", config.key_algorithm)
    if system == SYSTEM_REGISTRY:
        return ctx, SystemRegistry(ctx, data / "registries" / "systems.db", config.key_algorithm)
    if system == SERVICE_REGISTRY:
        return ctx, ServiceRegistry(ctx, data / "registries" / "services.db")
    if system == ORCHESTRATOR:
        rules = [OrchestrationRule.from_wire(r) for r in config.orchestration_rules]
        return ctx, Orchestrator(ctx, rules)
    if system == AUTHORIZATION:
        rules = [AuthorizationRule.from_wire(r) for r in config.authorization_rules]
        intercloud = [
            InterCloudRule(r["consumerCloud"], r["providerSystem"], r["serviceDefinition"]) for r in config.intercloud_rules
        ]
        return ctx, AuthorizationSystem(
            ctx, rules, data_dir=data / "authorization", token_ttl=config.token_ttl, intercloud_rules=intercloud
        )
    raise errors.BadConfig(f"unknown core system {system!r}")


class Sweeper:
    """Background expiry of registry entries."""

    def __init__(self, registries: list, interval: float = SWEEP_INTERVAL):
        self.registries = registries
        self.interval = interval
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="registry-sweeper", daemon=True)

    def start(self) -> "Sweeper":
        self._thread.start()
        return self

    def _run(self) -> None:
        while not self._stop.wait(self.interval):
            for registry in self.registries:
                try:
                    registry.expire_entries()
                except Exception:  # keep sweeping; the next pass retries
                    logger.exception("expiry sweep failed")

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=2)


def _free_port(host: str) -> int:
    with socket.socket() as s:
        s.bind((host, 0))
        return s.getsockname()[1]


@dataclass
class _Running:
    server: Optional[TlsServer] = None
    process: Optional[subprocess.Popen] = None


class LocalCloud:
    def __init__(self, config: CloudConfig):
        self.config = config
        self.pki: Optional[CloudPki] = None
        self.manufacturer: Optional[Manufacturer] = None
        self.endpoints: dict[str, str] = {}
        self.systems: dict[str, Any] = {}
        self.contexts: dict[str, CloudContext] = {}
        self._running: dict[str, _Running] = {}
        self._sweeper: Optional[Sweeper] = None
        self._sysop: Optional[HttpsClient] = None

    # -- lifecycle ----------------------------------------------------------------

    def up(self, wait: bool = True) -> "LocalCloud":
        config = self.config
        data = Path(config.data_dir)
        data.mkdir(parents=True, exist_ok=True)
        self.manufacturer = Manufacturer.load_or_create(data / "manufacturer", algorithm=config.key_algorithm)
        self.pki = ensure_pki(data, config.cloud_name, config.key_algorithm, config.validity_days)
        if config.mode == "threads":
            self._up_threads()
        else:
            self._up_processes()
        if wait:
            self.wait_healthy()
        (data / ENDPOINTS_FILE).write_text(json.dumps(self.endpoints, indent=2))
        return self

    def attach(self) -> "LocalCloud":
        """Bind to a cloud some other process started from the same data dir."""
        data = Path(self.config.data_dir)
        try:
            self.endpoints.update(json.loads((data / ENDPOINTS_FILE).read_text()))
        except (OSError, ValueError):
            raise errors.ServiceUnavailable(f"no running cloud recorded under {data}") from None
        self.manufacturer = Manufacturer.load_or_create(data / "manufacturer", algorithm=self.config.key_algorithm)
        self.pki = ensure_pki(data, self.config.cloud_name, self.config.key_algorithm, self.config.validity_days)
        return self

    def _up_threads(self) -> None:
        config = self.config
        servers: dict[str, TlsServer] = {}
        try:
            for system in CORE_SYSTEMS:
                servers[system] = TlsServer({}, None, config.host, config.ports.get(system, 0), system)
        except errors.PortInUse:
            for s in servers.values():
                s.stop()
            raise
        self.endpoints.update({name: s.url for name, s in servers.items()})
        for system, server in servers.items():
            ctx, obj = build_system(config, self.pki, system, self.endpoints)
            self.contexts[system], self.systems[system] = ctx, obj
            server.routes.update(obj.routes())
            server.set_context(ctx.server_context())
        for system, server in servers.items():
            server.start()
            self._running[system] = _Running(server=server)
        self._sweeper = Sweeper(
            [self.systems[DEVICE_REGISTRY], self.systems[SYSTEM_REGISTRY], self.systems[SERVICE_REGISTRY]]
        ).start()

    def _up_processes(self) -> None:
        config = self.config
        ports = {s: config.ports.get(s) or _free_port(config.host) for s in CORE_SYSTEMS}
        if len(set(ports.values())) != len(ports):
            raise errors.BadConfig("could not allocate distinct ports")
        for system, port in ports.items():
            with socket.socket() as probe:
                try:
                    probe.bind((config.host, port))
                except OSError:
                    raise errors.PortInUse(f"{system}: port {port} is in use") from None
        resolved = CloudConfig.from_dict({**config.to_dict(), "ports": ports, "mode": "processes"})
        config_path = Path(config.data_dir) / "cloud.json"
        resolved.save(config_path)
        host = "127.0.0.1" if config.host in ("0.0.0.0", "") else config.host
        self.endpoints.update({s: f"https://{host}:{p}" for s, p in ports.items()})
        self._config_path = config_path
        for system in CORE_SYSTEMS:
            self._spawn(system)

    def _spawn(self, system: str) -> None:
        logs = Path(self.config.data_dir) / "logs"
        logs.mkdir(exist_ok=True)
        out = open(logs / f"{system}.log", "ab")
        env = dict(os.environ)
        env["PYTHONPATH"] = os.pathsep.join([str(Path(__file__).resolve().parents[2]), env.get("PYTHONPATH", "")])
        proc = subprocess.Popen(
            [sys.executable, "-m", "localcloud", "serve", "--config", str(self._config_path), "--system", system],
            stdout=out,
            stderr=subprocess.STDOUT,
            env=env,
        )
        out.close()
        self._running[system] = _Running(process=proc)

    def down(self) -> None:
        if self._sweeper is not None:
            self._sweeper.stop()
            self._sweeper = None
        for system in list(self._running):
            self.kill(system)
        for obj in self.systems.values():
            repo = getattr(obj, "repo", None)
            if repo is not None:
                repo.close()
        self._running.clear()
        (Path(self.config.data_dir) / ENDPOINTS_FILE).unlink(missing_ok=True)

    def __enter__(self) -> "LocalCloud":
        return self.up()

    def __exit__(self, *exc) -> None:
        self.down()

    def kill(self, system: str) -> None:
        running = self._running.get(system)
        if running is None:
            return
        if running.server is not None and running.server.running:
            running.server.stop()
        if running.process is not None and running.process.poll() is None:
            running.process.terminate()
            try:
                running.process.wait(timeout=5)
            except subprocess.TimeoutExpired:
                running.process.kill()
                running.process.wait()

    def restart(self, system: str) -> None:
        running = self._running.get(system)
        if running is None:
            raise errors.BadConfig(f"{system} was never started")
        self.kill(system)
        if running.server is not None:
            old = running.server
            server = TlsServer(dict(old.routes), self.contexts[system].server_context(), self.config.host, old.port, system)
            running.server = server.start()
        else:
            self._spawn(system)
        self.wait_healthy([system])

    # -- access -------------------------------------------------------------------

    @property
    def controller_url(self) -> str:
        return self.endpoints[CONTROLLER]

    @property
    def trust_pem(self) -> bytes:
        assert self.pki is not None
        return self.pki.trust_pem

    def sysop(self) -> HttpsClient:
        if self._sysop is None:
            chain, key = self.pki.identity(SYSOP)
            self._sysop = HttpsClient.create(self.pki.cloud_trust_pem, chain, key, timeout=10.0)
        return self._sysop

    def core_cn(self, system: str) -> str:
        return core_common_name(system, self.config.cloud_name)

    def health(self, systems: Optional[list[str]] = None) -> dict[str, bool]:
        result = {}
        for system in systems or CORE_SYSTEMS:
            try:
                body = self.sysop().get(self.endpoints[system] + "/health", expect_peer=self.core_cn(system))
                result[system] = body.get("status") == "ready"
            except errors.LocalCloudError:
                result[system] = False
        return result

    def wait_healthy(self, systems: Optional[list[str]] = None, timeout: float = HEALTH_TIMEOUT) -> None:
        deadline = time.monotonic() + timeout
        while True:
            status = self.health(systems)
            if all(status.values()):
                return
            if time.monotonic() > deadline:
                down = sorted(s for s, ok in status.items() if not ok)
                raise errors.ServiceUnavailable(f"core systems not healthy: {down}")
            time.sleep(0.1)

    # -- administration -------------------------------------------------------------

    def add_authorization_rule(self, consumer: str, provider: str, service: str) -> None:
        rule = {"consumerSystem": consumer, "providerSystem": provider, "serviceDefinition": service}
        self.sysop().post(
            self.endpoints[AUTHORIZATION] + "/authorization/rules", {"add": [rule]}, expect_peer=self.core_cn(AUTHORIZATION)
        )

    def remove_authorization_rule(self, consumer: str, provider: str, service: str) -> None:
        rule = {"consumerSystem": consumer, "providerSystem": provider, "serviceDefinition": service}
        self.sysop().post(
            self.endpoints[AUTHORIZATION] + "/authorization/rules", {"remove": [rule]}, expect_peer=self.core_cn(AUTHORIZATION)
        )

    def rotate_authorization_key(self) -> str:
        body = self.sysop().post(
            self.endpoints[AUTHORIZATION] + "/authorization/rotate", {}, expect_peer=self.core_cn(AUTHORIZATION)
        )
        return body["publicKey"]

    def audit_records(self) -> dict:
        return self.sysop().get(self.endpoints[AUTHORIZATION] + "/authorization/audit", expect_peer=self.core_cn(AUTHORIZATION))

    def set_shared_secret(self, common_name: str, secret: str) -> None:
        """Threads mode only: register a per-device secret with the controller."""
        controller = self.systems.get(CONTROLLER)
        if controller is None:
            raise errors.BadConfig("shared secrets can only be changed at runtime in threads mode")
        controller.secrets.set(common_name, secret)

    def registry_counts(self) -> dict[str, int]:
        counts = {}
        for system in (DEVICE_REGISTRY, SYSTEM_REGISTRY, SERVICE_REGISTRY):
            body = self.sysop().post(
                self.endpoints[system] + f"/{system}/query", {"validOnly": False}, expect_peer=self.core_cn(system)
            )
            counts[system] = body["count"]
        return counts

    # -- devices ----------------------------------------------------------------------

    def new_agent(
        self,
        name: str,
        directory: Path,
        *,
        credential: str = "manufacturer",
        events: Optional[EventLog] = None,
        fault_at: Optional[int] = None,
        flow: str = "csr",
        device_name: Optional[str] = None,
    ) -> DeviceAgent:
        """A device agent whose secure element is provisioned for ``credential``."""
        config = AgentConfig(
            self.config.cloud_name, self.controller_url, self.trust_pem, directory, self.config.key_algorithm, flow
        )
        se = SecureElement(Path(directory) / "se")
        if credential == "manufacturer" and not se.has_certificate(MANUFACTURER_SLOT):
            self.manufacturer.provision(se, f"{name}-serial")
        elif credential == "arrowhead" and not se.has_certificate(ARROWHEAD_SLOT):
            cn = f"{device_name or name}.{self.config.cloud_name}"
            se.generate(ARROWHEAD_SLOT, self.config.key_algorithm)
            cert = self.pki.offline_authority().sign_certificate(se.csr(ARROWHEAD_SLOT, cn), CertificateKind.ONBOARDING)
            se.install_certificate(ARROWHEAD_SLOT, [cert, self.pki.cloud_ca])
        return DeviceAgent(name, config, secure_element=se, events=events, fault_at=fault_at)
