"""Runtime context shared by the core systems of one local cloud."""

from __future__ import annotations

import datetime as dt
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import errors, naming
from .pki import (
    Certificate,
    CertificateKind,
    DenyList,
    TrustStore,
    VerifiedIdentity,
    pem_chain,
    utcnow,
    verify_chain,
)
from .transport import HttpsClient, Request, client_context, server_context

CORE_DEVICE = "core"

# core system names (hosted on the reserved "core" device)
CA = "certificate-authority"
CONTROLLER = "onboarding-controller"
DEVICE_REGISTRY = "device-registry"
SYSTEM_REGISTRY = "system-registry"
SERVICE_REGISTRY = "service-registry"
ORCHESTRATOR = "orchestrator"
AUTHORIZATION = "authorization"
SYSOP = "sysop"

CORE_SYSTEMS = (CA, CONTROLLER, DEVICE_REGISTRY, SYSTEM_REGISTRY, SERVICE_REGISTRY, ORCHESTRATOR, AUTHORIZATION)

# public core service definitions resolvable by any cloud system
CORE_SERVICES = {
    "sign-certificate": CA,
    "onboarding": CONTROLLER,
    "device-discovery": DEVICE_REGISTRY,
    "system-discovery": SYSTEM_REGISTRY,
    "service-discovery": SERVICE_REGISTRY,
    "orchestration": ORCHESTRATOR,
    "authorization-control": AUTHORIZATION,
}


def core_common_name(system: str, cloud: str) -> str:
    return naming.system_common_name(system, CORE_DEVICE, cloud)


@dataclass
class CloudContext:
    """Everything a core system needs to talk to and authenticate its peers.

    ``identity_chain_pem`` holds the system's own certificate followed by the
    CloudCA certificate; ``endpoints`` maps core system names to base URLs.
    """

    cloud_name: str
    root: Certificate
    cloud_ca: Certificate
    identity_chain_pem: bytes
    identity_key_pem: bytes = field(repr=False)
    endpoints: dict[str, str] = field(default_factory=dict)
    manufacturer_anchors: list[Certificate] = field(default_factory=list)
    gating: bool = True
    verification_mode: str = "cache"
    clock: Callable[[], dt.datetime] = utcnow
    denylist: DenyList = field(default_factory=DenyList)
    timeout: float = 10.0

    def __post_init__(self) -> None:
        naming.check_label(self.cloud_name, "cloud name")
        if self.verification_mode not in ("cache", "ca"):
            raise errors.BadConfig("verification_mode must be 'cache' or 'ca'")
        self.cloud_store = TrustStore([self.root])
        self.manufacturer_store = TrustStore(self.manufacturer_anchors)
        self.identity = Certificate.from_pem(self.identity_chain_pem)
        self._client: Optional[HttpsClient] = None
        self._client_lock = threading.Lock()

    # -- trust ------------------------------------------------------------

    @property
    def cloud_trust_pem(self) -> bytes:
        return pem_chain([self.root, self.cloud_ca])

    @property
    def tls_trust_pem(self) -> bytes:
        """Anchors accepted at the TLS layer; kinds are checked afterwards."""
        return pem_chain([self.root, self.cloud_ca, *self.manufacturer_anchors])

    @property
    def intermediates(self) -> list[Certificate]:
        return [self.cloud_ca]

    def common_name(self, system: str) -> str:
        return core_common_name(system, self.cloud_name)

    @property
    def reserved_device(self) -> str:
        return CORE_DEVICE

    def server_context(self):
        return server_context(self.identity_chain_pem, self.identity_key_pem, self.tls_trust_pem)

    def client(self) -> HttpsClient:
        with self._client_lock:
            if self._client is None:
                self._client = HttpsClient(
                    client_context(self.cloud_trust_pem, self.identity_chain_pem, self.identity_key_pem),
                    identity=self.identity,
                    timeout=self.timeout,
                )
            return self._client

    def url(self, system: str) -> str:
        try:
            return self.endpoints[system]
        except KeyError:
            raise errors.ServiceUnavailable(f"no endpoint configured for {system}") from None

    # -- caller authentication ---------------------------------------------

    def verify(self, cert: Certificate) -> VerifiedIdentity:
        if self.verification_mode == "ca":
            body = self.client().post(
                self.url(CA) + "/certificate-authority/checkCertificate",
                {"certificate": cert.encode()},
                expect_peer=self.common_name(CA),
            )
            return VerifiedIdentity(body["commonName"], CertificateKind(body["kind"]), cert)
        return verify_chain(cert, self.intermediates, self.cloud_store, self.clock(), self.denylist)

    def authenticate(self, req: Request) -> VerifiedIdentity:
        """Chain-validate the TLS peer against the cloud anchors."""
        if req.peer is None:
            raise errors.Unauthenticated("client certificate required")
        try:
            return self.verify(req.peer)
        except errors.ChainError as exc:
            raise errors.ChainInvalid(f"{exc.code}: {exc}") from None
        except errors.ForbiddenKindTransition as exc:
            raise errors.ChainInvalid(str(exc)) from None

    def require_kind(self, caller: VerifiedIdentity, *kinds: CertificateKind) -> None:
        if self.gating and caller.kind not in kinds:
            wanted = "/".join(k.value for k in kinds)
            raise errors.WrongCertificateKind(f"{wanted} certificate required, got {caller.kind.value}")

    def require_common_name(self, caller: VerifiedIdentity, expected: str) -> None:
        if self.gating and caller.common_name != expected:
            raise errors.OwnershipMismatch("certificate does not belong to this entity")

    def require_core(self, caller: VerifiedIdentity, *systems: str) -> None:
        """Unconditional check that the caller is one of the named core systems."""
        allowed = {self.common_name(s) for s in systems}
        if caller.common_name not in allowed or caller.kind is not CertificateKind.SYSTEM:
            raise errors.ForbiddenCaller("caller is not permitted to use this function")


def health_route(name: str):
    def health(req: Request):
        return {"status": "ready", "system": name}

    return health
