"""Onboarding Controller: the first entry point of the local cloud.

A new device authenticates with a manufacturer certificate, a preloaded
Arrowhead certificate or a bare shared secret, and receives an Onboarding
certificate plus the endpoints of the registries and the Orchestrator.
"""

from __future__ import annotations

import base64
import binascii
import hmac
import logging
import threading
import time
from dataclasses import dataclass
from typing import Optional, Sequence, Union

from . import errors
from .context import CA, CONTROLLER, ORCHESTRATOR, CloudContext, health_route
from .messages import CertificateGrant, OnboardingResponse, require_str
from .pki import (
    Certificate,
    CertificateKind,
    CertificateSigningRequest,
    CertificateSigningResponse,
    VerifiedIdentity,
    build_csr,
    check_common_name,
    generate_keypair,
    verify_chain,
)
from .transport import Request, Response, Routes

logger = logging.getLogger(__name__)

CORE_ENDPOINT_SERVICES = {
    "deviceRegistry": "device-discovery",
    "systemRegistry": "system-discovery",
    "serviceRegistry": "service-discovery",
    "orchestrator": "orchestration",
}
ARROWHEAD_CREDENTIAL_KINDS = (CertificateKind.ONBOARDING, CertificateKind.DEVICE, CertificateKind.SYSTEM)


@dataclass(frozen=True)
class ArrowheadCert:
    chain: tuple[Certificate, ...]


@dataclass(frozen=True)
class ManufacturerCert:
    chain: tuple[Certificate, ...]


@dataclass(frozen=True)
class SharedSecret:
    secret: str

    def __repr__(self) -> str:
        return "SharedSecret(***)"


Credential = Union[ArrowheadCert, ManufacturerCert, SharedSecret]


def basic_auth_header(secret: str) -> str:
    """RFC 2617 Basic credentials with an empty user id."""
    return "Basic " + base64.b64encode(f":{secret}".encode()).decode()


def parse_basic_auth(header: Optional[str]) -> SharedSecret:
    if not header or not header.startswith("Basic "):
        raise errors.BadSecret("shared secret required")
    try:
        decoded = base64.b64decode(header[6:].strip(), validate=True).decode()
    except (binascii.Error, UnicodeDecodeError):
        raise errors.BadSecret("malformed authorization header") from None
    user, sep, secret = decoded.partition(":")
    if not sep or user or not secret:
        raise errors.BadSecret("shared secret must be sent with an empty user id")
    return SharedSecret(secret)


class SharedSecretStore:
    """Per-device secrets keyed by expected common name, plus a cloud fallback.

    With ``single_use`` each common name can be onboarded once per secret;
    the check-and-mark is atomic.
    """

    def __init__(
        self,
        per_device: Optional[dict[str, str]] = None,
        fallback: Optional[str] = None,
        single_use: bool = False,
    ):
        self._per_device = dict(per_device or {})
        self._fallback = fallback
        self.single_use = single_use
        self._consumed: set[str] = set()
        self._lock = threading.Lock()

    def set(self, common_name: str, secret: str) -> None:
        with self._lock:
            self._per_device[common_name] = secret
            self._consumed.discard(common_name)

    def check(self, common_name: str, presented: SharedSecret) -> None:
        expected = self._per_device.get(common_name, self._fallback)
        # compare against a dummy when nothing is configured to keep timing flat
        ok = hmac.compare_digest(
            presented.secret.encode(), (expected if expected is not None else "\0" * 32).encode()
        )
        if not ok or expected is None:
            raise errors.BadSecret("shared secret rejected")
        if self.single_use:
            with self._lock:
                if common_name in self._consumed:
                    raise errors.BadSecret("shared secret rejected")
                self._consumed.add(common_name)


class OnboardingController:
    def __init__(
        self,
        ctx: CloudContext,
        secrets: Optional[SharedSecretStore] = None,
        *,
        name_flow: bool = True,
        key_algorithm: str = "ec-p256",
        endpoint_ttl: float = 60.0,
    ):
        self.ctx = ctx
        self.secrets = secrets or SharedSecretStore()
        self.name_flow = name_flow
        self.key_algorithm = key_algorithm
        self.endpoint_ttl = endpoint_ttl
        self.orchestrator_calls = 0
        self._endpoints: Optional[tuple[float, dict[str, str]]] = None
        self._endpoints_lock = threading.Lock()

    # -- credential checks -------------------------------------------------

    def authenticate(self, credential: Credential, common_name: str) -> None:
        """Raise unless ``credential`` lets its holder onboard as ``common_name``."""
        now = self.ctx.clock()
        if isinstance(credential, SharedSecret):
            self.secrets.check(common_name, credential)
            return
        if not credential.chain:
            raise errors.UntrustedCredential("no certificate presented")
        leaf, rest = credential.chain[0], list(credential.chain[1:])
        try:
            if isinstance(credential, ManufacturerCert):
                identity = verify_chain(leaf, rest, self.ctx.manufacturer_store, now, self.ctx.denylist)
                if identity.kind is not CertificateKind.MANUFACTURER:
                    raise errors.UntrustedCredential("not a manufacturer certificate")
            else:
                identity = verify_chain(
                    leaf, [*rest, *self.ctx.intermediates], self.ctx.cloud_store, now, self.ctx.denylist
                )
                if identity.kind not in ARROWHEAD_CREDENTIAL_KINDS:
                    raise errors.UntrustedCredential("not an Arrowhead end-entity certificate")
                # a system certificate speaks for the device that hosts it
                owner = identity.common_name
                if identity.kind is CertificateKind.SYSTEM:
                    owner = owner.split(".", 1)[1]
                if owner != common_name:
                    raise errors.UntrustedCredential("an Arrowhead certificate only onboards its own device")
        except (errors.ChainError, errors.ForbiddenKindTransition) as exc:
            raise errors.UntrustedCredential(f"credential rejected ({exc.code})") from None

    def classify(self, chain: Sequence[Certificate]) -> Credential:
        """Decide which certificate credential a TLS peer presented."""
        if not chain:
            raise errors.UntrustedCredential("client certificate required")
        kind = chain[0].kind_or_none
        if kind is CertificateKind.MANUFACTURER:
            return ManufacturerCert(tuple(chain))
        if kind in ARROWHEAD_CREDENTIAL_KINDS:
            return ArrowheadCert(tuple(chain))
        raise errors.UntrustedCredential("unrecognised certificate")

    # -- onboarding flows -------------------------------------------------

    def onboard_csr(self, encoded_csr: str, credential: Credential) -> OnboardingResponse:
        csr = CertificateSigningRequest.decode(encoded_csr)
        check_common_name(csr.subject_common_name)
        self.authenticate(credential, csr.subject_common_name)
        signed = self._sign(encoded_csr)
        return OnboardingResponse(True, self.resolve_core_endpoints(), CertificateGrant.from_signing(signed))

    def onboard_certificate_csr(self, encoded_csr: str, presented: Union[ManufacturerCert, ArrowheadCert]) -> OnboardingResponse:
        if not isinstance(presented, (ManufacturerCert, ArrowheadCert)):
            raise errors.UntrustedCredential("certificate credential required")
        return self.onboard_csr(encoded_csr, presented)

    def onboard_sharedsecret_csr(self, encoded_csr: str, secret: SharedSecret) -> OnboardingResponse:
        if not isinstance(secret, SharedSecret):
            raise errors.BadSecret("shared secret required")
        return self.onboard_csr(encoded_csr, secret)

    def onboard_with_name(self, common_name: str, presented: Credential) -> OnboardingResponse:
        if not self.name_flow:
            raise errors.NameFlowDisabled("name-based onboarding is disabled in this profile")
        if not isinstance(common_name, str) or not common_name:
            raise errors.InvalidRequest("commonName must be non-empty")
        try:
            check_common_name(common_name)
        except errors.MalformedRequest as exc:
            raise errors.InvalidRequest(str(exc)) from None
        self.authenticate(presented, common_name)
        keys = generate_keypair(self.key_algorithm)
        signed = self._sign(build_csr(common_name, keys).encode())
        return OnboardingResponse(True, self.resolve_core_endpoints(), CertificateGrant.from_signing(signed, keys))

    def _sign(self, encoded_csr: str) -> CertificateSigningResponse:
        try:
            body = self.ctx.client().post(
                self.ctx.url(CA) + "/certificate-authority/getSignedCertificate",
                {"encodedCsr": encoded_csr, "kind": CertificateKind.ONBOARDING.value},
                expect_peer=self.ctx.common_name(CA),
            )
        except (errors.ServiceUnavailable, errors.TransportRejected) as exc:
            raise errors.CaUnavailable(f"certificate authority unavailable ({exc.code})") from None
        signed = CertificateSigningResponse.from_wire(body)
        if signed.certificate.kind is not CertificateKind.ONBOARDING:
            raise errors.CaUnavailable("certificate authority returned the wrong kind")
        return signed

    def resolve_core_endpoints(self) -> dict[str, str]:
        with self._endpoints_lock:
            if self._endpoints is not None and time.monotonic() - self._endpoints[0] < self.endpoint_ttl:
                return dict(self._endpoints[1])
        bundle = {}
        client = self.ctx.client()
        self.orchestrator_calls += 1
        try:
            for key, service in CORE_ENDPOINT_SERVICES.items():
                result = client.post(
                    self.ctx.url(ORCHESTRATOR) + "/orchestrator/orchestration",
                    {"requestedService": service, "flags": {"dynamic": False}},
                    expect_peer=self.ctx.common_name(ORCHESTRATOR),
                )
                providers = result.get("response") or []
                if not providers:
                    raise errors.OrchestrationFailure(f"no provider for {service}")
                bundle[key] = providers[0]["endpoint"]
        except errors.OrchestrationFailure:
            raise
        except errors.LocalCloudError as exc:
            raise errors.OrchestrationFailure(f"orchestrator failed ({exc.code})") from None
        except (KeyError, TypeError, AttributeError):
            raise errors.OrchestrationFailure("malformed orchestration response") from None
        with self._endpoints_lock:
            self._endpoints = (time.monotonic(), bundle)
        return dict(bundle)

    def invalidate_endpoints(self) -> None:
        with self._endpoints_lock:
            self._endpoints = None

    # -- HTTP ---------------------------------------------------------------

    def _respond(self, fn) -> Response:
        try:
            return Response(200, fn().to_wire())
        except errors.LocalCloudError as exc:
            return Response(exc.status, {"success": False, **exc.to_wire()})

    def _peer_chain(self, req: Request) -> list[Certificate]:
        return [req.peer] if req.peer is not None else []

    def http_certificate_csr(self, req: Request) -> Response:
        def run():
            csr = require_str(req.json_object(), "certificateSigningRequest", 16384)
            return self.onboard_certificate_csr(csr, self.classify(self._peer_chain(req)))

        return self._respond(run)

    def http_certificate_name(self, req: Request) -> Response:
        def run():
            name = req.json_object().get("commonName")
            return self.onboard_with_name(name, self.classify(self._peer_chain(req)))

        return self._respond(run)

    def http_sharedsecret_csr(self, req: Request) -> Response:
        def run():
            secret = parse_basic_auth(req.headers.get("authorization"))
            csr = require_str(req.json_object(), "certificateSigningRequest", 16384)
            return self.onboard_sharedsecret_csr(csr, secret)

        return self._respond(run)

    def http_sharedsecret_name(self, req: Request) -> Response:
        def run():
            secret = parse_basic_auth(req.headers.get("authorization"))
            name = req.json_object().get("commonName")
            return self.onboard_with_name(name, secret)

        return self._respond(run)

    def routes(self) -> Routes:
        return {
            ("POST", "/onboarding/certificate/csr"): self.http_certificate_csr,
            ("POST", "/onboarding/certificate/name"): self.http_certificate_name,
            ("POST", "/onboarding/sharedsecret/csr"): self.http_sharedsecret_csr,
            ("POST", "/onboarding/sharedsecret/name"): self.http_sharedsecret_name,
            ("GET", "/health"): health_route(CONTROLLER),
        }
