"""HTTP face of the Certificate Authority system (SignCertificate service)."""

from __future__ import annotations

import logging

from . import errors
from .context import CA, CONTROLLER, CORE_SYSTEMS, DEVICE_REGISTRY, SYSTEM_REGISTRY, CloudContext, health_route
from .pki import CertificateAuthority, CertificateAuthorityService, CertificateKind
from .transport import Request, Routes

logger = logging.getLogger(__name__)


def default_policy(ctx: CloudContext) -> dict[str, frozenset[CertificateKind]]:
    """Which core system may request which certificate kind."""
    return {
        ctx.common_name(CONTROLLER): frozenset({CertificateKind.ONBOARDING}),
        ctx.common_name(DEVICE_REGISTRY): frozenset({CertificateKind.DEVICE}),
        ctx.common_name(SYSTEM_REGISTRY): frozenset({CertificateKind.SYSTEM}),
    }


class CertificateAuthoritySystem:
    def __init__(self, ctx: CloudContext, ca: CertificateAuthority):
        self.ctx = ctx
        self.service = CertificateAuthorityService(ca, default_policy(ctx), ctx.cloud_store, ctx.denylist)

    @property
    def sign_calls(self) -> int:
        return self.service.sign_calls

    def sign(self, req: Request):
        caller = self.ctx.authenticate(req)
        body = req.json_object()
        csr, kind = body.get("encodedCsr"), body.get("kind")
        if not isinstance(csr, str) or not isinstance(kind, str):
            raise errors.MalformedRequest("encodedCsr and kind are required strings")
        return self.service.ca_service_sign(csr, kind, caller).to_wire()

    def check(self, req: Request):
        caller = self.ctx.authenticate(req)
        self.ctx.require_core(caller, *CORE_SYSTEMS)
        encoded = req.json_object().get("certificate")
        if not isinstance(encoded, str):
            raise errors.MalformedRequest("certificate is required")
        identity = self.service.check_certificate(encoded, self.ctx.clock())
        return {"commonName": identity.common_name, "kind": identity.kind.value}

    def routes(self) -> Routes:
        return {
            ("POST", "/certificate-authority/getSignedCertificate"): self.sign,
            ("POST", "/certificate-authority/checkCertificate"): self.check,
            ("GET", "/health"): health_route(CA),
        }
