"""Exception hierarchy shared by every core system, the agent and the harness.

Each error carries a stable ``code`` (the class name) and an HTTP status so it
can cross the wire as ``{"errorCode": ..., "errorMessage": ...}`` and be
re-raised as the same class on the client side.
"""

from __future__ import annotations

from typing import Any


class LocalCloudError(Exception):
    status = 500

    @property
    def code(self) -> str:
        return type(self).__name__

    def to_wire(self) -> dict[str, Any]:
        return {"errorCode": self.code, "errorMessage": str(self) or self.code}


# -- input validation ------------------------------------------------------


class MalformedRequest(LocalCloudError):
    status = 400


class InvalidRequest(MalformedRequest):
    pass


class MalformedIdentifier(MalformedRequest):
    pass


class MalformedQuery(MalformedRequest):
    pass


class InvalidCsr(MalformedRequest):
    pass


class UnsupportedAlgorithm(MalformedRequest):
    pass


class ClockError(MalformedRequest):
    pass


# -- certificates ----------------------------------------------------------


class InvalidCsrSignature(InvalidCsr):
    pass


class ForbiddenKindTransition(LocalCloudError):
    status = 403


class ChainError(LocalCloudError):
    """Base for every certificate path validation failure."""

    status = 401


class UnknownAnchor(ChainError):
    pass


class BadSignature(ChainError):
    pass


class Expired(ChainError):
    pass


class NotYetValid(ChainError):
    pass


class Revoked(ChainError):
    pass


class BadCertificate(ChainError):
    pass


class ChainInvalid(ChainError):
    pass


class KeyExportForbidden(LocalCloudError):
    status = 403


# -- authentication / authorization ---------------------------------------


class Unauthenticated(LocalCloudError):
    status = 401


class UntrustedCredential(Unauthenticated):
    pass


class BadSecret(Unauthenticated):
    pass


class Unauthorized(LocalCloudError):
    status = 403


class WrongCertificateKind(Unauthorized):
    pass


class OwnershipMismatch(Unauthorized):
    pass


class ForbiddenCaller(Unauthorized):
    pass


class ProviderRejectedToken(Unauthorized):
    pass


class NameFlowDisabled(Unauthorized):
    pass


# -- registries / orchestration -------------------------------------------


class NotFound(LocalCloudError):
    status = 404


class NoProviderFound(NotFound):
    pass


class UnknownProviderDevice(LocalCloudError):
    status = 422


class UnknownProviderSystem(LocalCloudError):
    status = 422


class Conflict(LocalCloudError):
    status = 409


class DuplicateDevice(Conflict):
    pass


class DuplicateSystem(Conflict):
    pass


class DuplicateService(Conflict):
    pass


# -- availability ----------------------------------------------------------


class ServiceUnavailable(LocalCloudError):
    status = 503


class CaUnavailable(ServiceUnavailable):
    pass


class OrchestrationFailure(ServiceUnavailable):
    pass


class TransportRejected(LocalCloudError):
    """The peer refused the TLS handshake (unknown or missing certificate)."""

    status = 495


class RequestTooLarge(MalformedRequest):
    status = 413


class InternalError(LocalCloudError):
    pass


# -- harness ---------------------------------------------------------------


class BadConfig(LocalCloudError):
    pass


class PortInUse(LocalCloudError):
    pass


def _all_subclasses(cls: type) -> list[type]:
    out = []
    for sub in cls.__subclasses__():
        out.append(sub)
        out.extend(_all_subclasses(sub))
    return out


def errors_by_code() -> dict[str, type[LocalCloudError]]:
    """Every known error class by code, including ones defined elsewhere."""
    return {c.__name__: c for c in [LocalCloudError, *_all_subclasses(LocalCloudError)]}


def from_wire(status: int, body: Any) -> LocalCloudError:
    """Rebuild the exception a peer reported; unknown codes degrade by status."""
    code = body.get("errorCode") if isinstance(body, dict) else None
    message = body.get("errorMessage", "") if isinstance(body, dict) else ""
    cls = errors_by_code().get(code or "")
    if cls is None:
        if status == 404:
            cls = NotFound
        elif status in (401, 403):
            cls = Unauthorized
        elif status == 503:
            cls = ServiceUnavailable
        elif 400 <= status < 500:
            cls = MalformedRequest
        else:
            cls = InternalError
    return cls(message)
