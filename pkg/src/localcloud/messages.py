"""Wire payloads shared by the onboarding controller, registries and agent."""

from __future__ import annotations

import datetime as dt
import re
from dataclasses import dataclass, field
from typing import Any, Optional

from . import errors
from .pki import Certificate, CertificateSigningResponse, KeyPair, b64, unb64

ENDPOINT_KEYS = ("deviceRegistry", "systemRegistry", "serviceRegistry", "orchestrator")
_META_KEY = re.compile(r"^[A-Za-z0-9_.-]{1,64}$")
MAX_META_VALUE = 256
MAX_META_ENTRIES = 32


def format_time(t: dt.datetime) -> str:
    return t.astimezone(dt.timezone.utc).isoformat().replace("+00:00", "Z")


def parse_time(text: Any, field_name: str = "timestamp") -> dt.datetime:
    if not isinstance(text, str) or len(text) > 40:
        raise errors.MalformedRequest(f"{field_name} must be an ISO 8601 string")
    try:
        value = dt.datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError:
        raise errors.MalformedRequest(f"{field_name} is not ISO 8601") from None
    if value.tzinfo is None:
        value = value.replace(tzinfo=dt.timezone.utc)
    return value.astimezone(dt.timezone.utc)


def require_str(body: dict, key: str, max_len: int = 256) -> str:
    value = body.get(key)
    if not isinstance(value, str) or not value or len(value) > max_len:
        raise errors.MalformedRequest(f"{key} must be a non-empty string")
    return value


def optional_str(body: dict, key: str, max_len: int = 256) -> Optional[str]:
    if body.get(key) is None:
        return None
    return require_str(body, key, max_len)


def require_int(body: dict, key: str) -> int:
    value = body.get(key)
    if isinstance(value, bool) or not isinstance(value, int):
        raise errors.MalformedRequest(f"{key} must be an integer")
    return value


def check_metadata(value: Any) -> dict[str, str]:
    if value is None:
        return {}
    if not isinstance(value, dict) or len(value) > MAX_META_ENTRIES:
        raise errors.MalformedRequest("metadata must be a string map")
    for k, v in value.items():
        if not _META_KEY.match(k) or not isinstance(v, str) or len(v) > MAX_META_VALUE:
            raise errors.MalformedRequest("metadata keys must match [A-Za-z0-9_.-]+ and values be strings")
    return dict(value)


@dataclass
class CertificateGrant:
    """A CA-issued certificate as handed to its subject."""

    certificate: Certificate
    intermediate_chain: list[Certificate]
    key_algorithm: str
    key_format: str = "X.509"
    private_key: Optional[bytes] = field(default=None, repr=False)

    @classmethod
    def from_signing(cls, signed: CertificateSigningResponse, keys: Optional[KeyPair] = None) -> "CertificateGrant":
        return cls(
            signed.certificate,
            list(signed.chain),
            signed.algorithm,
            "X.509",
            keys.private_key_bytes() if keys is not None else None,
        )

    def to_wire(self, cert_key: str) -> dict[str, Any]:
        out: dict[str, Any] = {
            cert_key: self.certificate.encode(),
            "intermediateChain": [c.encode() for c in self.intermediate_chain],
            "keyAlgorithm": self.key_algorithm,
            "keyFormat": self.key_format,
            "publicKey": b64(self.certificate.public_key),
        }
        if self.private_key is not None:
            out["privateKey"] = b64(self.private_key)
            out["privateKeyFormat"] = "PKCS#8"
        return out

    @classmethod
    def from_wire(cls, body: dict, cert_key: str) -> "CertificateGrant":
        try:
            return cls(
                Certificate.decode(body[cert_key]),
                [Certificate.decode(c) for c in body.get("intermediateChain", [])],
                str(body.get("keyAlgorithm", "")),
                str(body.get("keyFormat", "")),
                unb64(body["privateKey"], "privateKey") if body.get("privateKey") else None,
            )
        except (KeyError, TypeError):
            raise errors.MalformedRequest(f"response lacks {cert_key}") from None


@dataclass
class OnboardingResponse:
    success: bool
    endpoints: dict[str, str]
    grant: Optional[CertificateGrant] = None

    def __post_init__(self) -> None:
        if self.success and (self.grant is None or any(not self.endpoints.get(k) for k in ENDPOINT_KEYS)):
            raise ValueError("a successful onboarding response needs a certificate and four endpoints")

    def to_wire(self) -> dict[str, Any]:
        out: dict[str, Any] = {"success": self.success, "endpoints": dict(self.endpoints)}
        if self.grant is not None:
            out.update(self.grant.to_wire("onboardingCertificate"))
        return out

    @classmethod
    def from_wire(cls, body: dict) -> "OnboardingResponse":
        if not isinstance(body, dict) or not body.get("success"):
            raise errors.MalformedRequest("unsuccessful onboarding response")
        endpoints = body.get("endpoints") or {}
        return cls(True, {k: str(endpoints.get(k, "")) for k in ENDPOINT_KEYS}, CertificateGrant.from_wire(body, "onboardingCertificate"))
