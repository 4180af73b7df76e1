"""File-backed stand-in for a TPM-style secure element.

Keys live in per-slot files with mode 0600 inside the element's directory.
Callers can ask for signatures, CSRs and TLS contexts, but a protected slot
(the manufacturer slot) never hands its private key out.
"""

from __future__ import annotations

import logging
import ssl
import threading
from pathlib import Path
from typing import Optional

from cryptography.hazmat.primitives import serialization

from .. import errors
from ..pki import (
    Certificate,
    CertificateSigningRequest,
    KeyPair,
    build_csr,
    generate_keypair,
    load_keypair,
    load_pem_chain,
    pem_chain,
    save_keypair,
    write_private,
)
from ..transport import client_context, client_context_from_files, server_context_from_files

logger = logging.getLogger(__name__)

MANUFACTURER_SLOT = "manufacturer"
ARROWHEAD_SLOT = "arrowhead"
ONBOARDING_SLOT = "onboarding"
DEVICE_SLOT = "device"


def system_slot(system_name: str) -> str:
    return f"system-{system_name}"


class SecureElement:
    def __init__(self, directory: Path, protected: tuple[str, ...] = (MANUFACTURER_SLOT,)):
        self.directory = Path(directory)
        self.protected = frozenset(protected)
        self._lock = threading.Lock()
        (self.directory / "keys").mkdir(parents=True, exist_ok=True)
        (self.directory / "certs").mkdir(parents=True, exist_ok=True)

    def key_path(self, slot: str) -> Path:
        if not slot or "/" in slot or slot.startswith("."):
            raise errors.InvalidRequest(f"bad slot name {slot!r}")
        return self.directory / "keys" / f"{slot}.pem"

    def cert_path(self, slot: str) -> Path:
        self.key_path(slot)
        return self.directory / "certs" / f"{slot}.pem"

    def _load(self, slot: str) -> KeyPair:
        path = self.key_path(slot)
        if not path.exists():
            raise errors.NotFound(f"secure element slot {slot!r} is empty")
        return load_keypair(path)

    # -- provisioning ---------------------------------------------------------

    def generate(self, slot: str, algorithm: str = "ec-p256") -> bytes:
        """Create a fresh key in ``slot`` and return its public key (DER)."""
        if slot in self.protected and self.has_key(slot):
            raise errors.KeyExportForbidden(f"slot {slot!r} is write-once")
        keys = generate_keypair(algorithm)
        with self._lock:
            save_keypair(self.key_path(slot), keys)
        return keys.public_key_bytes

    def import_key(self, slot: str, private_key_der: bytes) -> None:
        """Install a key generated elsewhere (the name-based onboarding flow)."""
        if slot in self.protected:
            raise errors.KeyExportForbidden(f"slot {slot!r} only accepts keys generated on chip")
        key = serialization.load_der_private_key(private_key_der, password=None)
        pem = key.private_bytes(
            serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8, serialization.NoEncryption()
        )
        with self._lock:
            write_private(self.key_path(slot), pem)

    def install_certificate(self, slot: str, chain: list[Certificate]) -> None:
        if not chain:
            raise errors.InvalidRequest("empty certificate chain")
        leaf_key = chain[0].public_key
        if leaf_key != self.public_key(slot):
            raise errors.InvalidRequest(f"certificate does not match the key in slot {slot!r}")
        path = self.cert_path(slot)
        with self._lock:
            path.write_bytes(pem_chain(chain))

    # -- use ----------------------------------------------------------------

    def has_key(self, slot: str) -> bool:
        return self.key_path(slot).exists()

    def has_certificate(self, slot: str) -> bool:
        return self.cert_path(slot).exists()

    def public_key(self, slot: str) -> bytes:
        return self._load(slot).public_key_bytes

    def chain(self, slot: str) -> list[Certificate]:
        path = self.cert_path(slot)
        if not path.exists():
            raise errors.NotFound(f"no certificate in slot {slot!r}")
        return load_pem_chain(path.read_bytes())

    def certificate(self, slot: str) -> Certificate:
        return self.chain(slot)[0]

    def sign(self, slot: str, data: bytes) -> bytes:
        return self._load(slot).sign(data)

    def csr(self, slot: str, common_name: str) -> CertificateSigningRequest:
        return build_csr(common_name, self._load(slot))

    def export(self, slot: str) -> bytes:
        if slot in self.protected:
            raise errors.KeyExportForbidden(f"private key in slot {slot!r} cannot be read")
        return self._load(slot).private_key_bytes()

    def client_context(self, slot: Optional[str], trust_pem: bytes) -> ssl.SSLContext:
        """TLS client context; OpenSSL reads the key straight from the slot file."""
        if slot is None:
            return client_context(trust_pem)
        return client_context_from_files(trust_pem, self.cert_path(slot), self.key_path(slot))

    def server_context(self, slot: str, trust_pem: bytes) -> ssl.SSLContext:
        return server_context_from_files(self.cert_path(slot), self.key_path(slot), trust_pem)

    def clear(self, slot: str) -> None:
        if slot in self.protected:
            raise errors.KeyExportForbidden(f"slot {slot!r} cannot be cleared")
        with self._lock:
            for path in (self.key_path(slot), self.cert_path(slot)):
                path.unlink(missing_ok=True)
