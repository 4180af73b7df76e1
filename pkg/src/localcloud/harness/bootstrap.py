"""Create or reload the PKI material of a local cloud.

Layout under ``<data_dir>/pki``::

    root.pem / root.key            self-signed cloud root
    cloudca.pem / cloudca.key      issuing intermediate (CloudCA kind)
    serial                         CloudCA serial counter (used by the CA system)
    offline-serial                 serials for harness-side issuance
    core/<system>.pem / .key       identity chain (leaf + CloudCA) per core system

A simulated manufacturer lives under ``<data_dir>/manufacturer``.
"""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..agent.secure_element import MANUFACTURER_SLOT, SecureElement
from ..context import CORE_SYSTEMS, SYSOP, core_common_name
from ..pki import (
    Certificate,
    CertificateAuthority,
    CertificateKind,
    KeyPair,
    SerialCounter,
    create_root,
    generate_keypair,
    load_keypair,
    load_pem_chain,
    pem_chain,
    save_certificate,
    save_keypair,
    utcnow,
)

logger = logging.getLogger(__name__)

ROOT_COMMON_NAME = "arrowhead-root"
CLOUDCA_VALIDITY = dt.timedelta(days=5 * 365)
OFFLINE_SERIAL_BASE = 1 << 40
# renew core identities this long before they lapse
RENEW_MARGIN = dt.timedelta(days=7)


@dataclass
class CloudPki:
    directory: Path
    cloud_name: str
    root: Certificate
    root_keys: KeyPair = field(repr=False)
    cloud_ca: Certificate = field(repr=False)
    cloud_ca_keys: KeyPair = field(repr=False)
    validity: dt.timedelta = dt.timedelta(days=365)

    @property
    def trust_pem(self) -> bytes:
        """What a device needs to authenticate the cloud: the root alone."""
        return pem_chain([self.root])

    @property
    def cloud_trust_pem(self) -> bytes:
        return pem_chain([self.root, self.cloud_ca])

    def authority(self) -> CertificateAuthority:
        """The CloudCA as run by the Certificate Authority system."""
        return CertificateAuthority(
            self.cloud_ca_keys, self.cloud_ca, [self.root], SerialCounter(self.directory / "serial", 2), self.validity
        )

    def offline_authority(self) -> CertificateAuthority:
        """CloudCA with a disjoint serial range, for harness-side issuance."""
        return CertificateAuthority(
            self.cloud_ca_keys,
            self.cloud_ca,
            [self.root],
            SerialCounter(self.directory / "offline-serial", OFFLINE_SERIAL_BASE),
            self.validity,
        )

    def identity_paths(self, system: str) -> tuple[Path, Path]:
        return self.directory / "core" / f"{system}.pem", self.directory / "core" / f"{system}.key"

    def identity(self, system: str) -> tuple[bytes, bytes]:
        chain, key = self.identity_paths(system)
        return chain.read_bytes(), key.read_bytes()


def _load_or_create_root(directory: Path, cn: str, algorithm: str) -> tuple[Certificate, KeyPair]:
    cert_path, key_path = directory / "root.pem", directory / "root.key"
    if cert_path.exists() and key_path.exists():
        return Certificate.from_pem(cert_path.read_bytes()), load_keypair(key_path)
    keys = generate_keypair(algorithm)
    cert = create_root(cn, keys)
    save_keypair(key_path, keys)
    save_certificate(cert_path, cert)
    logger.info("created root %s", cn)
    return cert, keys


def ensure_pki(
    data_dir: Path,
    cloud_name: str,
    algorithm: str = "ec-p256",
    validity_days: int = 365,
    systems: tuple[str, ...] = (*CORE_SYSTEMS, SYSOP),
    now: Optional[dt.datetime] = None,
) -> CloudPki:
    """Load the cloud PKI, creating whatever is missing.  Idempotent."""
    directory = Path(data_dir) / "pki"
    directory.mkdir(parents=True, exist_ok=True)
    root, root_keys = _load_or_create_root(directory, ROOT_COMMON_NAME, algorithm)

    ca_cert, ca_key = directory / "cloudca.pem", directory / "cloudca.key"
    if ca_cert.exists() and ca_key.exists():
        cloud_ca, cloud_ca_keys = Certificate.from_pem(ca_cert.read_bytes()), load_keypair(ca_key)
    else:
        cloud_ca_keys = generate_keypair(algorithm)
        issuer = CertificateAuthority(root_keys, root, serials=SerialCounter(directory / "root-serial", 2))
        cloud_ca = issuer.issue(cloud_name, cloud_ca_keys, CertificateKind.CLOUD_CA, CLOUDCA_VALIDITY)
        save_keypair(ca_key, cloud_ca_keys)
        save_certificate(ca_cert, cloud_ca)

    pki = CloudPki(directory, cloud_name, root, root_keys, cloud_ca, cloud_ca_keys, dt.timedelta(days=validity_days))
    ca = pki.offline_authority()
    now = now or utcnow()
    for system in systems:
        chain_path, key_path = pki.identity_paths(system)
        if chain_path.exists() and key_path.exists():
            leaf = load_pem_chain(chain_path.read_bytes())[0]
            if leaf.not_after - RENEW_MARGIN > now:
                continue
        keys = generate_keypair(algorithm)
        cert = ca.issue(core_common_name(system, cloud_name), keys, CertificateKind.SYSTEM)
        save_keypair(key_path, keys)
        save_certificate(chain_path, cert, [cloud_ca])
    return pki


@dataclass
class Manufacturer:
    """A device maker's root and the factory step that provisions devices."""

    root: Certificate
    authority: CertificateAuthority = field(repr=False)

    @classmethod
    def load_or_create(cls, directory: Path, name: str = "acme-devices", algorithm: str = "ec-p256") -> "Manufacturer":
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        root, keys = _load_or_create_root(directory, name, algorithm)
        authority = CertificateAuthority(
            keys, root, serials=SerialCounter(directory / "serial", 2), default_validity=dt.timedelta(days=10 * 365)
        )
        return cls(root, authority)

    def provision(self, secure_element: SecureElement, device_serial: str) -> Certificate:
        """Factory step: key generated inside the element, certificate installed next to it."""
        secure_element.generate(MANUFACTURER_SLOT)
        csr = secure_element.csr(MANUFACTURER_SLOT, device_serial)
        cert = self.authority.sign_certificate(csr, CertificateKind.MANUFACTURER)
        secure_element.install_certificate(MANUFACTURER_SLOT, [cert])
        return cert
