"""Certificate hierarchy and the Certificate Authority system.

Hierarchy (issuer kind -> subject kind)::

    Root ------> CloudCA ---> Onboarding | Device | System
    Root (manufacturer anchor) ---> Manufacturer

The kind of every certificate is carried in a non-critical private extension
(``KIND_OID``) so path validation can enforce the edges above without
looking at common names.  X.509 encoding and raw signature primitives come
from ``cryptography``; path building, kind rules, validity checks and CSR
proof checks are done here.
"""

from __future__ import annotations

import base64
import binascii
import datetime as dt
import logging
import os
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

from cryptography import x509
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, padding, rsa
from cryptography.x509.oid import ExtendedKeyUsageOID, NameOID, ObjectIdentifier

from . import naming
from .errors import (
    BadCertificate,
    BadSignature,
    ClockError,
    Expired,
    ForbiddenKindTransition,
    InvalidCsr,
    InvalidCsrSignature,
    MalformedRequest,
    NotYetValid,
    Revoked,
    Unauthorized,
    UnknownAnchor,
    UnsupportedAlgorithm,
)

logger = logging.getLogger(__name__)

KIND_OID = ObjectIdentifier("1.3.6.1.4.1.59999.1.1")
DEFAULT_VALIDITY = dt.timedelta(days=365)
ROOT_VALIDITY = dt.timedelta(days=3650)
CLOUD_CA_VALIDITY = dt.timedelta(days=1825)
MAX_CHAIN_DEPTH = 6


def utcnow() -> dt.datetime:
    return dt.datetime.now(dt.timezone.utc)


class CertificateKind(str, Enum):
    ROOT = "root"
    CLOUD_CA = "cloudca"
    MANUFACTURER = "manufacturer"
    ONBOARDING = "onboarding"
    DEVICE = "device"
    SYSTEM = "system"


K = CertificateKind
ISSUANCE_EDGES: frozenset[tuple[CertificateKind, CertificateKind]] = frozenset(
    {
        (K.ROOT, K.CLOUD_CA),
        (K.ROOT, K.MANUFACTURER),
        (K.CLOUD_CA, K.ONBOARDING),
        (K.CLOUD_CA, K.DEVICE),
        (K.CLOUD_CA, K.SYSTEM),
    }
)
CA_KINDS = frozenset({K.ROOT, K.CLOUD_CA})


def kind_transition_allowed(issuer: CertificateKind, subject: CertificateKind) -> bool:
    return (issuer, subject) in ISSUANCE_EDGES


def parse_kind(value: str) -> CertificateKind:
    try:
        return CertificateKind(value.lower())
    except (ValueError, AttributeError):
        raise MalformedRequest(f"unknown certificate kind {value!r}") from None


# ---------------------------------------------------------------------------
# keys
# ---------------------------------------------------------------------------

_ALGORITHMS = {
    "ec-p256": lambda: ec.generate_private_key(ec.SECP256R1()),
    "ec-p384": lambda: ec.generate_private_key(ec.SECP384R1()),
    "rsa-2048": lambda: rsa.generate_private_key(public_exponent=65537, key_size=2048),
    "rsa-3072": lambda: rsa.generate_private_key(public_exponent=65537, key_size=3072),
}
SUPPORTED_ALGORITHMS = tuple(_ALGORITHMS)


def _hash_for(key) -> hashes.HashAlgorithm:
    if isinstance(key, (ec.EllipticCurvePrivateKey, ec.EllipticCurvePublicKey)):
        return hashes.SHA384() if key.curve.key_size >= 384 else hashes.SHA256()
    return hashes.SHA256()


def verify_signature(public_key, signature: bytes, data: bytes, hash_algorithm=None) -> bool:
    """Raw signature check; ``hash_algorithm`` defaults to the key's usual hash."""
    algo = hash_algorithm or _hash_for(public_key)
    try:
        if isinstance(public_key, ec.EllipticCurvePublicKey):
            public_key.verify(signature, data, ec.ECDSA(algo))
        elif isinstance(public_key, rsa.RSAPublicKey):
            public_key.verify(signature, data, padding.PKCS1v15(), algo)
        else:
            return False
    except InvalidSignature:
        return False
    return True


@dataclass
class KeyPair:
    algorithm: str
    private: object = field(repr=False)

    @property
    def public(self):
        return self.private.public_key()

    @property
    def public_key_bytes(self) -> bytes:
        return public_key_der(self.public)

    def private_key_bytes(self) -> bytes:
        return self.private.private_bytes(
            serialization.Encoding.DER,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )

    def private_key_pem(self) -> bytes:
        return self.private.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )

    @property
    def key_algorithm(self) -> str:
        """JCA-style algorithm name (``EC`` or ``RSA``)."""
        return "RSA" if self.algorithm.startswith("rsa") else "EC"

    def sign(self, data: bytes) -> bytes:
        algo = _hash_for(self.private)
        if isinstance(self.private, ec.EllipticCurvePrivateKey):
            return self.private.sign(data, ec.ECDSA(algo))
        return self.private.sign(data, padding.PKCS1v15(), algo)

    def verify(self, signature: bytes, data: bytes) -> bool:
        return verify_signature(self.public, signature, data)

    @classmethod
    def from_pem(cls, pem: bytes) -> "KeyPair":
        key = serialization.load_pem_private_key(pem, password=None)
        if isinstance(key, rsa.RSAPrivateKey):
            algorithm = f"rsa-{key.key_size}"
        elif isinstance(key, ec.EllipticCurvePrivateKey):
            algorithm = f"ec-p{key.curve.key_size}"
        else:
            raise UnsupportedAlgorithm(type(key).__name__)
        return cls(algorithm, key)


def generate_keypair(algorithm: str = "ec-p256") -> KeyPair:
    try:
        factory = _ALGORITHMS[algorithm]
    except (KeyError, TypeError):
        raise UnsupportedAlgorithm(f"unsupported key algorithm {algorithm!r}") from None
    return KeyPair(algorithm, factory())


def public_key_der(public_key) -> bytes:
    return public_key.public_bytes(
        serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
    )


def key_algorithm_name(public_key) -> str:
    return "RSA" if isinstance(public_key, rsa.RSAPublicKey) else "EC"


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def unb64(text: str, what: str = "value") -> bytes:
    if not isinstance(text, str) or not text:
        raise MalformedRequest(f"{what} must be a non-empty Base64 string")
    try:
        return base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError, ValueError):
        raise MalformedRequest(f"{what} is not valid Base64") from None


def check_common_name(cn: str) -> str:
    try:
        naming.split_common_name(cn)
    except Exception:
        raise MalformedRequest("common name must be 1..64 chars of dotted DNS labels") from None
    return cn


# ---------------------------------------------------------------------------
# CSR
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CertificateSigningRequest:
    subject_common_name: str
    public_key: bytes
    proof_signature: bytes
    der: bytes = field(repr=False)

    def encode(self) -> str:
        return b64(self.der)

    @classmethod
    def decode(cls, text: str) -> "CertificateSigningRequest":
        try:
            raw = unb64(text, "CSR")
        except MalformedRequest as exc:
            raise InvalidCsr(str(exc)) from None
        return cls.from_der(raw)

    @classmethod
    def from_der(cls, raw: bytes) -> "CertificateSigningRequest":
        try:
            req = x509.load_der_x509_csr(raw)
            cns = req.subject.get_attributes_for_oid(NameOID.COMMON_NAME)
            cn = cns[0].value if cns else ""
            pub = public_key_der(req.public_key())
            sig = req.signature
        except Exception:
            raise InvalidCsr("CSR does not decode to a PKCS#10 structure") from None
        return cls(str(cn), pub, sig, raw)

    @property
    def x509(self) -> x509.CertificateSigningRequest:
        return x509.load_der_x509_csr(self.der)


def build_csr(common_name: str, keys: KeyPair) -> CertificateSigningRequest:
    if not common_name:
        raise InvalidCsr("empty common name")
    req = (
        x509.CertificateSigningRequestBuilder()
        .subject_name(x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, common_name)]))
        .sign(keys.private, _hash_for(keys.private))
    )
    return CertificateSigningRequest.from_der(req.public_bytes(serialization.Encoding.DER))


def verify_csr(csr: CertificateSigningRequest) -> bool:
    """Check the CSR proof-of-possession signature against its own key."""
    try:
        req = csr.x509
        pub = serialization.load_der_public_key(csr.public_key)
        if public_key_der(req.public_key()) != csr.public_key:
            return False
        return verify_signature(
            pub, req.signature, req.tbs_certrequest_bytes, req.signature_hash_algorithm
        )
    except Exception:
        return False


# ---------------------------------------------------------------------------
# certificates
# ---------------------------------------------------------------------------


def _der_utf8(text: str) -> bytes:
    raw = text.encode()
    return b"\x0c" + bytes([len(raw)]) + raw


def _read_kind(cert: x509.Certificate) -> Optional[CertificateKind]:
    try:
        ext = cert.extensions.get_extension_for_oid(KIND_OID)
    except x509.ExtensionNotFound:
        return None
    value = ext.value.value
    if len(value) < 2 or value[0] != 0x0C or value[1] != len(value) - 2:
        return None
    try:
        return CertificateKind(value[2:].decode())
    except (ValueError, UnicodeDecodeError):
        return None


def _cn(name: x509.Name) -> str:
    attrs = name.get_attributes_for_oid(NameOID.COMMON_NAME)
    return str(attrs[0].value) if attrs else ""


class Certificate:
    """An X.509 certificate annotated with its level in the hierarchy."""

    __slots__ = ("x509", "_kind")

    def __init__(self, cert: x509.Certificate):
        self.x509 = cert
        self._kind = _read_kind(cert)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Certificate) and other.der == self.der

    def __hash__(self) -> int:
        return hash(self.der)

    def __repr__(self) -> str:
        return f"Certificate({self.subject_common_name!r}, kind={self._kind}, serial={self.serial})"

    @property
    def kind(self) -> CertificateKind:
        if self._kind is None:
            raise BadCertificate(f"certificate {self.subject_common_name!r} carries no kind")
        return self._kind

    @property
    def kind_or_none(self) -> Optional[CertificateKind]:
        return self._kind

    @property
    def subject_common_name(self) -> str:
        return _cn(self.x509.subject)

    @property
    def issuer_common_name(self) -> str:
        return _cn(self.x509.issuer)

    @property
    def public_key(self) -> bytes:
        return public_key_der(self.x509.public_key())

    @property
    def not_before(self) -> dt.datetime:
        return self.x509.not_valid_before_utc

    @property
    def not_after(self) -> dt.datetime:
        return self.x509.not_valid_after_utc

    @property
    def serial(self) -> int:
        return self.x509.serial_number

    @property
    def signature(self) -> bytes:
        return self.x509.signature

    @property
    def der(self) -> bytes:
        return self.x509.public_bytes(serialization.Encoding.DER)

    @property
    def pem(self) -> bytes:
        return self.x509.public_bytes(serialization.Encoding.PEM)

    @property
    def is_self_signed(self) -> bool:
        return self.x509.subject == self.x509.issuer

    def encode(self) -> str:
        return b64(self.der)

    @classmethod
    def decode(cls, text: str) -> "Certificate":
        return cls.from_der(unb64(text, "certificate"))

    @classmethod
    def from_der(cls, raw: bytes) -> "Certificate":
        try:
            return cls(x509.load_der_x509_certificate(raw))
        except ValueError:
            raise BadCertificate("not a DER certificate") from None

    @classmethod
    def from_pem(cls, raw: bytes) -> "Certificate":
        return cls(x509.load_pem_x509_certificate(raw))


def load_pem_chain(raw: bytes) -> list[Certificate]:
    return [Certificate(c) for c in x509.load_pem_x509_certificates(raw)]


def pem_chain(certs: Iterable[Certificate]) -> bytes:
    return b"".join(c.pem for c in certs)


def _truncate(t: dt.datetime) -> dt.datetime:
    return t.astimezone(dt.timezone.utc).replace(microsecond=0)


def _build(
    subject_cn: str,
    public_key,
    issuer_cn: str,
    issuer_private,
    kind: CertificateKind,
    serial: int,
    not_before: dt.datetime,
    not_after: dt.datetime,
    extra_sans: Sequence[x509.GeneralName] = (),
) -> Certificate:
    b = (
        x509.CertificateBuilder()
        .subject_name(x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, subject_cn)]))
        .issuer_name(x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, issuer_cn)]))
        .public_key(public_key)
        .serial_number(serial)
        .not_valid_before(not_before)
        .not_valid_after(not_after)
        .add_extension(x509.SubjectKeyIdentifier.from_public_key(public_key), critical=False)
        .add_extension(
            x509.AuthorityKeyIdentifier.from_issuer_public_key(issuer_private.public_key()),
            critical=False,
        )
        .add_extension(x509.UnrecognizedExtension(KIND_OID, _der_utf8(kind.value)), critical=False)
    )
    if kind in CA_KINDS:
        b = b.add_extension(
            x509.BasicConstraints(ca=True, path_length=None if kind is K.ROOT else 0),
            critical=True,
        ).add_extension(
            x509.KeyUsage(False, False, False, False, False, True, True, False, False),
            critical=True,
        )
    else:
        b = (
            b.add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
            .add_extension(
                x509.KeyUsage(
                    True, False, isinstance(public_key, rsa.RSAPublicKey), False, False,
                    False, False, False, False,
                ),
                critical=True,
            )
            .add_extension(
                x509.ExtendedKeyUsage(
                    [ExtendedKeyUsageOID.CLIENT_AUTH, ExtendedKeyUsageOID.SERVER_AUTH]
                ),
                critical=False,
            )
            .add_extension(
                x509.SubjectAlternativeName([x509.DNSName(subject_cn), *extra_sans]),
                critical=False,
            )
        )
    return Certificate(b.sign(issuer_private, _hash_for(issuer_private)))


def create_root(
    common_name: str,
    keys: KeyPair,
    validity: dt.timedelta = ROOT_VALIDITY,
    now: Optional[dt.datetime] = None,
) -> Certificate:
    """Self-signed trust anchor (cloud root or a manufacturer root)."""
    check_common_name(common_name)
    start = _truncate(now or utcnow())
    return _build(common_name, keys.public, common_name, keys.private, K.ROOT, 1, start, start + validity)


class SerialCounter:
    """Strictly increasing serials, optionally persisted to a file."""

    def __init__(self, path: Optional[Path] = None, start: int = 1):
        self._lock = threading.Lock()
        self._path = path
        self._next = start
        if path is not None and path.exists():
            self._next = int(path.read_text().strip() or start)

    def take(self) -> int:
        with self._lock:
            value = self._next
            self._next += 1
            if self._path is not None:
                tmp = self._path.with_suffix(".tmp")
                tmp.write_text(str(self._next))
                os.replace(tmp, self._path)
            return value


class CertificateAuthority:
    """An issuing key plus its certificate; signing is serialized on one lock."""

    def __init__(
        self,
        keys: KeyPair,
        certificate: Certificate,
        chain: Sequence[Certificate] = (),
        serials: Optional[SerialCounter] = None,
        default_validity: dt.timedelta = DEFAULT_VALIDITY,
    ):
        self.keys = keys
        self.certificate = certificate
        self.chain = list(chain)
        self.serials = serials or SerialCounter(start=2)
        self.default_validity = default_validity
        self._lock = threading.Lock()

    @property
    def kind(self) -> CertificateKind:
        return self.certificate.kind

    @property
    def common_name(self) -> str:
        return self.certificate.subject_common_name

    def sign_certificate(
        self,
        csr: CertificateSigningRequest,
        kind: CertificateKind,
        validity: Optional[dt.timedelta] = None,
        now: Optional[dt.datetime] = None,
        extra_sans: Sequence[x509.GeneralName] = (),
    ) -> Certificate:
        if not verify_csr(csr):
            raise InvalidCsrSignature("CSR proof signature does not verify")
        kind = CertificateKind(kind)
        if not kind_transition_allowed(self.kind, kind):
            raise ForbiddenKindTransition(f"{self.kind.value} may not issue {kind.value}")
        check_common_name(csr.subject_common_name)
        validity = self.default_validity if validity is None else validity
        start = _truncate(now or utcnow())
        end = start + validity
        if end <= start:
            raise ClockError("not_after must be after not_before")
        public = serialization.load_der_public_key(csr.public_key)
        with self._lock:
            serial = self.serials.take()
            cert = _build(
                csr.subject_common_name,
                public,
                self.common_name,
                self.keys.private,
                kind,
                serial,
                start,
                end,
                extra_sans,
            )
        logger.info("issued %s certificate #%d for %s", kind.value, serial, csr.subject_common_name)
        return cert

    def issue(
        self,
        common_name: str,
        keys: KeyPair,
        kind: CertificateKind,
        validity: Optional[dt.timedelta] = None,
        **kw,
    ) -> Certificate:
        """Convenience: build the CSR for ``keys`` and sign it."""
        return self.sign_certificate(build_csr(common_name, keys), kind, validity, **kw)


# ---------------------------------------------------------------------------
# path validation
# ---------------------------------------------------------------------------


class TrustStore:
    def __init__(self, anchors: Iterable[Certificate] = ()):
        self.anchors: list[Certificate] = []
        for a in anchors:
            self.add(a)

    def add(self, anchor: Certificate) -> None:
        if not anchor.is_self_signed or not verify_signature(
            anchor.x509.public_key(),
            anchor.signature,
            anchor.x509.tbs_certificate_bytes,
            anchor.x509.signature_hash_algorithm,
        ):
            raise BadCertificate(f"anchor {anchor.subject_common_name!r} is not self-signed")
        if anchor not in self.anchors:
            self.anchors.append(anchor)

    def __contains__(self, cert: Certificate) -> bool:
        return cert in self.anchors

    def __len__(self) -> int:
        return len(self.anchors)

    @property
    def pem(self) -> bytes:
        return pem_chain(self.anchors)

    @classmethod
    def from_directory(cls, path: Path) -> "TrustStore":
        certs: list[Certificate] = []
        for p in sorted(Path(path).glob("*.pem")):
            certs.extend(load_pem_chain(p.read_bytes()))
        return cls(certs)


@dataclass(frozen=True)
class VerifiedIdentity:
    common_name: str
    kind: CertificateKind
    certificate: Optional[Certificate] = field(default=None, compare=False, repr=False)


class DenyList:
    """Local revocation list keyed by certificate fingerprint (extension)."""

    def __init__(self):
        self._denied: set[bytes] = set()
        self._lock = threading.Lock()

    def deny(self, cert: Certificate) -> None:
        with self._lock:
            self._denied.add(cert.x509.fingerprint(hashes.SHA256()))

    def __contains__(self, cert: Certificate) -> bool:
        return cert.x509.fingerprint(hashes.SHA256()) in self._denied


def _check_window(cert: Certificate, now: dt.datetime) -> None:
    if now < cert.not_before:
        raise NotYetValid(f"{cert.subject_common_name!r} not valid before {cert.not_before}")
    if now > cert.not_after:
        raise Expired(f"{cert.subject_common_name!r} expired at {cert.not_after}")


def _signed_by(cert: Certificate, issuer: Certificate) -> bool:
    return verify_signature(
        issuer.x509.public_key(),
        cert.signature,
        cert.x509.tbs_certificate_bytes,
        cert.x509.signature_hash_algorithm,
    )


def _is_ca(cert: Certificate) -> bool:
    try:
        return bool(cert.x509.extensions.get_extension_for_class(x509.BasicConstraints).value.ca)
    except x509.ExtensionNotFound:
        return False


def verify_chain(
    leaf: Certificate,
    presented_intermediates: Sequence[Certificate],
    store: TrustStore,
    now: Optional[dt.datetime] = None,
    denylist: Optional[DenyList] = None,
) -> VerifiedIdentity:
    """Build and check a path from ``leaf`` to an anchor in ``store``.

    Each certificate on the path must be inside its validity window at
    ``now``, signed by the next one up, and every edge must be an allowed
    kind transition.
    """
    now = now or utcnow()
    leaf_kind = leaf.kind
    current = leaf
    depth = 0
    while True:
        if denylist is not None and current in denylist:
            raise Revoked(f"{current.subject_common_name!r} is on the deny list")
        _check_window(current, now)
        if current in store:
            return VerifiedIdentity(leaf.subject_common_name, leaf_kind, leaf)
        if current.is_self_signed:
            raise UnknownAnchor(f"self-signed {current.subject_common_name!r} is not trusted")
        depth += 1
        if depth > MAX_CHAIN_DEPTH:
            raise UnknownAnchor("chain too long")
        candidates = [
            c
            for c in [*presented_intermediates, *store.anchors]
            if c.x509.subject == current.x509.issuer and c != current
        ]
        if not candidates:
            raise UnknownAnchor(f"no issuer found for {current.subject_common_name!r}")
        issuer = next((c for c in candidates if _signed_by(current, c)), None)
        if issuer is None:
            raise BadSignature(f"signature on {current.subject_common_name!r} does not verify")
        issuer_kind = issuer.kind
        if not _is_ca(issuer) or not kind_transition_allowed(issuer_kind, current.kind):
            raise ForbiddenKindTransition(
                f"{issuer_kind.value} may not issue {current.kind.value}"
            )
        current = issuer


# ---------------------------------------------------------------------------
# the CA system
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CertificateSigningResponse:
    certificate: Certificate
    chain: tuple[Certificate, ...]
    algorithm: str

    def to_wire(self) -> dict:
        return {
            "encodedCertificate": self.certificate.encode(),
            "chain": [c.encode() for c in self.chain],
            "algorithm": self.algorithm,
            "format": "X.509",
        }

    @classmethod
    def from_wire(cls, body: dict) -> "CertificateSigningResponse":
        try:
            return cls(
                Certificate.decode(body["encodedCertificate"]),
                tuple(Certificate.decode(c) for c in body.get("chain", [])),
                str(body.get("algorithm", "")),
            )
        except (KeyError, TypeError):
            raise MalformedRequest("bad certificate signing response") from None


class CertificateAuthorityService:
    """SignCertificate: CSR in, signed certificate plus issuing chain out.

    Only the core systems named in ``policy`` may call it, each for its own
    kinds (static allow-list, default deny).
    """

    def __init__(
        self,
        ca: CertificateAuthority,
        policy: dict[str, frozenset[CertificateKind]],
        store: TrustStore,
        denylist: Optional[DenyList] = None,
    ):
        self.ca = ca
        self.policy = dict(policy)
        self.store = store
        self.denylist = denylist or DenyList()
        self.sign_calls = 0
        self._calls_lock = threading.Lock()

    def ca_service_sign(
        self,
        encoded_csr: str,
        kind: str,
        requester: VerifiedIdentity,
        validity: Optional[dt.timedelta] = None,
    ) -> CertificateSigningResponse:
        with self._calls_lock:
            self.sign_calls += 1
        allowed = self.policy.get(requester.common_name, frozenset())
        wanted = parse_kind(kind)
        if wanted not in allowed:
            raise Unauthorized(f"{requester.common_name!r} may not request {wanted.value} certificates")
        csr = CertificateSigningRequest.decode(encoded_csr)
        cert = self.ca.sign_certificate(csr, wanted, validity)
        return CertificateSigningResponse(
            cert, (self.ca.certificate, *self.ca.chain), key_algorithm_name(cert.x509.public_key())
        )

    def check_certificate(self, encoded: str, now: Optional[dt.datetime] = None) -> VerifiedIdentity:
        cert = Certificate.decode(encoded)
        return verify_chain(cert, [self.ca.certificate, *self.ca.chain], self.store, now, self.denylist)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def write_private(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)


def save_keypair(path: Path, keys: KeyPair) -> None:
    write_private(path, keys.private_key_pem())


def load_keypair(path: Path) -> KeyPair:
    return KeyPair.from_pem(Path(path).read_bytes())


def save_certificate(path: Path, cert: Certificate, chain: Sequence[Certificate] = ()) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(pem_chain([cert, *chain]))
